//! Shared fixtures for the CLI integration and acceptance tests: a tiny
//! synthetic corpus of three easily separable shape classes.

use std::path::Path;

use rand::Rng;
use xcnn_core::data::image::{write_ppm, ImageBuf};

pub const CLASS_DIRS: [&str; 3] = ["cross", "disk", "ring"];

/// Writes `counts[c]` images of class `CLASS_DIRS[c]` under `root/<class>/`.
/// Shapes are bright (≈190–240) on a dark noisy background (≈30), with
/// jittered geometry so the classes need actual features, not pixel lookup.
pub fn synthetic_corpus(root: &Path, counts: [usize; 3], size: usize, seed: u64) {
    for (class, (dir, n)) in CLASS_DIRS.iter().zip(counts).enumerate() {
        let class_dir = root.join(dir);
        std::fs::create_dir_all(&class_dir).unwrap();
        for j in 0..n {
            let image = draw(class, size, seed, j);
            write_ppm(&image, &class_dir.join(format!("img_{j:03}.ppm"))).unwrap();
        }
    }
}

fn draw(class: usize, size: usize, seed: u64, index: usize) -> ImageBuf {
    let mut rng = xcnn_core::rng::rng(seed, &[7, class as u64, index as u64]);
    let mut pixels = vec![0u8; size * size * 3];
    for px in pixels.chunks_exact_mut(3) {
        let bg = rng.gen_range(18..42) as u8;
        px.copy_from_slice(&[bg, bg, bg]);
    }

    let s = size as f64;
    let cx = s * rng.gen_range(0.42..0.58);
    let cy = s * rng.gen_range(0.42..0.58);
    let r = s * rng.gen_range(0.26..0.36);
    let bar = (s * rng.gen_range(0.06..0.10)).max(1.0);
    let hole = r * rng.gen_range(0.45..0.60);

    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let dist = (dx * dx + dy * dy).sqrt();
            let inside = match class {
                // cross: two orthogonal bars through the center
                0 => (dx.abs() < bar || dy.abs() < bar) && dx.abs() < r && dy.abs() < r,
                // disk: filled circle
                1 => dist < r,
                // ring: annulus
                _ => dist < r && dist > hole,
            };
            if inside {
                let v = rng.gen_range(190..241) as u8;
                let at = (y * size + x) * 3;
                pixels[at..at + 3].copy_from_slice(&[v, v, v]);
            }
        }
    }
    ImageBuf::new(size, size, pixels).unwrap()
}
