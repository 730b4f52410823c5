//! Attribution overlay rendering: pink for evidence toward the target
//! class, blue for evidence against, alpha scaled by |φ| relative to the
//! strongest segment, plus a fixed legend strip along the bottom edge.

use crate::data::ImageBuf;

use super::{AttributionMap, Segmentation, ShapError};

pub const POSITIVE_TINT: [u8; 3] = [255, 105, 180];
pub const NEGATIVE_TINT: [u8; 3] = [65, 105, 225];
pub const LEGEND_HEIGHT: usize = 16;

/// strongest segment's overlay opacity; weaker segments scale down linearly
const MAX_ALPHA: f64 = 0.6;

fn blend(px: u8, tint: u8, alpha: f64) -> u8 {
    ((1.0 - alpha) * px as f64 + alpha * tint as f64 + 0.5) as u8
}

/// Tints each segment of `base` by the sign and relative magnitude of its
/// attribution and appends the legend strip. An all-zero map renders as an
/// untinted copy.
pub fn render_heatmap(
    attribution: &AttributionMap,
    seg: &Segmentation,
    base: &ImageBuf,
) -> Result<ImageBuf, ShapError> {
    let (h, w) = seg.extent();
    if base.height != h || base.width != w {
        return Err(ShapError::Shape(format!(
            "base image {}x{} does not cover a {h}x{w} segmentation",
            base.height, base.width
        )));
    }
    if attribution.phi.len() != seg.segments() {
        return Err(ShapError::CoalitionLength {
            got: attribution.phi.len(),
            want: seg.segments(),
        });
    }
    let max_abs = attribution
        .phi
        .iter()
        .fold(0.0f64, |acc, p| acc.max(p.abs()));

    let mut pixels = Vec::with_capacity((h + LEGEND_HEIGHT) * w * 3);
    for y in 0..h {
        for x in 0..w {
            let at = (y * w + x) * 3;
            let phi = attribution.phi[seg.segment_of(y, x)];
            if max_abs == 0.0 || phi == 0.0 {
                pixels.extend_from_slice(&base.pixels[at..at + 3]);
                continue;
            }
            let alpha = MAX_ALPHA * phi.abs() / max_abs;
            let tint = if phi > 0.0 { POSITIVE_TINT } else { NEGATIVE_TINT };
            for c in 0..3 {
                pixels.push(blend(base.pixels[at + c], tint[c], alpha));
            }
        }
    }
    for _ in 0..LEGEND_HEIGHT {
        for x in 0..w {
            // blue at the left edge through white to pink at the right
            let t = if w == 1 {
                0.0
            } else {
                2.0 * x as f64 / (w - 1) as f64 - 1.0
            };
            let tint = if t < 0.0 { NEGATIVE_TINT } else { POSITIVE_TINT };
            for c in 0..3 {
                pixels.push(blend(255, tint[c], t.abs()));
            }
        }
    }
    Ok(ImageBuf::new(w, h + LEGEND_HEIGHT, pixels).expect("legend geometry"))
}
