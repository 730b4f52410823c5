//! Model-agnostic Shapley attributions over image segments.
//!
//! The image is partitioned into a rectangular grid of segments; each
//! coalition keeps some segments visible and replaces the rest with a
//! background reference. Attributions come from the Shapley-kernel
//! weighted regression over coalition evaluations, with the efficiency
//! constraint Σφ = f(full) − f(empty) eliminated algebraically so it
//! holds exactly instead of approximately. A factorial-formula oracle
//! (`exact_shapley`) covers small segment counts for verification.

mod render;

pub use render::{render_heatmap, LEGEND_HEIGHT, NEGATIVE_TINT, POSITIVE_TINT};

use std::collections::HashSet;

use thiserror::Error;

use crate::data::{normalize, DataError};
use crate::nn::{Classifier, ModelError};
use crate::rng::{self, stream};
use crate::tensor::{Element, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ShapError {
    #[error("grid {grid} does not divide image extent {extent}")]
    BadGrid { grid: usize, extent: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("coalition length {got} does not match segment count {want}")]
    CoalitionLength { got: usize, want: usize },
    #[error("budget {budget} too small: sampling {segments} segments needs at least {need} evaluations")]
    BudgetTooSmall {
        budget: usize,
        segments: usize,
        need: usize,
    },
    #[error("{m} segments exceed the exact-enumeration cap of {max}")]
    TooManySegments { m: usize, max: usize },
    #[error("attribution regression is singular even after regularization")]
    SingularSystem,
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

// ── Segmentation ───────────────────────────────────────────────────────

/// Per-pixel assignment of an H×W raster to M segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    height: usize,
    width: usize,
    map: Vec<u32>,
    segments: usize,
}

impl Segmentation {
    /// g×g rectangular grid; g must divide both extents.
    pub fn grid(height: usize, width: usize, grid: usize) -> Result<Self, ShapError> {
        for extent in [height, width] {
            if grid == 0 || extent % grid != 0 {
                return Err(ShapError::BadGrid { grid, extent });
            }
        }
        let (cell_h, cell_w) = (height / grid, width / grid);
        let mut map = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                map.push(((y / cell_h) * grid + x / cell_w) as u32);
            }
        }
        Ok(Segmentation {
            height,
            width,
            map,
            segments: grid * grid,
        })
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn segment_of(&self, y: usize, x: usize) -> usize {
        self.map[y * self.width + x] as usize
    }
}

// ── Coalitions ─────────────────────────────────────────────────────────

/// Replacement pixels for masked segments.
#[derive(Debug, Clone)]
pub enum Background {
    /// [3, h, w] unit-scale image, e.g. the dataset channel mean.
    Image(Tensor<f32>),
    /// one constant for every channel
    Constant(f32),
}

/// Copies visible segments from the image and masked segments from the
/// background. `image` is a [3, h, w] unit-scale tensor.
pub fn apply_coalition(
    image: &Tensor<f32>,
    seg: &Segmentation,
    coalition: &[bool],
    background: &Background,
) -> Result<Tensor<f32>, ShapError> {
    let (h, w) = seg.extent();
    if image.shape() != [3, h, w] {
        return Err(ShapError::Shape(format!(
            "image {:?} does not cover a {h}x{w} segmentation",
            image.shape()
        )));
    }
    if coalition.len() != seg.segments() {
        return Err(ShapError::CoalitionLength {
            got: coalition.len(),
            want: seg.segments(),
        });
    }
    if let Background::Image(bg) = background {
        if bg.shape() != image.shape() {
            return Err(ShapError::Shape(format!(
                "background {:?} does not match image {:?}",
                bg.shape(),
                image.shape()
            )));
        }
    }
    let mut out = image.data().to_vec();
    for y in 0..h {
        for x in 0..w {
            if coalition[seg.segment_of(y, x)] {
                continue;
            }
            for c in 0..3 {
                let at = (c * h + y) * w + x;
                out[at] = match background {
                    Background::Image(bg) => bg.data()[at],
                    Background::Constant(v) => *v,
                };
            }
        }
    }
    Ok(Tensor::new(vec![3, h, w], out).expect("masked image shape"))
}

// ── Shapley kernel ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelWeight {
    /// empty and full coalitions pin the regression, they are not weighted rows
    Constraint,
    Weight(f64),
}

fn binomial(m: usize, s: usize) -> f64 {
    let s = s.min(m - s);
    let mut out = 1.0f64;
    for i in 0..s {
        out = out * (m - i) as f64 / (i + 1) as f64;
    }
    out
}

/// π(s) = (M−1) / (C(M,s) · s · (M−s)) for interior sizes.
pub fn shapley_kernel_weight(m: usize, s: usize) -> KernelWeight {
    if s == 0 || s == m {
        KernelWeight::Constraint
    } else {
        KernelWeight::Weight((m - 1) as f64 / (binomial(m, s) * (s * (m - s)) as f64))
    }
}

// ── Coalition selection ────────────────────────────────────────────────

fn mask_of(m: usize, members: &[usize]) -> Vec<bool> {
    let mut z = vec![false; m];
    for &i in members {
        z[i] = true;
    }
    z
}

fn complement_of(z: &[bool]) -> Vec<bool> {
    z.iter().map(|&b| !b).collect()
}

/// Visits every size-s subset of {0..m} in lexicographic order.
fn for_each_subset(m: usize, s: usize, mut visit: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..s).collect();
    loop {
        visit(&idx);
        let mut i = s;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != m - s + i {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in i + 1..s {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Interior coalitions for the regression, largest kernel weights first
/// (size pairs (s, M−s) from the outside in). A pair that fits in the
/// remaining budget is enumerated exhaustively; the first pair that does
/// not is sampled without replacement until the budget is spent.
fn choose_coalitions(m: usize, rows: usize, seed: u64) -> Vec<Vec<bool>> {
    let mut chosen: Vec<Vec<bool>> = Vec::with_capacity(rows);
    let mut rng = rng::rng(seed, &[stream::COALITION]);
    let mut s = 1;
    while s * 2 <= m && chosen.len() < rows {
        let paired = s * 2 != m;
        let pair_count = binomial(m, s) * if paired { 2.0 } else { 1.0 };
        let remaining = rows - chosen.len();
        if pair_count <= remaining as f64 {
            for_each_subset(m, s, |members| {
                let z = mask_of(m, members);
                if paired {
                    chosen.push(complement_of(&z));
                }
                chosen.push(z);
            });
        } else {
            let mut seen: HashSet<Vec<bool>> = HashSet::new();
            let mut attempts = 0usize;
            while chosen.len() < rows && attempts < 200 * remaining {
                attempts += 1;
                let members = rand::seq::index::sample(&mut rng, m, s).into_vec();
                let z = mask_of(m, &members);
                if !seen.insert(z.clone()) {
                    continue;
                }
                if paired && chosen.len() + 1 < rows {
                    let zc = complement_of(&z);
                    seen.insert(zc.clone());
                    chosen.push(z);
                    chosen.push(zc);
                } else {
                    chosen.push(z);
                }
            }
        }
        s += 1;
    }
    chosen.truncate(rows);
    chosen
}

// ── Constrained weighted least squares ─────────────────────────────────

/// Gaussian elimination with partial pivoting; `None` when a pivot
/// collapses relative to the matrix scale.
fn gaussian_solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    let scale = a
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v.abs()))
        .max(1e-300);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r, &q| {
                a[r * n + col]
                    .abs()
                    .partial_cmp(&a[q * n + col].abs())
                    .unwrap()
            })
            .unwrap();
        if a[pivot_row * n + col].abs() < 1e-12 * scale {
            return None;
        }
        if pivot_row != col {
            for j in 0..n {
                a.swap(col * n + j, pivot_row * n + j);
            }
            b.swap(col, pivot_row);
        }
        for row in col + 1..n {
            let factor = a[row * n + col] / a[col * n + col];
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= factor * a[col * n + j];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0f64; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for j in col + 1..n {
            acc -= a[col * n + j] * x[j];
        }
        x[col] = acc / a[col * n + col];
    }
    Some(x)
}

/// Solves the kernel regression with φ_{M−1} eliminated by the efficiency
/// constraint. Singular normal equations get one ridge retry.
fn solve_constrained(
    coalitions: &[Vec<bool>],
    values: &[f64],
    weights: &[f64],
    m: usize,
    v_empty: f64,
    delta: f64,
) -> Result<Vec<f64>, ShapError> {
    let n = m - 1;
    let mut a = vec![0.0f64; n * n];
    let mut b = vec![0.0f64; n];
    let mut x_row = vec![0.0f64; n];
    for ((z, &v), &w) in coalitions.iter().zip(values).zip(weights) {
        let last = if z[m - 1] { 1.0 } else { 0.0 };
        for i in 0..n {
            x_row[i] = if z[i] { 1.0 } else { 0.0 } - last;
        }
        let y = v - v_empty - last * delta;
        for i in 0..n {
            if x_row[i] == 0.0 {
                continue;
            }
            let wx = w * x_row[i];
            for j in 0..n {
                a[i * n + j] += wx * x_row[j];
            }
            b[i] += wx * y;
        }
    }
    let head = match gaussian_solve(a.clone(), b.clone(), n) {
        Some(x) => x,
        None => {
            let ridge = 1e-8
                * (0..n)
                    .map(|i| a[i * n + i])
                    .fold(0.0f64, f64::max)
                    .max(1e-8);
            let mut ar = a;
            for i in 0..n {
                ar[i * n + i] += ridge;
            }
            gaussian_solve(ar, b, n).ok_or(ShapError::SingularSystem)?
        }
    };
    let mut phi = head;
    phi.push(delta - phi.iter().sum::<f64>());
    Ok(phi)
}

// ── KernelSHAP ─────────────────────────────────────────────────────────

/// Kernel regression fit over one value function.
#[derive(Debug, Clone)]
pub struct ShapleyFit {
    pub phi: Vec<f64>,
    /// value of the all-masked coalition
    pub base: f64,
    /// value of the all-visible coalition
    pub full: f64,
    /// coalitions evaluated, endpoints included
    pub evaluated: usize,
    pub exhaustive: bool,
}

impl ShapleyFit {
    /// Σφ − (full − base); zero up to float accumulation by construction.
    pub fn efficiency_gap(&self) -> f64 {
        self.phi.iter().sum::<f64>() - (self.full - self.base)
    }
}

/// Shapley-kernel attribution of `value` over M players. Enumerates all
/// 2^M coalitions when they fit the budget, otherwise samples; the empty
/// and full coalitions are always evaluated and enforced exactly.
pub fn kernel_shap(
    value: &mut dyn FnMut(&[bool]) -> Result<f64, ShapError>,
    m: usize,
    budget: usize,
    seed: u64,
) -> Result<ShapleyFit, ShapError> {
    if m == 0 {
        return Err(ShapError::TooManySegments { m: 0, max: 0 });
    }
    let exhaustive = m < 63 && (1u64 << m) <= budget as u64;
    let v_empty = value(&vec![false; m])?;
    let v_full = value(&vec![true; m])?;
    let delta = v_full - v_empty;
    if m == 1 {
        return Ok(ShapleyFit {
            phi: vec![delta],
            base: v_empty,
            full: v_full,
            evaluated: 2,
            exhaustive: true,
        });
    }

    let coalitions: Vec<Vec<bool>> = if exhaustive {
        let mut all = Vec::with_capacity((1usize << m) - 2);
        for mask in 1..(1u64 << m) - 1 {
            all.push((0..m).map(|i| mask >> i & 1 == 1).collect());
        }
        all
    } else {
        if budget < m + 2 {
            return Err(ShapError::BudgetTooSmall {
                budget,
                segments: m,
                need: m + 2,
            });
        }
        choose_coalitions(m, budget - 2, seed)
    };

    let mut values = Vec::with_capacity(coalitions.len());
    let mut weights = Vec::with_capacity(coalitions.len());
    for z in &coalitions {
        values.push(value(z)?);
        let s = z.iter().filter(|&&b| b).count();
        match shapley_kernel_weight(m, s) {
            KernelWeight::Weight(w) => weights.push(w),
            KernelWeight::Constraint => unreachable!("interior coalitions only"),
        }
    }

    let phi = solve_constrained(&coalitions, &values, &weights, m, v_empty, delta)?;
    Ok(ShapleyFit {
        phi,
        base: v_empty,
        full: v_full,
        evaluated: coalitions.len() + 2,
        exhaustive,
    })
}

// ── Exact oracle ───────────────────────────────────────────────────────

pub const EXACT_SHAPLEY_MAX: usize = 12;

/// φ_i = Σ_{S ∌ i} |S|!(M−|S|−1)!/M! · (v(S ∪ {i}) − v(S)), by full
/// enumeration of the 2^M coalition values.
pub fn exact_shapley(
    value: &mut dyn FnMut(&[bool]) -> Result<f64, ShapError>,
    m: usize,
) -> Result<Vec<f64>, ShapError> {
    if m == 0 || m > EXACT_SHAPLEY_MAX {
        return Err(ShapError::TooManySegments {
            m,
            max: EXACT_SHAPLEY_MAX,
        });
    }
    let table: Result<Vec<f64>, ShapError> = (0..1u32 << m)
        .map(|mask| value(&(0..m).map(|i| mask >> i & 1 == 1).collect::<Vec<_>>()))
        .collect();
    let table = table?;
    let mut fact = [1.0f64; EXACT_SHAPLEY_MAX + 1];
    for i in 1..=m {
        fact[i] = fact[i - 1] * i as f64;
    }
    let mut phi = vec![0.0f64; m];
    for (i, phi_i) in phi.iter_mut().enumerate() {
        for mask in 0..1u32 << m {
            if mask >> i & 1 == 1 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let weight = fact[s] * fact[m - s - 1] / fact[m];
            *phi_i += weight * (table[(mask | 1 << i) as usize] - table[mask as usize]);
        }
    }
    Ok(phi)
}

// ── Image attribution ──────────────────────────────────────────────────

/// Per-segment Shapley values of one model output on one image.
#[derive(Debug, Clone)]
pub struct AttributionMap {
    pub phi: Vec<f64>,
    /// target-class probability on the all-masked image
    pub base: f64,
    /// target-class probability on the intact image
    pub full: f64,
    pub target: usize,
    pub evaluated: usize,
    pub exhaustive: bool,
}

impl AttributionMap {
    pub fn efficiency_gap(&self) -> f64 {
        self.phi.iter().sum::<f64>() - (self.full - self.base)
    }
}

/// Explains a classifier's target-class probability on a [3, h, w]
/// unit-scale image by masking grid segments against a background.
pub fn explain_image<E: Element, C: Classifier<E>>(
    classifier: &C,
    image: &Tensor<f32>,
    seg: &Segmentation,
    background: &Background,
    target: usize,
    budget: usize,
    seed: u64,
) -> Result<AttributionMap, ShapError> {
    let classes = classifier.classes();
    if target >= classes {
        return Err(ShapError::TargetOutOfRange { target, classes });
    }
    let (h, w) = seg.extent();
    let mut value = |z: &[bool]| -> Result<f64, ShapError> {
        let masked = apply_coalition(image, seg, z, background)?;
        let unit: Tensor<E> = normalize(&masked)?;
        let input = Tensor::new(vec![1, 3, h, w], unit.data().to_vec())?;
        let probs = classifier.predict_probs(&input)?;
        Ok(probs.data()[target].to_f64())
    };
    let fit = kernel_shap(&mut value, seg.segments(), budget, seed)?;
    Ok(AttributionMap {
        phi: fit.phi,
        base: fit.base,
        full: fit.full,
        target,
        evaluated: fit.evaluated,
        exhaustive: fit.exhaustive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    // ── segmentation ───────────────────────────────────────────────

    #[test]
    fn degenerate_grid_is_one_segment() {
        let seg = Segmentation::grid(16, 16, 1).unwrap();
        assert_eq!(seg.segments(), 1);
        assert!((0..16).all(|y| (0..16).all(|x| seg.segment_of(y, x) == 0)));
    }

    #[test]
    fn grid_partitions_into_equal_cells() {
        let seg = Segmentation::grid(16, 16, 4).unwrap();
        assert_eq!(seg.segments(), 16);
        let mut counts = vec![0usize; 16];
        for y in 0..16 {
            for x in 0..16 {
                counts[seg.segment_of(y, x)] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c == 16));
        // row-major cell layout
        assert_eq!(seg.segment_of(0, 0), 0);
        assert_eq!(seg.segment_of(0, 15), 3);
        assert_eq!(seg.segment_of(15, 0), 12);
    }

    #[test]
    fn non_divisor_grid_is_rejected() {
        assert!(matches!(
            Segmentation::grid(16, 16, 3),
            Err(ShapError::BadGrid { grid: 3, extent: 16 })
        ));
        assert!(Segmentation::grid(16, 16, 0).is_err());
    }

    // ── coalitions ─────────────────────────────────────────────────

    fn ramp_image(h: usize, w: usize) -> Tensor<f32> {
        let data: Vec<f32> = (0..3 * h * w).map(|i| i as f32 / (3 * h * w) as f32).collect();
        Tensor::new(vec![3, h, w], data).unwrap()
    }

    #[test]
    fn full_coalition_is_identity_and_empty_is_background() {
        let img = ramp_image(8, 8);
        let seg = Segmentation::grid(8, 8, 2).unwrap();
        let bg = Background::Constant(0.25);
        let full = apply_coalition(&img, &seg, &[true; 4], &bg).unwrap();
        assert_eq!(full, img);
        let empty = apply_coalition(&img, &seg, &[false; 4], &bg).unwrap();
        assert!(empty.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn complementary_coalitions_tile_the_image() {
        let img = ramp_image(8, 8);
        let bg_img = {
            let data = vec![0.9f32; 3 * 64];
            Tensor::new(vec![3, 8, 8], data).unwrap()
        };
        let seg = Segmentation::grid(8, 8, 2).unwrap();
        let z = [true, false, false, true];
        let zc: Vec<bool> = z.iter().map(|&b| !b).collect();
        let a = apply_coalition(&img, &seg, &z, &Background::Image(bg_img.clone())).unwrap();
        let b = apply_coalition(&img, &seg, &zc, &Background::Image(bg_img.clone())).unwrap();
        for i in 0..a.data().len() {
            let (orig, back) = (img.data()[i], bg_img.data()[i]);
            assert!(
                (a.data()[i] == orig && b.data()[i] == back)
                    || (a.data()[i] == back && b.data()[i] == orig)
            );
        }
    }

    #[test]
    fn coalition_shape_errors() {
        let img = ramp_image(8, 8);
        let seg = Segmentation::grid(8, 8, 2).unwrap();
        assert!(matches!(
            apply_coalition(&img, &seg, &[true; 3], &Background::Constant(0.0)),
            Err(ShapError::CoalitionLength { got: 3, want: 4 })
        ));
        let small_bg = Background::Image(ramp_image(4, 4));
        assert!(matches!(
            apply_coalition(&img, &seg, &[true; 4], &small_bg),
            Err(ShapError::Shape(_))
        ));
    }

    // ── kernel weights ─────────────────────────────────────────────

    #[test]
    fn kernel_weight_matches_formula() {
        assert_eq!(shapley_kernel_weight(4, 1), KernelWeight::Weight(0.25));
        assert_eq!(shapley_kernel_weight(4, 2), KernelWeight::Weight(0.125));
        assert_eq!(shapley_kernel_weight(4, 3), shapley_kernel_weight(4, 1));
        assert_eq!(shapley_kernel_weight(4, 0), KernelWeight::Constraint);
        assert_eq!(shapley_kernel_weight(4, 4), KernelWeight::Constraint);
    }

    // ── kernel_shap on analytic games ──────────────────────────────

    fn table_game(table: Vec<f64>) -> impl FnMut(&[bool]) -> Result<f64, ShapError> {
        move |z: &[bool]| {
            let mask: usize = z
                .iter()
                .enumerate()
                .map(|(i, &b)| if b { 1 << i } else { 0 })
                .sum();
            Ok(table[mask])
        }
    }

    #[test]
    fn constant_game_attributes_nothing() {
        let mut f = |_: &[bool]| Ok(0.5);
        let fit = kernel_shap(&mut f, 5, 64, 0).unwrap();
        assert!(fit.exhaustive);
        assert!(fit.phi.iter().all(|&p| p.abs() < 1e-12));
        assert_eq!(fit.efficiency_gap(), 0.0);
    }

    #[test]
    fn additive_game_recovers_its_coefficients() {
        let a = [0.3, -0.1, 0.7, 0.2, -0.5];
        let mut f = |z: &[bool]| {
            Ok(z.iter()
                .zip(a)
                .map(|(&b, ai)| if b { ai } else { 0.0 })
                .sum())
        };
        let fit = kernel_shap(&mut f, 5, 32, 0).unwrap();
        assert!(fit.exhaustive);
        for (got, want) in fit.phi.iter().zip(a) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn single_segment_gets_the_whole_delta() {
        let mut f = |z: &[bool]| Ok(if z[0] { 0.8 } else { 0.1 });
        let fit = kernel_shap(&mut f, 1, 4, 0).unwrap();
        assert_eq!(fit.phi.len(), 1);
        assert!((fit.phi[0] - 0.7).abs() < 1e-12);
        assert_eq!(fit.evaluated, 2);
    }

    #[test]
    fn exhaustive_fit_matches_the_enumeration_oracle() {
        for seed in 0..50u64 {
            let mut rng = rng::rng(seed, &[99]);
            let table: Vec<f64> = (0..256).map(|_| rng.gen::<f64>()).collect();
            let fit = kernel_shap(&mut table_game(table.clone()), 8, 256, seed).unwrap();
            assert!(fit.exhaustive);
            let oracle = exact_shapley(&mut table_game(table), 8).unwrap();
            for (a, b) in fit.phi.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-6, "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn sampled_mode_is_deterministic_and_efficient() {
        let mut rng = rng::rng(7, &[98]);
        let weights: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() - 0.3).collect();
        let mut game = |z: &[bool]| {
            let s: f64 = z.iter().zip(&weights).map(|(&b, w)| if b { *w } else { 0.0 }).sum();
            Ok(1.0 / (1.0 + (-s).exp()))
        };
        // 2^12 = 4096 > budget, so this samples
        let fit = kernel_shap(&mut game, 12, 48, 3).unwrap();
        assert!(!fit.exhaustive);
        assert_eq!(fit.evaluated, 48);
        assert!(fit.efficiency_gap().abs() < 1e-12);
        let again = kernel_shap(&mut game, 12, 48, 3).unwrap();
        assert_eq!(fit.phi, again.phi);
    }

    #[test]
    fn sampled_budget_must_cover_the_unknowns() {
        let mut f = |_: &[bool]| Ok(0.0);
        assert!(matches!(
            kernel_shap(&mut f, 10, 11, 0),
            Err(ShapError::BudgetTooSmall { need: 12, .. })
        ));
    }

    #[test]
    fn symmetric_players_get_equal_credit() {
        // v = 1 when segment 0 or 1 is present; 0 and 1 are interchangeable
        let mut f = |z: &[bool]| Ok(if z[0] || z[1] { 1.0 } else { 0.0 });
        let fit = kernel_shap(&mut f, 4, 16, 0).unwrap();
        assert!((fit.phi[0] - fit.phi[1]).abs() < 1e-9);
        assert!((fit.phi[2]).abs() < 1e-9); // dummy
        assert!((fit.phi[3]).abs() < 1e-9);
    }

    #[test]
    fn coalition_sampler_respects_budget_and_dedups() {
        let rows = choose_coalitions(10, 30, 5);
        assert_eq!(rows.len(), 30);
        let unique: HashSet<&Vec<bool>> = rows.iter().collect();
        assert_eq!(unique.len(), 30);
        // highest-weight sizes first: the 20 singleton/complement rows lead
        for z in &rows[..20] {
            let s = z.iter().filter(|&&b| b).count();
            assert!(s == 1 || s == 9);
        }
    }

    // ── exact oracle ───────────────────────────────────────────────

    #[test]
    fn cardinality_game_splits_evenly() {
        let mut f = |z: &[bool]| Ok(z.iter().filter(|&&b| b).count() as f64);
        let phi = exact_shapley(&mut f, 3).unwrap();
        for p in phi {
            assert!((p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_game_has_zero_oracle_values() {
        let mut f = |_: &[bool]| Ok(3.25);
        let phi = exact_shapley(&mut f, 6).unwrap();
        assert!(phi.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn oracle_rejects_oversized_games() {
        let mut f = |_: &[bool]| Ok(0.0);
        assert!(matches!(
            exact_shapley(&mut f, 13),
            Err(ShapError::TooManySegments { m: 13, max: 12 })
        ));
    }

    // ── solver edge cases ──────────────────────────────────────────

    #[test]
    fn gaussian_solver_flags_singular_systems() {
        // unique solution
        let x = gaussian_solve(vec![2.0, 1.0, 1.0, 3.0], vec![5.0, 10.0], 2).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 3.0).abs() < 1e-12);
        // rank-deficient
        assert!(gaussian_solve(vec![1.0, 1.0, 1.0, 1.0], vec![2.0, 2.0], 2).is_none());
    }

    // ── image plumbing ─────────────────────────────────────────────

    #[test]
    fn explain_image_wires_the_model_through() {
        use crate::nn::{ArchitectureSpec, Model};
        let model = Model::<f64>::new(ArchitectureSpec::custom_cnn_for((8, 8), 2, 4).unwrap(), 11).unwrap();
        let img = ramp_image(8, 8);
        let seg = Segmentation::grid(8, 8, 2).unwrap();
        let attr = explain_image(
            &model,
            &img,
            &seg,
            &Background::Constant(0.5),
            1,
            32,
            9,
        )
        .unwrap();
        assert_eq!(attr.phi.len(), 4);
        assert!(attr.exhaustive);
        assert_eq!(attr.evaluated, 16);
        assert!(attr.efficiency_gap().abs() < 1e-12);
        assert!(attr.base > 0.0 && attr.base < 1.0);
        let again = explain_image(&model, &img, &seg, &Background::Constant(0.5), 1, 32, 9)
            .unwrap();
        assert_eq!(attr.phi, again.phi);
    }

    #[test]
    fn explain_image_rejects_bad_targets() {
        use crate::nn::{ArchitectureSpec, Model};
        let model = Model::<f64>::new(ArchitectureSpec::custom_cnn_for((8, 8), 2, 4).unwrap(), 11).unwrap();
        let err = explain_image(
            &model,
            &ramp_image(8, 8),
            &Segmentation::grid(8, 8, 2).unwrap(),
            &Background::Constant(0.0),
            2,
            32,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, ShapError::TargetOutOfRange { target: 2, classes: 2 }));
    }
}
