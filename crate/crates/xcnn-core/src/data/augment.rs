//! Stochastic training-time augmentation.
//!
//! One call = one sample: rotation by an angle drawn uniformly from
//! [-rotation_degrees, +rotation_degrees] (bilinear, replicated borders),
//! center crop to `crop_fraction` resized back to the input extents, then a
//! horizontal flip with probability `flip_probability`. All randomness comes
//! from the per-call seed, so a (sample, seed) pair always produces the same
//! output.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

use super::image::{center_crop_resize, hflip, rotate_about_center};

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    /// Maximum absolute rotation in degrees; 0 disables rotation.
    pub rotation_degrees: f64,
    /// Kept fraction of each extent for the center crop; 1.0 disables it.
    pub crop_fraction: f64,
    /// Probability of a left-right mirror; 0 disables it.
    pub flip_probability: f64,
}

impl AugmentationPolicy {
    /// No-op policy: `augment` returns the input bit-for-bit.
    pub fn null() -> Self {
        AugmentationPolicy {
            rotation_degrees: 0.0,
            crop_fraction: 1.0,
            flip_probability: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=180.0).contains(&self.rotation_degrees) {
            return Err(format!(
                "rotation range {} outside [0, 180]",
                self.rotation_degrees
            ));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(format!(
                "crop fraction {} outside (0, 1]",
                self.crop_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(format!(
                "flip probability {} outside [0, 1]",
                self.flip_probability
            ));
        }
        Ok(())
    }
}

impl Default for AugmentationPolicy {
    /// Rotation within ±15°, 0.9 center crop, fair-coin flip.
    fn default() -> Self {
        AugmentationPolicy {
            rotation_degrees: 15.0,
            crop_fraction: 0.9,
            flip_probability: 0.5,
        }
    }
}

/// Applies the policy to one CxHxW [0,1] image. The angle is drawn first
/// and the flip coin second, whether or not either op ends up applied, so
/// the random stream does not depend on the policy's active set.
pub fn augment(image: &Tensor<f32>, policy: &AugmentationPolicy, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = (rng.gen::<f64>() * 2.0 - 1.0) * policy.rotation_degrees;
    let flip = rng.gen::<f64>() < policy.flip_probability;

    let mut out = if policy.rotation_degrees > 0.0 {
        rotate_about_center(image, angle)
    } else {
        image.clone()
    };
    if policy.crop_fraction < 1.0 {
        out = center_crop_resize(&out, policy.crop_fraction);
    }
    if flip {
        out = hflip(&out);
    }
    if out.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        let clipped: Vec<f32> = out.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        out = Tensor::new(out.shape().to_vec(), clipped).expect("augment shape");
    }
    out
}
