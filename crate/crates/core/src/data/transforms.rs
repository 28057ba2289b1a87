use ndarray::{s, Array3, Array4, Axis};
use rand::Rng;

use super::{Case, RegionMask};
use crate::error::{Error, Result};

/// Whole-image z-score. A constant volume maps to zeros.
pub fn normalize(volume: &Array3<f32>) -> Array3<f32> {
    let n = volume.len().max(1) as f64;
    let mean = volume.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = volume
        .iter()
        .map(|&v| (f64::from(v) - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        return Array3::zeros(volume.dim());
    }
    volume.mapv(|v| ((f64::from(v) - mean) / std) as f32)
}

pub fn normalize_case(case: &Case) -> Case {
    Case {
        modalities: case.modalities.iter().map(normalize).collect(),
        ..case.clone()
    }
}

/// Uniform patch origin over all positions that keep a cube of edge `size`
/// inside `dims`.
pub fn sample_origin<R: Rng + ?Sized>(dims: [usize; 3], size: usize, rng: &mut R) -> Result<[usize; 3]> {
    if size == 0 || dims.iter().any(|&d| size > d) {
        return Err(Error::shape(format!(
            "patch size {size} does not fit volume {dims:?}"
        )));
    }
    Ok(dims.map(|d| rng.random_range(0..=d - size)))
}

/// Crops a `(4, s, s, s)` image patch and the matching region mask.
pub fn crop_patch(case: &Case, origin: [usize; 3], size: usize) -> Result<(Array4<f32>, RegionMask)> {
    let dims = case.dims();
    if (0..3).any(|a| origin[a] + size > dims[a]) {
        return Err(Error::shape(format!(
            "patch at {origin:?} of size {size} exceeds volume {dims:?}"
        )));
    }
    let labels = case
        .labels
        .as_ref()
        .ok_or_else(|| Error::validation(format!("case {} has no labels", case.id)))?;
    let [z, y, x] = origin;
    let window = s![z..z + size, y..y + size, x..x + size];
    let views: Vec<_> = case.modalities.iter().map(|m| m.slice(window)).collect();
    let image = ndarray::stack(Axis(0), &views).expect("equal patch shapes");
    let mask = super::encode_regions(&labels.slice(window).to_owned())?;
    Ok((image, mask))
}

pub fn sample_patch<R: Rng + ?Sized>(case: &Case, size: usize, rng: &mut R) -> Result<(Array4<f32>, RegionMask)> {
    let origin = sample_origin(case.dims(), size, rng)?;
    crop_patch(case, origin, size)
}

/// One draw of the training-time augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    /// Flip along (D, H, W).
    pub flips: [bool; 3],
    /// Per-channel intensity factor.
    pub factors: Vec<f32>,
}

impl AugmentParams {
    pub fn identity(channels: usize) -> Self {
        AugmentParams {
            flips: [false; 3],
            factors: vec![1.0; channels],
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, channels: usize) -> Self {
        let flips = [0; 3].map(|_| rng.random_bool(0.5));
        let factors = (0..channels).map(|_| rng.random_range(0.9f32..=1.1)).collect();
        AugmentParams { flips, factors }
    }

    pub fn apply(&self, image: &Array4<f32>, mask: &RegionMask) -> (Array4<f32>, RegionMask) {
        let mut img = image.view();
        let mut ch = mask.channels.view();
        for (a, &f) in self.flips.iter().enumerate() {
            if f {
                img.invert_axis(Axis(a + 1));
                ch.invert_axis(Axis(a + 1));
            }
        }
        let mut img = img.as_standard_layout().into_owned();
        for (c, &k) in self.factors.iter().enumerate() {
            if k != 1.0 {
                img.index_axis_mut(Axis(0), c).mapv_inplace(|v| v * k);
            }
        }
        let channels = ch.as_standard_layout().into_owned();
        (img, RegionMask { channels })
    }
}

/// Random axis flips (p = 0.5 each, image and mask together) and
/// per-channel intensity scaling by a factor in [0.9, 1.1].
pub fn augment<R: Rng + ?Sized>(image: &Array4<f32>, mask: &RegionMask, rng: &mut R) -> (Array4<f32>, RegionMask) {
    AugmentParams::sample(rng, image.dim().0).apply(image, mask)
}
