//! Whole-volume prediction: window planning around the brain, overlap
//! averaging, checkpoint ensembles and decoding to BraTS labels.

use ndarray::Array3;

use crate::data::{normalize_case, Case};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::network::{Model, SegmentationNet};
use crate::tensor::Tensor;

/// Default probability threshold for every region.
pub const THRESHOLD: f32 = 0.5;

/// Patch origins tiling a region of interest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPlan {
    pub origins: Vec<[usize; 3]>,
    pub patch_size: usize,
    pub volume: [usize; 3],
    /// `[start, end)` per axis.
    pub region: [(usize, usize); 3],
}

impl WindowPlan {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Number of windows covering each voxel, in row-major order.
    pub fn coverage(&self) -> Vec<u32> {
        let [d, h, w] = self.volume;
        let p = self.patch_size;
        let mut cover = vec![0u32; d * h * w];
        for o in &self.origins {
            for z in o[0]..o[0] + p {
                for y in o[1]..o[1] + p {
                    let row = (z * h + y) * w;
                    for c in &mut cover[row + o[2]..row + o[2] + p] {
                        *c += 1;
                    }
                }
            }
        }
        cover
    }
}

fn axis_starts(lo: usize, hi: usize, dim: usize, patch: usize) -> Vec<usize> {
    let extent = hi - lo;
    if extent <= patch {
        let centered = (lo + hi) as isize - patch as isize;
        return vec![centered.div_euclid(2).clamp(0, (dim - patch) as isize) as usize];
    }
    let n = extent.div_ceil(patch);
    let span = (extent - patch) as f64;
    (0..n)
        .map(|i| lo + (span * i as f64 / (n - 1) as f64).round() as usize)
        .collect()
}

/// Per axis: a single centered window when the region fits in one patch,
/// otherwise `ceil(extent / patch)` evenly spaced windows spanning it.
pub fn plan_windows(region: [(usize, usize); 3], volume: [usize; 3], patch_size: usize) -> Result<WindowPlan> {
    if patch_size == 0 || volume.iter().any(|&d| patch_size > d) {
        return Err(Error::shape(format!(
            "patch size {patch_size} exceeds volume {volume:?}"
        )));
    }
    if (0..3).any(|a| region[a].0 > region[a].1 || region[a].1 > volume[a]) {
        return Err(Error::shape(format!(
            "region {region:?} is not inside volume {volume:?}"
        )));
    }
    let starts: Vec<Vec<usize>> = (0..3)
        .map(|a| axis_starts(region[a].0, region[a].1, volume[a], patch_size))
        .collect();
    let mut origins = Vec::new();
    for &z in &starts[0] {
        for &y in &starts[1] {
            for &x in &starts[2] {
                origins.push([z, y, x]);
            }
        }
    }
    Ok(WindowPlan {
        origins,
        patch_size,
        volume,
        region,
    })
}

/// Anything that maps a `(C, s, s, s)` patch to `(3, s, s, s)`
/// probabilities.
pub trait PatchPredictor: Sync {
    fn patch_size(&self) -> usize;
    fn predict(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl<N: SegmentationNet> PatchPredictor for Model<N, f32> {
    fn patch_size(&self) -> usize {
        self.config().patch_size
    }

    fn predict(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.forward(patch)?.probabilities)
    }
}

impl<P: PatchPredictor + ?Sized> PatchPredictor for &P {
    fn patch_size(&self) -> usize {
        (**self).patch_size()
    }

    fn predict(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>> {
        (**self).predict(patch)
    }
}

/// Copies the cube of edge `size` at `origin` out of a `(C, D, H, W)` tensor.
pub fn extract_patch(image: &Tensor<f32>, origin: [usize; 3], size: usize) -> Result<Tensor<f32>> {
    let [c, d, h, w] = image.dims4()?;
    if (0..3).any(|a| origin[a] + size > [d, h, w][a]) {
        return Err(Error::shape(format!("window {origin:?}+{size} outside {:?}", [d, h, w])));
    }
    let mut out = Vec::with_capacity(c * size * size * size);
    let src = image.data();
    for ch in 0..c {
        for z in origin[0]..origin[0] + size {
            for y in origin[1]..origin[1] + size {
                let row = ((ch * d + z) * h + y) * w + origin[2];
                out.extend_from_slice(&src[row..row + size]);
            }
        }
    }
    Tensor::from_vec(&[c, size, size, size], out)
}

/// Averages window predictions over a normalized `(C, D, H, W)` image.
/// Voxels outside every window stay 0.
pub fn sliding_window<P: PatchPredictor>(
    exec: Exec,
    model: &P,
    image: &Tensor<f32>,
    plan: &WindowPlan,
) -> Result<Tensor<f32>> {
    let [_, d, h, w] = image.dims4()?;
    if [d, h, w] != plan.volume {
        return Err(Error::shape(format!(
            "plan volume {:?} does not match image {:?}",
            plan.volume,
            [d, h, w]
        )));
    }
    if model.patch_size() != plan.patch_size {
        return Err(Error::config(format!(
            "model patch size {} differs from plan {}",
            model.patch_size(),
            plan.patch_size
        )));
    }
    let p = plan.patch_size;
    let voxels = d * h * w;
    let mut sum: Vec<f64> = Vec::new();
    let mut out_channels = 0;
    let mut count = vec![0u32; voxels];
    for batch in plan.origins.chunks(exec.width()) {
        let preds = exec.map(batch, |&o| model.predict(&extract_patch(image, o, p)?));
        for (o, pred) in batch.iter().zip(preds) {
            let pred = pred?;
            let [k, pd, ph, pw] = pred.dims4()?;
            if [pd, ph, pw] != [p; 3] {
                return Err(Error::shape(format!("predictor returned {:?}", pred.shape())));
            }
            if sum.is_empty() {
                out_channels = k;
                sum = vec![0.0; k * voxels];
            } else if k != out_channels {
                return Err(Error::shape("predictor channel count changed between windows"));
            }
            let src = pred.data();
            for ch in 0..k {
                for z in 0..p {
                    for y in 0..p {
                        let dst = ((ch * d + o[0] + z) * h + o[1] + y) * w + o[2];
                        let s = ((ch * p + z) * p + y) * p;
                        for x in 0..p {
                            sum[dst + x] += f64::from(src[s + x]);
                        }
                        if ch == 0 {
                            let c0 = ((o[0] + z) * h + o[1] + y) * w + o[2];
                            for c in &mut count[c0..c0 + p] {
                                *c += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    if sum.is_empty() {
        return Err(Error::shape("window plan is empty"));
    }
    let mean = sum
        .iter()
        .enumerate()
        .map(|(i, &s)| match count[i % voxels] {
            0 => 0.0,
            c => (s / f64::from(c)) as f32,
        })
        .collect();
    Tensor::from_vec(&[out_channels, d, h, w], mean)
}

/// Region of interest taken from the raw intensities, then sliding-window
/// prediction on the z-scored case.
pub fn sliding_window_infer<P: PatchPredictor>(exec: Exec, model: &P, case: &Case) -> Result<Tensor<f32>> {
    let plan = plan_windows(case.foreground_bounds(), case.dims(), model.patch_size())?;
    let image = normalize_case(case).image_tensor();
    sliding_window(exec, model, &image, &plan)
}

/// Running voxelwise mean of probability volumes.
#[derive(Clone, Debug, Default)]
pub struct EnsembleMean {
    shape: Vec<usize>,
    sum: Vec<f64>,
    members: usize,
}

impl EnsembleMean {
    pub fn add(&mut self, probs: &Tensor<f32>) -> Result<()> {
        if self.members == 0 {
            self.shape = probs.shape().to_vec();
            self.sum = vec![0.0; probs.numel()];
        } else if probs.shape() != self.shape.as_slice() {
            return Err(Error::shape(format!(
                "ensemble member shape {:?} differs from {:?}",
                probs.shape(),
                self.shape
            )));
        }
        for (s, &v) in self.sum.iter_mut().zip(probs.data()) {
            *s += f64::from(v);
        }
        self.members += 1;
        Ok(())
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn finish(self) -> Result<Tensor<f32>> {
        if self.members == 0 {
            return Err(Error::validation("ensemble has no members"));
        }
        let n = self.members as f64;
        Tensor::from_vec(&self.shape, self.sum.iter().map(|&s| (s / n) as f32).collect())
    }
}

/// Mean of the members' sliding-window probabilities, before thresholding.
pub fn ensemble_infer<P: PatchPredictor>(exec: Exec, models: &[P], case: &Case) -> Result<Tensor<f32>> {
    if models.is_empty() {
        return Err(Error::validation("ensemble needs at least one model"));
    }
    let mut mean = EnsembleMean::default();
    for m in models {
        mean.add(&sliding_window_infer(exec, m, case)?)?;
    }
    mean.finish()
}

/// Thresholds WT/TC/ET probabilities and assembles a BraTS label map.
/// TC is intersected with WT and ET with TC first, so sub-regions predicted
/// outside their parent are dropped.
pub fn decode_labels(probs: &Tensor<f32>, threshold: f32) -> Result<Array3<u8>> {
    let [c, d, h, w] = probs.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("expected 3 region channels, got {c}")));
    }
    let (wt, tc, et) = (probs.channel(0), probs.channel(1), probs.channel(2));
    let labels = (0..d * h * w)
        .map(|i| {
            let w_ = wt[i] >= threshold;
            let t_ = w_ && tc[i] >= threshold;
            let e_ = t_ && et[i] >= threshold;
            match (w_, t_, e_) {
                (_, _, true) => 4,
                (_, true, false) => 1,
                (true, false, false) => 2,
                _ => 0,
            }
        })
        .collect();
    Ok(Array3::from_shape_vec((d, h, w), labels).expect("dims match"))
}
