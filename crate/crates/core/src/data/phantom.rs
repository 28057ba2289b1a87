use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Case;
use crate::error::{Error, Result};

/// Tissue classes of the phantom, in intensity-table column order.
const BACKGROUND: usize = 0;
const BRAIN: usize = 1;
const EDEMA: usize = 2;
const NECROSIS: usize = 3;
const ENHANCING: usize = 4;

/// Geometry and appearance of a synthetic case. Tumor sub-regions are
/// concentric shells of one ellipsoid, so ET ⊆ TC ⊆ WT holds by
/// construction.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    /// Brain semi-axes as fractions of the volume edge.
    pub brain_axes: [f64; 3],
    /// Range of tumor semi-axes as fractions of the volume edge.
    pub tumor_axes: (f64, f64),
    /// Normalized radius bounding the enhancing core.
    pub et_radius: f64,
    /// Normalized radius bounding the tumor core (enhancing + necrotic).
    pub tc_radius: f64,
    /// Mean intensity per modality (T1, T1ce, T2, FLAIR) and tissue
    /// (background, brain, edema, necrosis, enhancing).
    pub intensities: [[f32; 5]; 4],
    /// Noise standard deviation as a fraction of each modality's contrast
    /// range.
    pub noise: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            brain_axes: [0.42, 0.38, 0.34],
            tumor_axes: (0.17, 0.23),
            et_radius: 0.45,
            tc_radius: 0.7,
            intensities: [
                [0.0, 0.6, 0.5, 0.3, 0.55],
                [0.0, 0.6, 0.55, 0.3, 1.0],
                [0.0, 0.4, 0.9, 1.0, 0.7],
                [0.0, 0.4, 1.0, 0.6, 0.8],
            ],
            noise: 0.1,
        }
    }
}

impl PhantomSpec {
    pub fn generate(&self, seed: u64, size: usize) -> Result<Case> {
        if size < 16 {
            return Err(Error::config(format!("phantom size must be at least 16, got {size}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = size as f64;
        let mid = (s - 1.0) / 2.0;
        let brain = self.brain_axes.map(|a| a * s);
        let axes = [0; 3].map(|_| rng.random_range(self.tumor_axes.0..=self.tumor_axes.1) * s);
        let center = [0, 1, 2].map(|i| {
            let room = (brain[i] - axes[i]).max(0.0) * 0.5;
            mid + rng.random_range(-1.0..=1.0) * room
        });

        let dims = (size, size, size);
        let mut tissue = Array3::<u8>::zeros(dims);
        for ((z, y, x), t) in tissue.indexed_iter_mut() {
            let p = [z as f64, y as f64, x as f64];
            let rb = radius(p, [mid; 3], brain);
            if rb > 1.0 {
                continue;
            }
            let rt = radius(p, center, axes);
            *t = if rt <= self.et_radius {
                ENHANCING
            } else if rt <= self.tc_radius {
                NECROSIS
            } else if rt <= 1.0 {
                EDEMA
            } else {
                BRAIN
            } as u8;
        }

        let mut modalities = Vec::with_capacity(4);
        for table in &self.intensities {
            let lo = table.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = table.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let noise = Normal::new(0.0, self.noise * f64::from(hi - lo)).expect("finite sigma");
            let vol = tissue.mapv(|t| {
                let t = usize::from(t);
                if t == BACKGROUND {
                    0.0
                } else {
                    table[t] + noise.sample(&mut rng) as f32
                }
            });
            modalities.push(vol);
        }

        let labels = tissue.mapv(|t| match usize::from(t) {
            EDEMA => 2,
            NECROSIS => 1,
            ENHANCING => 4,
            _ => 0,
        });
        Case::new(format!("phantom_{seed}"), modalities, Some(labels), [1.0; 3])
    }
}

fn radius(p: [f64; 3], c: [f64; 3], axes: [f64; 3]) -> f64 {
    (0..3)
        .map(|i| ((p[i] - c[i]) / axes[i]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Deterministic brain-like phantom of edge `size` with the default
/// [`PhantomSpec`].
pub fn synth_phantom(seed: u64, size: usize) -> Result<Case> {
    PhantomSpec::default().generate(seed, size)
}
