//! Multi-modality cases: NIfTI I/O, normalization, region encoding,
//! patch sampling, augmentation and synthetic phantoms.

mod io;
mod phantom;
mod regions;
mod transforms;

pub use io::{list_cases, load_case, load_label_map, write_case, write_label_map, write_probabilities, MODALITIES};
pub use phantom::{synth_phantom, PhantomSpec};
pub use regions::{encode_regions, RegionMask, LABELS, REGION_NAMES};
pub use transforms::{augment, crop_patch, normalize, normalize_case, sample_origin, sample_patch, AugmentParams};

use ndarray::{Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// One subject: four co-registered modality volumes (T1, T1ce, T2, FLAIR),
/// an optional BraTS label map and voxel spacing in millimeters.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub modalities: Vec<Array3<f32>>,
    pub labels: Option<Array3<u8>>,
    pub spacing: [f64; 3],
}

impl Case {
    pub fn new(
        id: impl Into<String>,
        modalities: Vec<Array3<f32>>,
        labels: Option<Array3<u8>>,
        spacing: [f64; 3],
    ) -> Result<Self> {
        let case = Case {
            id: id.into(),
            modalities,
            labels,
            spacing,
        };
        case.validate()?;
        Ok(case)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.len() != MODALITIES.len() {
            return Err(Error::validation(format!(
                "case {} has {} modalities, expected {}",
                self.id,
                self.modalities.len(),
                MODALITIES.len()
            )));
        }
        let dims = self.modalities[0].dim();
        if let Some(i) = self.modalities.iter().position(|m| m.dim() != dims) {
            return Err(Error::validation(format!(
                "case {}: modality {} has shape {:?}, expected {:?}",
                self.id,
                MODALITIES[i],
                self.modalities[i].dim(),
                dims
            )));
        }
        if let Some(l) = &self.labels {
            if l.dim() != dims {
                return Err(Error::validation(format!(
                    "case {}: labels shape {:?} differs from {:?}",
                    self.id,
                    l.dim(),
                    dims
                )));
            }
            regions::check_labels(l)?;
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        let (d, h, w) = self.modalities[0].dim();
        [d, h, w]
    }

    /// Modalities stacked channel-first.
    pub fn image(&self) -> Array4<f32> {
        let views: Vec<_> = self.modalities.iter().map(|m| m.view()).collect();
        ndarray::stack(Axis(0), &views).expect("modalities share one shape")
    }

    pub fn image_tensor<F: Real>(&self) -> Tensor<F> {
        array4_to_tensor(&self.image())
    }

    pub fn region_mask(&self) -> Result<Option<RegionMask>> {
        self.labels.as_ref().map(encode_regions).transpose()
    }

    /// Bounding box `[start, end)` per axis of voxels that are nonzero in
    /// any modality; the whole volume when every voxel is zero.
    pub fn foreground_bounds(&self) -> [(usize, usize); 3] {
        let dims = self.dims();
        let mut lo = dims;
        let mut hi = [0usize; 3];
        for m in &self.modalities {
            for ((z, y, x), &v) in m.indexed_iter() {
                if v != 0.0 {
                    for (a, i) in [z, y, x].into_iter().enumerate() {
                        lo[a] = lo[a].min(i);
                        hi[a] = hi[a].max(i + 1);
                    }
                }
            }
        }
        if hi.iter().any(|&h| h == 0) {
            return [(0, dims[0]), (0, dims[1]), (0, dims[2])];
        }
        [(lo[0], hi[0]), (lo[1], hi[1]), (lo[2], hi[2])]
    }
}

pub fn array4_to_tensor<F: Real, T: Copy + Into<f64>>(a: &Array4<T>) -> Tensor<F> {
    let (c, d, h, w) = a.dim();
    let data = a.iter().map(|&v| F::from_f64_lossy(v.into())).collect();
    Tensor::from_vec(&[c, d, h, w], data).expect("dims match")
}

pub fn tensor_to_array4(t: &Tensor<f32>) -> Result<Array4<f32>> {
    let [c, d, h, w] = t.dims4()?;
    Array4::from_shape_vec((c, d, h, w), t.data().to_vec()).map_err(|e| Error::shape(e.to_string()))
}
