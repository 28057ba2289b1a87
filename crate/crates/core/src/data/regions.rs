use ndarray::{Array3, Array4, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Valid BraTS label values: background, necrotic/non-enhancing core,
/// edema, enhancing tumor.
pub const LABELS: [u8; 4] = [0, 1, 2, 4];
pub const REGION_NAMES: [&str; 3] = ["WT", "TC", "ET"];

pub(crate) fn check_labels(labels: &Array3<u8>) -> Result<()> {
    if let Some(((z, y, x), v)) = labels.indexed_iter().find(|(_, v)| !LABELS.contains(v)) {
        return Err(Error::validation(format!(
            "unexpected label {v} at voxel ({z}, {y}, {x})"
        )));
    }
    Ok(())
}

/// Binary WT/TC/ET channels, `(3, D, H, W)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    pub channels: Array4<u8>,
}

impl RegionMask {
    pub fn new(channels: Array4<u8>) -> Result<Self> {
        if channels.dim().0 != 3 {
            return Err(Error::shape("region mask needs exactly 3 channels"));
        }
        if channels.iter().any(|&v| v > 1) {
            return Err(Error::validation("region mask must be binary"));
        }
        Ok(RegionMask { channels })
    }

    pub fn region(&self, r: usize) -> ArrayView3<'_, u8> {
        self.channels.index_axis(Axis(0), r)
    }

    pub fn wt(&self) -> ArrayView3<'_, u8> {
        self.region(0)
    }

    pub fn tc(&self) -> ArrayView3<'_, u8> {
        self.region(1)
    }

    pub fn et(&self) -> ArrayView3<'_, u8> {
        self.region(2)
    }

    /// ET ⊆ TC ⊆ WT at every voxel.
    pub fn is_nested(&self) -> bool {
        self.et().iter().zip(self.tc().iter()).all(|(&e, &t)| e <= t)
            && self.tc().iter().zip(self.wt().iter()).all(|(&t, &w)| t <= w)
    }

    pub fn counts(&self) -> [usize; 3] {
        [0, 1, 2].map(|r| self.region(r).iter().filter(|&&v| v == 1).count())
    }

    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        let (c, d, h, w) = self.channels.dim();
        let data = self
            .channels
            .iter()
            .map(|&v| if v == 1 { F::one() } else { F::zero() })
            .collect();
        Tensor::from_vec(&[c, d, h, w], data).expect("dims match")
    }
}

/// WT = {1, 2, 4}, TC = {1, 4}, ET = {4}.
pub fn encode_regions(labels: &Array3<u8>) -> Result<RegionMask> {
    check_labels(labels)?;
    let (d, h, w) = labels.dim();
    let mut channels = Array4::<u8>::zeros((3, d, h, w));
    for ((z, y, x), &v) in labels.indexed_iter() {
        let (wt, tc, et) = match v {
            1 => (1, 1, 0),
            2 => (1, 0, 0),
            4 => (1, 1, 1),
            _ => (0, 0, 0),
        };
        channels[[0, z, y, x]] = wt;
        channels[[1, z, y, x]] = tc;
        channels[[2, z, y, x]] = et;
    }
    Ok(RegionMask { channels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: u8) -> [u8; 3] {
        let m = encode_regions(&Array3::from_elem((1, 1, 1), v)).unwrap();
        [0, 1, 2].map(|r| m.channels[[r, 0, 0, 0]])
    }

    #[test]
    fn label_composition() {
        assert_eq!(single(4), [1, 1, 1]);
        assert_eq!(single(2), [1, 0, 0]);
        assert_eq!(single(1), [1, 1, 0]);
        assert_eq!(single(0), [0, 0, 0]);
    }

    #[test]
    fn rejects_unknown_labels() {
        let l = Array3::from_elem((2, 2, 2), 3u8);
        assert!(matches!(encode_regions(&l), Err(Error::Validation(_))));
    }
}
