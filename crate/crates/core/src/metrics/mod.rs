//! Overlap and boundary metrics per tumor region: Dice, 95% Hausdorff
//! distance, sensitivity and specificity.

mod edt;

pub use edt::squared_edt;

use std::path::Path;

use ndarray::{Array3, ArrayView3};
use serde::Serialize;

use crate::data::{encode_regions, REGION_NAMES};
use crate::error::{Error, Result};
use crate::exec::Exec;

fn same_shape(a: &ArrayView3<'_, u8>, b: &ArrayView3<'_, u8>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// Voxel confusion counts; nonzero means foreground.
pub fn confusion(pred: ArrayView3<'_, u8>, gt: ArrayView3<'_, u8>) -> Result<Confusion> {
    same_shape(&pred, &gt)?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2|A∩B| / (|A|+|B|)`, defined as 1 when both masks are empty.
pub fn dice(pred: ArrayView3<'_, u8>, gt: ArrayView3<'_, u8>) -> Result<f64> {
    let c = confusion(pred, gt)?;
    let denom = 2 * c.tp + c.fp + c.fn_;
    Ok(if denom == 0 {
        1.0
    } else {
        2.0 * c.tp as f64 / denom as f64
    })
}

/// `(TP/(TP+FN), TN/(TN+FP))`; `None` where the denominator is zero.
pub fn sens_spec(pred: ArrayView3<'_, u8>, gt: ArrayView3<'_, u8>) -> Result<(Option<f64>, Option<f64>)> {
    let c = confusion(pred, gt)?;
    let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    Ok((ratio(c.tp, c.fn_), ratio(c.tn, c.fp)))
}

/// Foreground voxels with at least one 6-connected background neighbor.
/// Voxels outside the grid count as background.
pub fn surface(mask: ArrayView3<'_, u8>) -> Vec<bool> {
    let (d, h, w) = mask.dim();
    let fg = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && mask[[z as usize, y as usize, x as usize]] != 0
    };
    let mut out = vec![false; d * h * w];
    for ((z, y, x), &v) in mask.indexed_iter() {
        if v == 0 {
            continue;
        }
        let (z, y, x) = (z as isize, y as isize, x as isize);
        let edge = !fg(z - 1, y, x)
            || !fg(z + 1, y, x)
            || !fg(z, y - 1, x)
            || !fg(z, y + 1, x)
            || !fg(z, y, x - 1)
            || !fg(z, y, x + 1);
        out[(z as usize * h + y as usize) * w + x as usize] = edge;
    }
    out
}

/// Linear interpolation between order statistics (`q` in [0, 1]).
pub fn percentile(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(values[lo] + (values[hi] - values[lo]) * (pos - lo as f64))
}

/// 95th percentile of the pooled surface-to-surface nearest distances in
/// both directions, in physical units. `None` if either mask is empty.
pub fn hd95(pred: ArrayView3<'_, u8>, gt: ArrayView3<'_, u8>, spacing: [f64; 3]) -> Result<Option<f64>> {
    hd95_with(Exec::Sequential, pred, gt, spacing)
}

pub fn hd95_with(
    exec: Exec,
    pred: ArrayView3<'_, u8>,
    gt: ArrayView3<'_, u8>,
    spacing: [f64; 3],
) -> Result<Option<f64>> {
    same_shape(&pred, &gt)?;
    let (d, h, w) = pred.dim();
    let dims = [d, h, w];
    let sa = surface(pred);
    let sb = surface(gt);
    if !sa.contains(&true) || !sb.contains(&true) {
        return Ok(None);
    }
    let da = squared_edt(exec, &sa, dims, spacing);
    let db = squared_edt(exec, &sb, dims, spacing);
    let mut dist: Vec<f64> = sa
        .iter()
        .zip(&db)
        .filter(|(&s, _)| s)
        .map(|(_, &v)| v.sqrt())
        .chain(sb.iter().zip(&da).filter(|(&s, _)| s).map(|(_, &v)| v.sqrt()))
        .collect();
    Ok(percentile(&mut dist, 0.95))
}

/// Scores of one region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegionScores {
    pub dsc: f64,
    pub hd95: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

impl RegionScores {
    pub fn compute(
        exec: Exec,
        pred: ArrayView3<'_, u8>,
        gt: ArrayView3<'_, u8>,
        spacing: [f64; 3],
    ) -> Result<Self> {
        let (sensitivity, specificity) = sens_spec(pred, gt)?;
        Ok(RegionScores {
            dsc: dice(pred, gt)?,
            hd95: hd95_with(exec, pred, gt, spacing)?,
            sensitivity,
            specificity,
        })
    }
}

/// WT, TC and ET scores of one case.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseScores {
    pub case_id: String,
    pub regions: [RegionScores; 3],
}

impl CaseScores {
    pub fn mean_dsc(&self) -> f64 {
        self.regions.iter().map(|r| r.dsc).sum::<f64>() / 3.0
    }
}

/// Scores a predicted BraTS label map against the reference.
pub fn evaluate_labels(
    exec: Exec,
    case_id: &str,
    pred: &Array3<u8>,
    gt: &Array3<u8>,
    spacing: [f64; 3],
) -> Result<CaseScores> {
    let p = encode_regions(pred)?;
    let g = encode_regions(gt)?;
    let scores = exec.map_range(3, |r| RegionScores::compute(Exec::Sequential, p.region(r), g.region(r), spacing));
    let mut regions = [RegionScores {
        dsc: 0.0,
        hd95: None,
        sensitivity: None,
        specificity: None,
    }; 3];
    for (slot, s) in regions.iter_mut().zip(scores) {
        *slot = s?;
    }
    Ok(CaseScores {
        case_id: case_id.to_string(),
        regions,
    })
}

/// Mean and median of the defined values of each column, per region.
pub fn summarize(scores: &[CaseScores]) -> Vec<(&'static str, usize, RegionScores)> {
    let stat = |vals: Vec<f64>, median: bool| -> Option<f64> {
        if vals.is_empty() {
            return None;
        }
        if median {
            let mut v = vals;
            percentile(&mut v, 0.5)
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let mut out = Vec::new();
    for (label, median) in [("mean", false), ("median", true)] {
        for r in 0..3 {
            let col = |f: &dyn Fn(&RegionScores) -> Option<f64>| {
                stat(scores.iter().filter_map(|c| f(&c.regions[r])).collect(), median)
            };
            out.push((
                label,
                r,
                RegionScores {
                    dsc: col(&|s| Some(s.dsc)).unwrap_or(f64::NAN),
                    hd95: col(&|s| s.hd95),
                    sensitivity: col(&|s| s.sensitivity),
                    specificity: col(&|s| s.specificity),
                },
            ));
        }
    }
    out
}

#[derive(Serialize)]
struct Row<'a> {
    case_id: &'a str,
    region: &'a str,
    dsc: String,
    hd95: String,
    sensitivity: String,
    specificity: String,
}

fn fmt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.6}"),
        _ => "nan".to_string(),
    }
}

/// One row per case and region, then mean and median rows.
pub fn write_scores_csv(path: &Path, scores: &[CaseScores]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut emit = |case_id: &str, r: usize, s: &RegionScores| -> Result<()> {
        w.serialize(Row {
            case_id,
            region: REGION_NAMES[r],
            dsc: fmt(Some(s.dsc)),
            hd95: fmt(s.hd95),
            sensitivity: fmt(s.sensitivity),
            specificity: fmt(s.specificity),
        })?;
        Ok(())
    };
    for c in scores {
        for (r, s) in c.regions.iter().enumerate() {
            emit(&c.case_id, r, s)?;
        }
    }
    for (label, r, s) in summarize(scores) {
        emit(label, r, &s)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;

    fn cube(dims: (usize, usize, usize), lo: [usize; 3], edge: usize) -> Array3<u8> {
        let mut m = Array3::zeros(dims);
        m.slice_mut(s![lo[0]..lo[0] + edge, lo[1]..lo[1] + edge, lo[2]..lo[2] + edge])
            .fill(1);
        m
    }

    #[test]
    fn dice_examples() {
        let a = cube((6, 6, 6), [1, 1, 1], 2);
        assert_eq!(dice(a.view(), a.view()).unwrap(), 1.0);
        let b = cube((6, 6, 6), [4, 4, 4], 2);
        assert_eq!(dice(a.view(), b.view()).unwrap(), 0.0);
        // Shifted by one along x: 4 shared voxels out of 8 + 8.
        let c = cube((6, 6, 6), [1, 1, 2], 2);
        assert_eq!(dice(a.view(), c.view()).unwrap(), 0.5);
        let e = Array3::<u8>::zeros((2, 2, 2));
        assert_eq!(dice(e.view(), e.view()).unwrap(), 1.0);
        assert!(dice(e.view(), a.view()).is_err());
    }

    #[test]
    fn hd95_examples() {
        let a = cube((8, 8, 8), [2, 2, 2], 3);
        assert_eq!(hd95(a.view(), a.view(), [1.0; 3]).unwrap(), Some(0.0));
        let mut p = Array3::<u8>::zeros((5, 5, 5));
        let mut q = p.clone();
        p[[1, 1, 0]] = 1;
        q[[1, 1, 3]] = 1;
        assert_eq!(hd95(p.view(), q.view(), [1.0; 3]).unwrap(), Some(3.0));
        assert_eq!(hd95(p.view(), q.view(), [1.0, 1.0, 2.0]).unwrap(), Some(6.0));
        let e = Array3::<u8>::zeros((5, 5, 5));
        assert_eq!(hd95(p.view(), e.view(), [1.0; 3]).unwrap(), None);
    }

    #[test]
    fn sens_spec_examples() {
        let a = cube((4, 4, 4), [0, 0, 0], 2);
        assert_eq!(sens_spec(a.view(), a.view()).unwrap(), (Some(1.0), Some(1.0)));
        let e = Array3::<u8>::zeros((4, 4, 4));
        assert_eq!(sens_spec(e.view(), a.view()).unwrap().0, Some(0.0));
        // TP=3, FN=1, TN=10, FP=2 laid out on a 1×4×4 grid.
        let gt = Array3::from_shape_vec((1, 4, 4), [1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0].to_vec()).unwrap();
        let pr = Array3::from_shape_vec((1, 4, 4), [1, 1, 1, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0].to_vec()).unwrap();
        let (se, sp) = sens_spec(pr.view(), gt.view()).unwrap();
        assert_eq!(se, Some(0.75));
        assert!((sp.unwrap() - 10.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0, 0.0];
        assert_eq!(percentile(&mut v, 0.5), Some(2.0));
        assert!((percentile(&mut v, 0.95).unwrap() - 3.8).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let gt = Array3::from_shape_fn((6, 6, 6), |(z, y, x)| if (2..4).contains(&z) && (2..4).contains(&y) && (2..4).contains(&x) { 4 } else { 0 });
        let s = evaluate_labels(Exec::Sequential, "c1", &gt, &gt, [1.0; 3]).unwrap();
        assert_eq!(s.mean_dsc(), 1.0);
        let path = dir.path().join("m.csv");
        write_scores_csv(&path, &[s]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "case_id,region,dsc,hd95,sensitivity,specificity");
        assert_eq!(lines.len(), 1 + 3 + 6);
        assert!(lines[1].starts_with("c1,WT,1.000000,0.000000"));
        assert!(lines[7].starts_with("median,WT"));
    }
}
