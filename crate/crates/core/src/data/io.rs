use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use super::{regions, Case};
use crate::error::{Error, Result};

/// File suffixes in channel order.
pub const MODALITIES: [&str; 4] = ["t1", "t1ce", "t2", "flair"];

fn modality_path(dir: &Path, id: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{id}_{suffix}.nii.gz"))
}

fn nifti_err(path: &Path) -> impl FnOnce(nifti::NiftiError) -> Error + '_ {
    move |source| Error::Nifti {
        path: path.to_path_buf(),
        source,
    }
}

fn read_volume(path: &Path, what: &str) -> Result<(Array3<f32>, [f64; 3])> {
    if !path.is_file() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
            what: what.to_string(),
        });
    }
    let obj = ReaderOptions::new().read_file(path).map_err(nifti_err(path))?;
    let pixdim = obj.header().pixdim;
    let spacing = [1, 2, 3].map(|i| {
        let p = f64::from(pixdim[i]);
        if p > 0.0 && p.is_finite() {
            p
        } else {
            1.0
        }
    });
    let data = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(nifti_err(path))?;
    let shape = data.shape().to_vec();
    let vol = data
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::validation(format!("{} is not a 3D volume (shape {shape:?})", path.display())))?;
    Ok((vol.as_standard_layout().into_owned(), spacing))
}

fn header_with_spacing(spacing: [f64; 3]) -> NiftiHeader {
    let mut hdr = NiftiHeader::default();
    for (i, s) in spacing.iter().enumerate() {
        hdr.pixdim[i + 1] = *s as f32;
    }
    hdr
}

/// Loads `<dir>/<id>_{t1,t1ce,t2,flair}.nii.gz` plus an optional
/// `<id>_seg.nii.gz`, where `<id>` is the directory name.
pub fn load_case(dir: &Path) -> Result<Case> {
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::validation(format!("cannot derive a case id from {}", dir.display())))?
        .to_string();
    let mut modalities = Vec::with_capacity(MODALITIES.len());
    let mut spacing = None;
    for m in MODALITIES {
        let (vol, sp) = read_volume(&modality_path(dir, &id, m), m)?;
        match spacing {
            None => spacing = Some(sp),
            Some(prev) if prev != sp => {
                return Err(Error::validation(format!(
                    "case {id}: {m} spacing {sp:?} differs from {prev:?}"
                )))
            }
            _ => {}
        }
        modalities.push(vol);
    }
    let seg = modality_path(dir, &id, "seg");
    let labels = if seg.is_file() {
        Some(load_label_map(&seg)?)
    } else {
        None
    };
    Case::new(id, modalities, labels, spacing.unwrap_or([1.0; 3]))
}

/// Reads an integer label map; values must be in {0, 1, 2, 4}.
pub fn load_label_map(path: &Path) -> Result<Array3<u8>> {
    let (vol, _) = read_volume(path, "labels")?;
    let mut out = Array3::<u8>::zeros(vol.dim());
    for (o, &v) in out.iter_mut().zip(vol.iter()) {
        let r = v.round();
        if (r - v).abs() > 1e-3 || !(0.0..=255.0).contains(&r) {
            return Err(Error::validation(format!(
                "{}: non-integer label value {v}",
                path.display()
            )));
        }
        *o = r as u8;
    }
    regions::check_labels(&out)?;
    Ok(out)
}

pub fn write_label_map(path: &Path, labels: &Array3<u8>, spacing: [f64; 3]) -> Result<()> {
    let hdr = header_with_spacing(spacing);
    WriterOptions::new(path)
        .reference_header(&hdr)
        .write_nifti(labels)
        .map_err(nifti_err(path))
}

/// Writes each channel of a `(C, D, H, W)` probability volume as
/// `<stem>_<name>.nii.gz`.
pub fn write_probabilities(
    dir: &Path,
    stem: &str,
    probs: &Array4<f32>,
    names: &[&str],
    spacing: [f64; 3],
) -> Result<Vec<PathBuf>> {
    let hdr = header_with_spacing(spacing);
    let mut paths = Vec::new();
    for (c, name) in names.iter().enumerate().take(probs.dim().0) {
        let path = dir.join(format!("{stem}_{}.nii.gz", name.to_lowercase()));
        WriterOptions::new(&path)
            .reference_header(&hdr)
            .write_nifti(&probs.index_axis(Axis(0), c).to_owned())
            .map_err(nifti_err(&path))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Writes a case in the same layout [`load_case`] reads, under `root/<id>/`.
pub fn write_case(root: &Path, case: &Case) -> Result<PathBuf> {
    case.validate()?;
    let dir = root.join(&case.id);
    fs::create_dir_all(&dir)?;
    let hdr = header_with_spacing(case.spacing);
    for (m, vol) in MODALITIES.iter().zip(&case.modalities) {
        let path = modality_path(&dir, &case.id, m);
        WriterOptions::new(&path)
            .reference_header(&hdr)
            .write_nifti(vol)
            .map_err(nifti_err(&path))?;
    }
    if let Some(labels) = &case.labels {
        write_label_map(&modality_path(&dir, &case.id, "seg"), labels, case.spacing)?;
    }
    Ok(dir)
}

/// Case directories directly under `root`, sorted by name.
pub fn list_cases(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::MissingFile {
            path: root.to_path_buf(),
            what: "case root directory".into(),
        });
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}
