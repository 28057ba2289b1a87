use std::path::{Path, PathBuf};

use log::info;

use super::trainer::{train_fold, PreparedCase, TrainConfig, TrainReport};
use super::{make_folds, FoldSpec};
use crate::data::Case;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::inference::{decode_labels, sliding_window, THRESHOLD};
use crate::metrics::{evaluate_labels, write_scores_csv, CaseScores};
use crate::network::checkpoint;

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: FoldSpec,
    pub report: TrainReport,
    /// Validation scores of the best-by-validation-loss checkpoint.
    pub scores: Vec<CaseScores>,
}

#[derive(Clone, Debug)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    /// `fold-0 .. fold-(k-1)` then `ALL`, each with mean WT/TC/ET DSC.
    pub table: Vec<(String, [f64; 3])>,
}

/// Scores a saved checkpoint on labelled cases.
pub fn evaluate_checkpoint(exec: Exec, stem: &Path, cases: &[&PreparedCase], raw: &[&Case]) -> Result<Vec<CaseScores>> {
    let (model, _) = checkpoint::load_model(stem)?;
    let model = model.with_exec(exec);
    let mut out = Vec::with_capacity(cases.len());
    for (c, r) in cases.iter().zip(raw) {
        let plan = c.plan(model.config().patch_size)?;
        let probs = sliding_window(exec, &model, &c.image, &plan)?;
        let pred = decode_labels(&probs, THRESHOLD)?;
        let gt = r.labels.as_ref().ok_or_else(|| Error::validation(format!("case {} has no labels", r.id)))?;
        out.push(evaluate_labels(exec, &c.id, &pred, gt, r.spacing)?);
    }
    Ok(out)
}

fn mean_dsc(scores: &[CaseScores]) -> [f64; 3] {
    let n = scores.len().max(1) as f64;
    [0, 1, 2].map(|r| scores.iter().map(|s| s.regions[r].dsc).sum::<f64>() / n)
}

/// Trains one model per fold (seed offset by fold id) and scores each
/// fold's best-by-validation-loss checkpoint on its held-out cases.
pub fn cross_validate(cases: &[Case], k: usize, cfg: &TrainConfig, out_dir: &Path) -> Result<CvReport> {
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let folds = make_folds(&ids, k, cfg.seed)?;
    let prepared = cases.iter().map(PreparedCase::new).collect::<Result<Vec<_>>>()?;
    let mut results = Vec::with_capacity(k);
    let mut table = Vec::with_capacity(k + 1);
    for fold in folds {
        let dir = out_dir.join(format!("fold-{}", fold.fold_id));
        let fold_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(fold.fold_id as u64),
            ..cfg.clone()
        };
        info!("training fold {} on {} cases", fold.fold_id, fold.train_ids.len());
        let report = train_fold(&fold, &prepared, &fold_cfg, &dir)?;
        let (p, r): (Vec<&PreparedCase>, Vec<&Case>) = fold
            .valid_ids
            .iter()
            .map(|id| {
                let i = ids.iter().position(|x| x == id).expect("fold ids come from the case list");
                (&prepared[i], &cases[i])
            })
            .unzip();
        let scores = evaluate_checkpoint(cfg.exec, &report.best_val, &p, &r)?;
        write_scores_csv(&dir.join("validation_scores.csv"), &scores)?;
        table.push((format!("fold-{}", fold.fold_id), mean_dsc(&scores)));
        results.push(FoldResult { fold, report, scores });
    }
    let all: Vec<CaseScores> = results.iter().flat_map(|f| f.scores.clone()).collect();
    table.push(("ALL".to_string(), mean_dsc(&all)));
    write_dsc_table(&out_dir.join("cv_table.csv"), &table)?;
    Ok(CvReport { folds: results, table })
}

pub fn write_dsc_table(path: &Path, table: &[(String, [f64; 3])]) -> Result<PathBuf> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["fold", "WT", "TC", "ET"])?;
    for (name, d) in table {
        w.write_record([name.clone(), format!("{:.4}", d[0]), format!("{:.4}", d[1]), format!("{:.4}", d[2])])?;
    }
    w.flush()?;
    Ok(path.to_path_buf())
}
