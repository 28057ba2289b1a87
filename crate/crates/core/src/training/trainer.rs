use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{lr_schedule_step, ScheduleConfig, TrainState};
use super::FoldSpec;
use crate::data::{array4_to_tensor, augment, crop_patch, normalize_case, sample_origin, Case};
use crate::engine::{Adam, AdamConfig, Graph};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::inference::{plan_windows, sliding_window, WindowPlan};
use crate::losses::{total_loss, total_loss_graph, LossConfig, LossTerms};
use crate::network::checkpoint::{self, CheckpointMeta, FORMAT_VERSION};
use crate::network::{Model, NetworkConfig, SaNet, SegmentationNet};
use crate::tensor::Tensor;

/// Every hyperparameter of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    /// Optimizer steps (batch size 1) per epoch; 0 means one per training
    /// case.
    pub steps_per_epoch: usize,
    pub augment: bool,
    /// Center patches on a random tumor voxel instead of sampling origins
    /// uniformly.
    pub foreground_patches: bool,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            network: NetworkConfig::default(),
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            steps_per_epoch: 0,
            augment: true,
            foreground_patches: false,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.schedule.validate()?;
        if !(self.loss.jaccard_eps > 0.0) || !(self.loss.focal_gamma >= 0.0) {
            return Err(Error::config("loss.jaccard_eps must be positive and loss.focal_gamma non-negative"));
        }
        Ok(())
    }
}

/// A labelled case ready for training and validation.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub id: String,
    /// Z-scored modalities.
    pub case: Case,
    /// `(4, D, H, W)` normalized image.
    pub image: Tensor<f32>,
    /// `(3, D, H, W)` WT/TC/ET targets.
    pub target: Tensor<f32>,
    /// Bounding box of the raw nonzero voxels.
    pub roi: [(usize, usize); 3],
}

impl PreparedCase {
    pub fn new(raw: &Case) -> Result<Self> {
        let mask = raw
            .region_mask()?
            .ok_or_else(|| Error::validation(format!("case {} has no labels", raw.id)))?;
        let case = normalize_case(raw);
        Ok(PreparedCase {
            id: raw.id.clone(),
            image: case.image_tensor(),
            target: mask.to_tensor(),
            roi: raw.foreground_bounds(),
            case,
        })
    }

    pub fn plan(&self, patch_size: usize) -> Result<WindowPlan> {
        plan_windows(self.roi, self.case.dims(), patch_size)
    }
}

/// Model plus optimizer state.
pub struct Trainer<N = SaNet> {
    pub model: Model<N, f32>,
    adam: Adam<f32>,
    loss: LossConfig,
}

impl<N: SegmentationNet> Trainer<N> {
    pub fn new(model: Model<N, f32>, adam: AdamConfig, loss: LossConfig) -> Self {
        let adam = Adam::new(&model.params, adam);
        Trainer { model, adam, loss }
    }

    /// One forward/backward pass over all heads and one Adam update.
    pub fn step(&mut self, image: &Tensor<f32>, target: &Tensor<f32>, lr: f64) -> Result<LossTerms> {
        let (grads, terms) = {
            let mut g = Graph::new(&self.model.params, self.model.exec)?;
            let x = g.input(image);
            let heads = self.model.net.forward(&mut g, x)?;
            let (loss, terms) = total_loss_graph(&mut g, &heads.all(), target, &self.loss)?;
            if !terms.total.is_finite() {
                return Ok(terms);
            }
            (g.backward(loss)?, terms)
        };
        self.adam.step(&mut self.model.params, &grads, lr);
        Ok(terms)
    }

    pub fn steps(&self) -> u64 {
        self.adam.steps()
    }
}

/// Mean main-head composite loss of full-volume sliding-window predictions.
pub fn validation_loss<N: SegmentationNet>(
    exec: Exec,
    model: &Model<N, f32>,
    cases: &[&PreparedCase],
    loss: &LossConfig,
) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::validation("no validation cases"));
    }
    let mut sum = 0.0;
    for c in cases {
        let plan = c.plan(model.config().patch_size)?;
        let probs = sliding_window(exec, model, &c.image, &plan)?;
        sum += total_loss(&[&probs], &c.target, loss)?.total;
    }
    Ok(sum / cases.len() as f64)
}

/// Where a fold run left its artifacts.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub state: TrainState,
    pub best_val: PathBuf,
    pub best_ema: PathBuf,
    pub metrics_log: PathBuf,
    pub steps_log: PathBuf,
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    train_loss: f64,
    val_loss: f64,
    ema_val_loss: f64,
    lr: f64,
}

#[derive(Serialize)]
struct StepRow<'a> {
    epoch: usize,
    step: usize,
    case_id: &'a str,
    loss: f64,
    jaccard: f64,
    focal: f64,
}

fn pick_patch(
    case: &PreparedCase,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let size = cfg.network.patch_size;
    let dims = case.case.dims();
    let origin = if cfg.foreground_patches {
        let fg: Vec<usize> = (0..case.target.channel(0).len())
            .filter(|&i| case.target.channel(0)[i] > 0.5)
            .collect();
        match fg.choose(rng) {
            Some(&i) => {
                let p = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
                if dims.iter().any(|&d| size > d) {
                    return Err(Error::shape(format!("patch {size} exceeds volume {dims:?}")));
                }
                [0, 1, 2].map(|a| p[a].saturating_sub(size / 2).min(dims[a] - size))
            }
            None => sample_origin(dims, size, rng)?,
        }
    } else {
        sample_origin(dims, size, rng)?
    };
    let (image, mask) = crop_patch(&case.case, origin, size)?;
    let (image, mask) = if cfg.augment {
        augment(&image, &mask, rng)
    } else {
        (image, mask)
    };
    Ok((array4_to_tensor(&image), mask.to_tensor()))
}

fn dump_state(out_dir: &Path, state: &TrainState) {
    let path = out_dir.join("state_dump.json");
    if let Ok(text) = serde_json::to_string_pretty(state) {
        let _ = fs::write(path, text);
    }
}

/// Trains one model on `fold.train_ids`, validating on `fold.valid_ids`
/// after every epoch. Writes `best_val` and `best_ema` checkpoints,
/// `metrics.csv` (per epoch) and `steps.csv` (per step) under `out_dir`.
pub fn train_fold(fold: &FoldSpec, cases: &[PreparedCase], cfg: &TrainConfig, out_dir: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let by_id: HashMap<&str, &PreparedCase> = cases.iter().map(|c| (c.id.as_str(), c)).collect();
    let lookup = |ids: &[String]| -> Result<Vec<&PreparedCase>> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::validation(format!("unknown case id {id}")))
            })
            .collect()
    };
    let train = lookup(&fold.train_ids)?;
    let valid = lookup(&fold.valid_ids)?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::validation("fold needs training and validation cases"));
    }

    let net = SaNet::new(cfg.network.clone())?;
    let parameter_count = net.parameter_count();
    let model = Model::init(net, cfg.seed).with_exec(cfg.exec);
    let mut trainer = Trainer::new(model, cfg.adam, cfg.loss);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut state = TrainState::new(&cfg.schedule, cfg.seed);

    let report = TrainReport {
        state: state.clone(),
        best_val: out_dir.join("best_val"),
        best_ema: out_dir.join("best_ema"),
        metrics_log: out_dir.join("metrics.csv"),
        steps_log: out_dir.join("steps.csv"),
    };
    let mut epochs_csv = csv::Writer::from_path(&report.metrics_log)?;
    let mut steps_csv = csv::Writer::from_path(&report.steps_log)?;
    let steps = if cfg.steps_per_epoch == 0 {
        train.len()
    } else {
        cfg.steps_per_epoch
    };
    let meta = |state: &TrainState| CheckpointMeta {
        format_version: FORMAT_VERSION,
        config: cfg.network.clone(),
        epoch: state.epoch,
        val_loss: state.val_loss,
        ema_val_loss: state.ema_val_loss,
        seed: cfg.seed,
        parameter_count,
    };

    while state.epoch < cfg.schedule.max_epochs && !state.stopped {
        let epoch = state.epoch + 1;
        let lr = state.lr;
        let mut order = train.clone();
        order.shuffle(&mut rng);
        let mut train_sum = 0.0;
        for step in 0..steps {
            let case = order[step % order.len()];
            let (image, target) = pick_patch(case, cfg, &mut rng)?;
            let terms = trainer.step(&image, &target, lr)?;
            steps_csv.serialize(StepRow {
                epoch,
                step: step + 1,
                case_id: &case.id,
                loss: terms.total,
                jaccard: terms.jaccard,
                focal: terms.focal,
            })?;
            if !terms.total.is_finite() {
                steps_csv.flush()?;
                dump_state(out_dir, &state);
                return Err(Error::NonFinite { epoch, value: terms.total });
            }
            train_sum += terms.total;
        }
        let train_loss = train_sum / steps as f64;
        let val = validation_loss(cfg.exec, &trainer.model, &valid, &cfg.loss)?;
        let (next, ev) = match lr_schedule_step(&state, val, &cfg.schedule) {
            Ok(r) => r,
            Err(e) => {
                dump_state(out_dir, &state);
                return Err(e);
            }
        };
        state = next;
        if ev.improved_val {
            checkpoint::save(&report.best_val, &trainer.model.params, &meta(&state))?;
        }
        if ev.improved_ema {
            checkpoint::save(&report.best_ema, &trainer.model.params, &meta(&state))?;
        }
        epochs_csv.serialize(EpochRow {
            epoch,
            train_loss,
            val_loss: val,
            ema_val_loss: state.ema_val_loss.unwrap_or(val),
            lr,
        })?;
        epochs_csv.flush()?;
        info!(
            "fold {} epoch {epoch}: train {train_loss:.4} val {val:.4} ema {:.4} lr {lr:.2e}{}",
            fold.fold_id,
            state.ema_val_loss.unwrap_or(val),
            if ev.decayed { " (decay)" } else { "" }
        );
    }
    steps_csv.flush()?;
    Ok(TrainReport { state, ..report })
}
