mod common;

use std::fs;

use sanet::data::{list_cases, load_case, synth_phantom, write_case};
use sanet::inference::{plan_windows, sliding_window, PatchPredictor};
use sanet::network::checkpoint;
use sanet::network::NetworkConfig;
use sanet::training::{train_fold, validation_loss, FoldSpec, PreparedCase, ScheduleConfig, TrainConfig};
use sanet::{Error, Exec, Result, Tensor};

fn desk_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        network: NetworkConfig {
            base_width: 8,
            patch_size: 32,
            ..NetworkConfig::default()
        },
        schedule: ScheduleConfig {
            max_epochs: epochs,
            ..ScheduleConfig::default()
        },
        seed: 3,
        ..TrainConfig::default()
    }
}

fn phantoms(n: u64, size: usize) -> Vec<PreparedCase> {
    (0..n)
        .map(|s| PreparedCase::new(&synth_phantom(200 + s, size).unwrap()).unwrap())
        .collect()
}

fn split(cases: &[PreparedCase], valid: usize) -> FoldSpec {
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    FoldSpec {
        fold_id: 0,
        train_ids: ids[valid..].to_vec(),
        valid_ids: ids[..valid].to_vec(),
    }
}

#[test]
fn phantom_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cases: Vec<_> = (0..3).map(|s| synth_phantom(s, 16).unwrap()).collect();
    for c in &cases {
        write_case(dir.path(), c).unwrap();
    }
    let loaded: Vec<_> = list_cases(dir.path())
        .unwrap()
        .iter()
        .map(|d| load_case(d).unwrap())
        .collect();
    assert_eq!(loaded, cases);
}

#[test]
fn desk_scale_fold_writes_checkpoints_and_replays() {
    let cases = phantoms(4, 32);
    let fold = split(&cases, 1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(20);
    let report = train_fold(&fold, &cases, &cfg, dir.path()).unwrap();
    assert_eq!(report.state.epoch, 20);
    for stem in [&report.best_val, &report.best_ema] {
        assert!(checkpoint::weights_path(stem).is_file());
        assert!(checkpoint::meta_path(stem).is_file());
    }
    let log = fs::read_to_string(&report.metrics_log).unwrap();
    let lines: Vec<_> = log.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_loss,ema_val_loss,lr");
    assert_eq!(lines.len(), 21);
    let steps = fs::read_to_string(&report.steps_log).unwrap();
    assert_eq!(steps.lines().count(), 1 + 20 * 3);

    // Re-evaluating the best-by-validation checkpoint reproduces its loss.
    let (model, meta) = checkpoint::load_model(&report.best_val).unwrap();
    let valid: Vec<&PreparedCase> = cases.iter().filter(|c| fold.valid_ids.contains(&c.id)).collect();
    let replay = validation_loss(cfg.exec, &model, &valid, &cfg.loss).unwrap();
    let recorded = meta.val_loss.unwrap();
    assert!((replay - recorded).abs() < 1e-5, "{replay} vs {recorded}");
    assert_eq!(recorded, report.state.best_val_loss);
}

#[test]
fn identical_runs_produce_identical_logs() {
    let cases = phantoms(3, 16);
    let fold = split(&cases, 1);
    let cfg = TrainConfig {
        network: common::tiny_config(16),
        ..desk_config(2)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train_fold(&fold, &cases, &cfg, a.path()).unwrap();
    let rb = train_fold(&fold, &cases, &cfg, b.path()).unwrap();
    assert_eq!(fs::read(&ra.metrics_log).unwrap(), fs::read(&rb.metrics_log).unwrap());
    assert_eq!(fs::read(&ra.steps_log).unwrap(), fs::read(&rb.steps_log).unwrap());
    assert_eq!(
        fs::read(checkpoint::weights_path(&ra.best_val)).unwrap(),
        fs::read(checkpoint::weights_path(&rb.best_val)).unwrap()
    );
}

#[test]
fn diverging_run_aborts_with_state_dump() {
    let cases = phantoms(2, 16);
    let fold = split(&cases, 1);
    let mut cfg = TrainConfig {
        network: common::tiny_config(16),
        ..desk_config(5)
    };
    cfg.schedule.initial_lr = 1e30;
    let dir = tempfile::tempdir().unwrap();
    let err = train_fold(&fold, &cases, &cfg, dir.path()).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    assert!(dir.path().join("state_dump.json").is_file());
}

#[test]
fn unknown_case_ids_are_rejected() {
    let cases = phantoms(2, 16);
    let fold = FoldSpec {
        fold_id: 0,
        train_ids: vec!["nope".into()],
        valid_ids: vec![cases[0].id.clone()],
    };
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        network: common::tiny_config(16),
        ..desk_config(1)
    };
    assert!(matches!(train_fold(&fold, &cases, &cfg, dir.path()), Err(Error::Validation(_))));
}

/// Reports a value that depends on where the window sits: channel 0 of the
/// image holds the x coordinate.
struct ByPosition {
    size: usize,
}

impl PatchPredictor for ByPosition {
    fn patch_size(&self) -> usize {
        self.size
    }

    fn predict(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let [_, d, h, w] = patch.dims4()?;
        let v = if patch.data()[0] == 0.0 { 0.25 } else { 0.75 };
        Ok(Tensor::full(&[3, d, h, w], v))
    }
}

#[test]
fn overlapping_windows_are_averaged() {
    let (d, h, w) = (6, 6, 10);
    let mut img = Tensor::zeros(&[4, d, h, w]);
    for (i, v) in img.channel_mut(0).iter_mut().enumerate() {
        *v = (i % w) as f32;
    }
    let plan = plan_windows([(0, d), (0, h), (0, w)], [d, h, w], 6).unwrap();
    assert_eq!(plan.origins, vec![[0, 0, 0], [0, 0, 4]]);
    let out = sliding_window(Exec::Sequential, &ByPosition { size: 6 }, &img, &plan).unwrap();

    // Brute-force accumulation over the two windows.
    let mut sum = vec![0.0f64; w];
    let mut count = vec![0u32; w];
    for (start, value) in [(0usize, 0.25f64), (4, 0.75)] {
        for x in start..start + 6 {
            sum[x] += value;
            count[x] += 1;
        }
    }
    for ch in 0..3 {
        for (i, &v) in out.channel(ch).iter().enumerate() {
            let x = i % w;
            assert_eq!(f64::from(v), sum[x] / f64::from(count[x]));
        }
    }
    assert_eq!(out.channel(0)[4], 0.5);

    // Duplicating every window changes nothing.
    let mut doubled = plan.clone();
    doubled.origins.extend(plan.origins.clone());
    let again = sliding_window(Exec::Sequential, &ByPosition { size: 6 }, &img, &doubled).unwrap();
    assert_eq!(again, out);
}

#[test]
fn sliding_window_is_independent_of_execution_order() {
    let model = common::phantom_model(common::tiny_config(16), 4);
    let case = PreparedCase::new(&synth_phantom(8, 32).unwrap()).unwrap();
    let plan = case.plan(16).unwrap();
    assert!(plan.len() > 1);
    let a = sliding_window(Exec::Sequential, &model, &case.image, &plan).unwrap();
    let b = sliding_window(Exec::Parallel, &model, &case.image, &plan).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-7);
}
