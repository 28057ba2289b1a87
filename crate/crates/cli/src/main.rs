use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use sanet::config::RunConfig;
use sanet::data::{list_cases, load_case, load_label_map, synth_phantom, write_case, write_label_map, write_probabilities, REGION_NAMES};
use sanet::inference::{decode_labels, sliding_window_infer, EnsembleMean};
use sanet::metrics::{evaluate_labels, summarize, write_scores_csv};
use sanet::network::checkpoint::load_model;
use sanet::training::{cross_validate, train_fold, FoldSpec, PreparedCase};
use sanet::{Error, Exec};

#[derive(Parser)]
#[command(name = "sanet", version, about = "Scale-attention tumor segmentation toolkit")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Execution policy for the numeric kernels.
    #[arg(long, global = true, value_enum)]
    exec: Option<ExecArg>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExecArg {
    Sequential,
    Parallel,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a directory of synthetic phantom cases.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        cases: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model on every case (validating on the same cases).
    Train(TrainArgs),
    /// k-fold cross-validation with a per-fold DSC table.
    Cv {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Predict label maps; several checkpoints form an ensemble.
    Infer {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Checkpoint stem or `.weights`/`.json` file (repeatable).
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Additional ensemble members.
        #[arg(long, num_args = 1..)]
        ensemble: Vec<PathBuf>,
        #[arg(long)]
        threshold: Option<f32>,
        /// Also write WT/TC/ET probability volumes.
        #[arg(long)]
        probabilities: bool,
    },
    /// Score predicted label maps against reference segmentations.
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Output CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    base_width: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_augment: bool,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = &self.data {
            cfg.data_dir = v.clone();
        }
        if let Some(v) = &self.out {
            cfg.out_dir = v.clone();
        }
        let t = &mut cfg.train;
        if let Some(v) = self.epochs {
            t.schedule.max_epochs = v;
        }
        if let Some(v) = self.base_width {
            t.network.base_width = v;
        }
        if let Some(v) = self.patch_size {
            t.network.patch_size = v;
        }
        if let Some(v) = self.steps_per_epoch {
            t.steps_per_epoch = v;
        }
        if let Some(v) = self.lr {
            t.schedule.initial_lr = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if self.no_augment {
            t.augment = false;
        }
    }
}

fn load_cases(dir: &Path) -> anyhow::Result<Vec<sanet::data::Case>> {
    let dirs = list_cases(dir)?;
    if dirs.is_empty() {
        return Err(Error::Validation(format!("no case directories under {}", dir.display())).into());
    }
    dirs.iter()
        .map(|d| load_case(d).with_context(|| format!("loading {}", d.display())))
        .collect()
}

fn synth(cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    for i in 0..cfg.synth.cases {
        let seed = cfg.synth.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let mut case = synth_phantom(seed, cfg.synth.size)?;
        case.id = format!("phantom_{i:03}");
        let dir = write_case(&cfg.out_dir, &case)?;
        info!("wrote {}", dir.display());
    }
    println!("{} phantoms of size {} in {}", cfg.synth.cases, cfg.synth.size, cfg.out_dir.display());
    Ok(())
}

fn train(cfg: &RunConfig) -> anyhow::Result<()> {
    let cases = load_cases(&cfg.data_dir)?;
    let prepared = cases.iter().map(PreparedCase::new).collect::<Result<Vec<_>, _>>()?;
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let fold = FoldSpec {
        fold_id: 0,
        train_ids: ids.clone(),
        valid_ids: ids,
    };
    let report = train_fold(&fold, &prepared, &cfg.train, &cfg.out_dir)?;
    println!(
        "trained {} epochs; best val {:.4}, best ema {:.4}",
        report.state.epoch, report.state.best_val_loss, report.state.best_ema_val_loss
    );
    println!("checkpoints: {} {}", report.best_val.display(), report.best_ema.display());
    println!("log: {}", report.metrics_log.display());
    Ok(())
}

fn cv(cfg: &RunConfig) -> anyhow::Result<()> {
    let cases = load_cases(&cfg.data_dir)?;
    let report = cross_validate(&cases, cfg.cv.folds, &cfg.train, &cfg.out_dir)?;
    println!("{:<8} {:>7} {:>7} {:>7}", "", "WT", "TC", "ET");
    for (name, d) in &report.table {
        println!("{name:<8} {:>7.4} {:>7.4} {:>7.4}", d[0], d[1], d[2]);
    }
    println!("table: {}", cfg.out_dir.join("cv_table.csv").display());
    Ok(())
}

fn infer(cfg: &RunConfig, exec: Exec) -> anyhow::Result<()> {
    if cfg.infer.checkpoints.is_empty() {
        return Err(Error::Validation("infer needs at least one --checkpoint".into()).into());
    }
    let models = cfg
        .infer
        .checkpoints
        .iter()
        .map(|p| {
            load_model(p)
                .map(|(m, _)| m.with_exec(exec))
                .with_context(|| format!("loading checkpoint {}", p.display()))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    fs::create_dir_all(&cfg.out_dir)?;
    for dir in list_cases(&cfg.data_dir)? {
        let case = load_case(&dir)?;
        let mut mean = EnsembleMean::default();
        for m in &models {
            mean.add(&sliding_window_infer(exec, m, &case)?)?;
        }
        let probs = mean.finish()?;
        let labels = decode_labels(&probs, cfg.infer.threshold)?;
        let path = cfg.out_dir.join(format!("{}_pred.nii.gz", case.id));
        write_label_map(&path, &labels, case.spacing)?;
        if cfg.infer.write_probabilities {
            let arr = sanet::data::tensor_to_array4(&probs)?;
            write_probabilities(&cfg.out_dir, &format!("{}_prob", case.id), &arr, &REGION_NAMES, case.spacing)?;
        }
        println!("{}", path.display());
    }
    Ok(())
}

fn evaluate(cfg: &RunConfig, exec: Exec, out: &Path) -> anyhow::Result<()> {
    let mut scores = Vec::new();
    for dir in list_cases(&cfg.data_dir)? {
        let case = load_case(&dir)?;
        let Some(gt) = &case.labels else {
            bail!(Error::MissingFile {
                path: dir.join(format!("{}_seg.nii.gz", case.id)),
                what: "reference segmentation".into(),
            });
        };
        let pred = load_label_map(&cfg.pred_dir.join(format!("{}_pred.nii.gz", case.id)))?;
        scores.push(evaluate_labels(exec, &case.id, &pred, gt, case.spacing)?);
    }
    write_scores_csv(out, &scores)?;
    for (label, r, s) in summarize(&scores) {
        if label == "mean" {
            let hd = s.hd95.map_or("nan".to_string(), |v| format!("{v:.2}"));
            println!("{:<3} dsc {:.4} hd95 {hd}", REGION_NAMES[r], s.dsc);
        }
    }
    println!("scores: {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(e) = cli.exec {
        cfg.train.exec = match e {
            ExecArg::Sequential => Exec::Sequential,
            ExecArg::Parallel => Exec::Parallel,
        };
    }
    let mut eval_out = None;
    match &cli.command {
        Command::Synth { out, cases, size, seed } => {
            if let Some(v) = out {
                cfg.out_dir = v.clone();
            }
            if let Some(v) = cases {
                cfg.synth.cases = *v;
            }
            if let Some(v) = size {
                cfg.synth.size = *v;
            }
            if let Some(v) = seed {
                cfg.synth.seed = *v;
            }
        }
        Command::Train(args) => args.apply(&mut cfg),
        Command::Cv { train, folds } => {
            train.apply(&mut cfg);
            if let Some(v) = folds {
                cfg.cv.folds = *v;
            }
        }
        Command::Infer {
            data,
            out,
            checkpoints,
            ensemble,
            threshold,
            probabilities,
        } => {
            if let Some(v) = data {
                cfg.data_dir = v.clone();
            }
            if let Some(v) = out {
                cfg.out_dir = v.clone();
            }
            if !checkpoints.is_empty() || !ensemble.is_empty() {
                cfg.infer.checkpoints = checkpoints.iter().chain(ensemble).cloned().collect();
            }
            if let Some(v) = threshold {
                cfg.infer.threshold = *v;
            }
            if *probabilities {
                cfg.infer.write_probabilities = true;
            }
        }
        Command::Evaluate { data, pred, out } => {
            if let Some(v) = data {
                cfg.data_dir = v.clone();
            }
            if let Some(v) = pred {
                cfg.pred_dir = v.clone();
            }
            eval_out = Some(out.clone().unwrap_or_else(|| cfg.out_dir.join("scores.csv")));
        }
        Command::Config => {}
    }
    cfg.validate()?;
    let exec = cfg.train.exec;
    match cli.command {
        Command::Synth { .. } => synth(&cfg),
        Command::Train(_) => train(&cfg),
        Command::Cv { .. } => cv(&cfg),
        Command::Infer { .. } => infer(&cfg, exec),
        Command::Evaluate { .. } => evaluate(&cfg, exec, eval_out.as_deref().expect("set above")),
        Command::Config => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

/// 1 for bad configuration or inputs, 2 for failures while running.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Validation(_) | Error::Shape(_) | Error::MissingFile { .. }) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
