//! Command-line front end: `analyze`, `train`, `eval`, `plotdata`.
//!
//! Every command writes only under `--out`. Exit codes: 0 success,
//! 1 invalid arguments or config, 2 data, I/O or runtime failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::datapipe::{synth_domains, DatasetSplit, Domain, FeatureVector, Manifest};
use crate::distshift::{dataset_report, DatasetReport};
use crate::error::{Error, Result};
use crate::trainer::{
    accuracy, confusion, fit_with_progress, predict_all, EpochRecord, TrainConfig, HISTORY_COLUMNS,
};

/// Synthetic fixture used by `--synthetic`.
pub const SYNTH_CLASSES: usize = 2;
pub const SYNTH_DIM: usize = 8;
pub const SYNTH_SHIFT: f64 = 4.0;
pub const SYNTH_PER_CLASS: usize = 500;

pub const DEFAULT_N_BOOT: usize = 5000;
const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Parser)]
#[command(name = "dnada", version, about = "Diffusion-based adversarial domain adaptation for cross-user HAR")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-activity Wasserstein distances and bootstrapped proportions between two users.
    Analyze(AnalyzeArgs),
    /// Train on a source user and pseudo-labeled target user.
    Train(TrainArgs),
    /// Score a checkpoint on the target test half.
    Eval(EvalArgs),
    /// Turn a history log or analysis report into plot-ready tables.
    Plotdata(PlotArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// TOML manifest mapping user ids to CSV recordings.
    #[arg(long, conflicts_with = "synthetic")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub source_user: Option<String>,
    #[arg(long)]
    pub target_user: Option<String>,
    /// Use the built-in two-domain Gaussian fixture instead of a manifest.
    #[arg(long)]
    pub synthetic: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = DEFAULT_N_BOOT)]
    pub n_boot: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigOverrides {
    /// Flat `key = value` file; keys mirror the flag names.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub timesteps: Option<usize>,
    /// Use standard square-root schedule coefficients.
    #[arg(long)]
    pub sqrt_mode: bool,
    #[arg(long)]
    pub infer_passes: Option<usize>,
}

impl ConfigOverrides {
    /// Defaults, then the config file, then explicit flags.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                toml::from_str(&text).map_err(|e| Error::Config {
                    field: path.display().to_string(),
                    message: e.to_string(),
                })?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.timesteps {
            cfg.timesteps = v;
        }
        if self.sqrt_mode {
            cfg.sqrt_mode = true;
        }
        if let Some(v) = self.infer_passes {
            cfg.infer_passes = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub infer_passes: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// `history.jsonl` written by `train`.
    #[arg(long, required_unless_present = "report", conflicts_with = "report")]
    pub history: Option<PathBuf>,
    /// `report.json` written by `analyze`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name), runs the command and maps the
/// outcome to an exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

pub fn execute(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Analyze(a) => cmd_analyze(a).map(|_| ()),
        Command::Train(a) => cmd_train(a).map(|_| ()),
        Command::Eval(a) => cmd_eval(a).map(|_| ()),
        Command::Plotdata(a) => cmd_plotdata(a),
    }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Source and target features for a command, from the manifest or the fixture.
pub fn load_pair(data: &DataArgs, seed: u64) -> Result<(Vec<FeatureVector>, Vec<FeatureVector>)> {
    if data.synthetic {
        return synth_domains(SYNTH_PER_CLASS, SYNTH_CLASSES, SYNTH_DIM, SYNTH_SHIFT, seed);
    }
    let manifest = data
        .manifest
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("either --manifest or --synthetic is required".into()))?;
    let (src, tgt) = match (&data.source_user, &data.target_user) {
        (Some(s), Some(t)) => (s, t),
        _ => {
            return Err(Error::InvalidArgument(
                "--source-user and --target-user are required with --manifest".into(),
            ))
        }
    };
    let m = Manifest::load(manifest)?;
    // validate both ids before reading any file
    m.user(src)?;
    m.user(tgt)?;
    Ok((m.user_features(src, Domain::Source)?, m.user_features(tgt, Domain::Target)?))
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<DatasetReport> {
    if args.n_boot == 0 {
        return Err(Error::InvalidArgument("--n-boot must be at least 1".into()));
    }
    let (source, target) = load_pair(&args.data, args.seed)?;
    let report = dataset_report(&source, &target, args.n_boot, args.seed)?;
    create_out(&args.out)?;

    let mut csv = String::from("activity,observed_distance,proportion\n");
    for r in &report.per_activity {
        writeln!(csv, "{},{},{}", r.activity, r.observed_distance, r.proportion).unwrap();
    }
    write(&args.out.join("report.csv"), &csv)?;
    write(
        &args.out.join("summary.csv"),
        &format!(
            "activities,mean_distance,mean_proportion\n{},{},{}\n",
            report.per_activity.len(),
            report.mean_distance,
            report.mean_proportion
        ),
    )?;
    let mut dump = String::from("activity,iteration,distance\n");
    for r in &report.per_activity {
        for (i, d) in r.bootstrap_distances.iter().enumerate() {
            writeln!(dump, "{},{},{}", r.activity, i, d).unwrap();
        }
    }
    write(&args.out.join("bootstrap.csv"), &dump)?;
    write(
        &args.out.join("report.json"),
        &serde_json::to_string(&report).expect("report serializes"),
    )?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    pub checkpoint: PathBuf,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = HISTORY_COLUMNS.join(",");
    s.push('\n');
    for r in history {
        let l = &r.losses;
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch, l.l_noise, l.l_act, l.l_binary, l.l_adv_a, l.l_adv_u, l.l_act_source, l.l_total, r.val_accuracy
        )
        .unwrap();
    }
    s
}

/// The resolved config in the same flat `key = value` form `--config` reads.
pub fn config_toml(cfg: &TrainConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let cfg = args.overrides.resolve()?;
    let (source, target) = load_pair(&args.data, cfg.seed)?;
    let mut split = DatasetSplit::new(source, &target)?;
    split.assign_pseudo_labels(cfg.seed)?;
    create_out(&args.out)?;
    write(&args.out.join("config.toml"), &config_toml(&cfg))?;

    let jsonl_path = args.out.join("history.jsonl");
    let mut jsonl = String::new();
    let result = fit_with_progress(&split, &cfg, |r| {
        jsonl.push_str(&serde_json::to_string(r).expect("record serializes"));
        jsonl.push('\n');
        if r.epoch % 10 == 0 {
            eprintln!(
                "epoch {:>4}  l_total {:.4}  val_acc {:.4}",
                r.epoch, r.losses.l_total, r.val_accuracy
            );
        }
    })?;
    write(&jsonl_path, &jsonl)?;
    write(&args.out.join("history.csv"), &history_csv(&result.history))?;

    let ck_path = args.out.join("checkpoint.json");
    let best_val_accuracy = result.best_val_accuracy();
    Checkpoint::new(cfg, result.best_epoch, result.models, result.optimizer).save(&ck_path)?;
    Ok(TrainOutcome {
        best_epoch: result.best_epoch,
        best_val_accuracy,
        checkpoint: ck_path,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub samples: usize,
    pub confusion: Vec<Vec<usize>>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalOutcome> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let mut cfg = ck.config.clone();
    if let Some(k) = args.infer_passes {
        cfg.infer_passes = k;
        cfg.validate()?;
    }
    let (source, target) = load_pair(&args.data, cfg.seed)?;
    let split = DatasetSplit::new(source, &target)?;
    if split.dim() != ck.models.dim() {
        return Err(Error::dim("checkpoint feature dimension vs data", ck.models.dim(), split.dim()));
    }
    let test = &split.test_target;
    if test.is_empty() {
        return Err(Error::InsufficientData("empty test set".into()));
    }
    let preds = predict_all(&ck.models, test, &cfg, cfg.seed)?;
    let acc = accuracy(&preds, test)?;
    let conf = confusion(&preds, test);
    create_out(&args.out)?;
    write(
        &args.out.join("accuracy.csv"),
        &format!("accuracy,samples,infer_passes\n{},{},{}\n", acc, test.len(), cfg.infer_passes),
    )?;
    let mut c = String::from("truth,predicted,count\n");
    for (t, row) in conf.iter().enumerate() {
        for (p, n) in row.iter().enumerate() {
            writeln!(c, "{t},{p},{n}").unwrap();
        }
    }
    write(&args.out.join("confusion.csv"), &c)?;
    Ok(EvalOutcome {
        accuracy: acc,
        samples: test.len(),
        confusion: conf,
    })
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedRow {
                path: path.into(),
                line: i as u64 + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Loss curves: epoch plus the seven loss columns.
pub fn loss_curve_csv(history: &[EpochRecord]) -> String {
    let mut s = HISTORY_COLUMNS[..8].join(",");
    s.push('\n');
    for r in history {
        let l = &r.losses;
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.epoch, l.l_noise, l.l_act, l.l_binary, l.l_adv_a, l.l_adv_u, l.l_act_source, l.l_total
        )
        .unwrap();
    }
    s
}

/// Fixed-width histogram of each activity's bootstrap distances. The
/// observed distance is repeated on every row so one file draws the figure.
pub fn histogram_csv(report: &DatasetReport, bins: usize) -> String {
    let mut s = String::from("activity,bin_lo,bin_hi,count,observed_distance\n");
    for r in &report.per_activity {
        let lo = r.bootstrap_distances.iter().copied().fold(r.observed_distance, f64::min);
        let hi = r.bootstrap_distances.iter().copied().fold(r.observed_distance, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let mut counts = vec![0usize; bins];
        for d in &r.bootstrap_distances {
            let k = (((d - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        for (k, c) in counts.iter().enumerate() {
            let a = lo + k as f64 * width;
            writeln!(s, "{},{},{},{},{}", r.activity, a, a + width, c, r.observed_distance).unwrap();
        }
    }
    s
}

pub fn cmd_plotdata(args: &PlotArgs) -> Result<()> {
    match (&args.history, &args.report) {
        (Some(h), None) => {
            let history = read_history(h)?;
            create_out(&args.out)?;
            write(&args.out.join("loss_curve.csv"), &loss_curve_csv(&history))?;
            let mut acc = String::from("epoch,val_accuracy\n");
            for r in &history {
                writeln!(acc, "{},{}", r.epoch, r.val_accuracy).unwrap();
            }
            write(&args.out.join("val_accuracy.csv"), &acc)
        }
        (None, Some(p)) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let report: DatasetReport = serde_json::from_str(&text).map_err(|e| Error::Schema {
                path: p.clone(),
                message: e.to_string(),
            })?;
            create_out(&args.out)?;
            write(&args.out.join("histogram.csv"), &histogram_csv(&report, HISTOGRAM_BINS))
        }
        _ => Err(Error::InvalidArgument("exactly one of --history or --report is required".into())),
    }
}
