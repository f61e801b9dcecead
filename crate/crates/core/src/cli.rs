//! Command-line front end. Every verb resolves a [`RunConfig`] from a file
//! plus `--set` overrides, prints it, runs one pipeline and writes its
//! reports under the output directory.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    load_idx, parse_config, read_report, synth_dataset_with, write_report, Cell, DataSource, Dataset, Report, RunConfig,
};
use crate::error::{Error, Result};
use crate::models::{checkpoint, Family, Model, Plain};
use crate::pipeline::{
    calibrate_ptq, evaluate, profile_activations, train, ActivationProfile, MetricRow, QuantConfig, TrainMode,
};
use crate::sensitivity::block_report;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Checkpoint written by `train` and read by the other verbs.
pub const CHECKPOINT: &str = "model.qmck";
pub const QAT_CHECKPOINT: &str = "model_qat.qmck";

#[derive(Debug, Parser)]
#[command(name = "qmlp", version, about = "Quantization toolkit for MLP-based vision models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a float model from scratch, or fine-tune with fake-quant when
    /// `train.mode = qat_finetune`.
    Train(RunArgs),
    /// Calibrate activation ranges and write the frozen qparams.
    Calibrate(RunArgs),
    /// Post-training quantization: calibrate, then score float and
    /// quantized models.
    Quantize(RunArgs),
    /// Score the float model.
    Eval(RunArgs),
    /// Hessian-trace sensitivity of token- and channel-mixing blocks.
    Sensitivity(SensitivityArgs),
    /// Per-edge activation ranges.
    Profile(ProfileArgs),
    /// Merge metric tables from several runs.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Override one config key, e.g. `quant.weight_bits=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluation workers. 1 is the reference mode.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SensitivityArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Hutchinson probes per block.
    #[arg(long, default_value_t = 16)]
    pub probes: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 0.99)]
    pub percentile: f64,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Metric tables to merge, in order.
    #[arg(required = true, value_name = "FILE")]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    /// Accepted for symmetry with the other verbs; only `output.format`
    /// is read from it.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Resolution failures split by who is at fault.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn resolve(config: Option<&Path>, set: &[String], seed: Option<u64>, out: Option<&Path>) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_config(&text).map_err(|e| e.at(p.display().to_string()))?
        }
        None => RunConfig::default(),
    };
    for s in set {
        cfg.apply_override(s).map_err(|e| Failure::Usage(format!("--set {s}: {e}")))?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output.dir = o.to_path_buf();
    }
    cfg.validate().map_err(|e| Failure::Usage(format!("invalid configuration: {e}")))?;
    Ok(cfg)
}

/// Train and test sets named by the config. Synthetic sets use the run
/// seed and a derived seed; IDX sets are truncated to the configured sizes.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let m = &cfg.model;
    let d = &cfg.data;
    let (train, test) = match d.source {
        DataSource::Synth => {
            if m.in_channels != 1 {
                return Err(Error::config("model.in_channels", "synthetic data has one channel"));
            }
            let task = d.synth_task();
            let tr = synth_dataset_with(&task, cfg.seed, d.train_size, m.classes, m.height, m.width)?;
            let te = synth_dataset_with(&task, cfg.seed ^ 0x7E57_5EED, d.test_size.max(m.classes), m.classes, m.height, m.width)?;
            (tr, te)
        }
        DataSource::Idx => {
            let tr = load_idx(&d.train_images, &d.train_labels)?;
            let te = load_idx(&d.test_images, &d.test_labels)?;
            (tr.slice(0, d.train_size), te.slice(0, d.test_size))
        }
    };
    let (train, test) = if d.normalize { (train.normalized(), test.normalized()) } else { (train, test) };
    let want = [m.in_channels, m.height, m.width];
    if train.image_shape() != want {
        return Err(Error::config(
            "model.height",
            format!("data images are {:?}, model expects {want:?}", train.image_shape()),
        ));
    }
    if train.classes() > m.classes {
        return Err(Error::config(
            "model.classes",
            format!("data has {} classes, model has {}", train.classes(), m.classes),
        ));
    }
    Ok((train, test))
}

/// Short model label used in metric tables.
pub fn model_label(cfg: &RunConfig) -> String {
    let m = &cfg.model;
    let mut s = format!("{}-{}-{}", m.family, m.norm, m.act);
    if m.family != Family::ConvMixer && m.groups > 1 {
        s.push_str(&format!("-g{}", m.groups));
    }
    s
}

fn report_path(cfg: &RunConfig, stem: &str) -> PathBuf {
    cfg.output.dir.join(format!("{stem}.{}", cfg.output.format.extension()))
}

fn load_model(cfg: &RunConfig, file: &str) -> Result<Model> {
    let path = cfg.output.dir.join(file);
    if !path.exists() {
        return Err(Error::contract(format!(
            "{} not found; run `qmlp train` with the same --out first",
            path.display()
        )));
    }
    let mut model = Model::new(&cfg.model, cfg.seed)?;
    model.load_state(&checkpoint::load(&path)?).map_err(|e| e.at(path.display().to_string()))?;
    Ok(model)
}

fn metric(cfg: &RunConfig, model: &Model, qc: &QuantConfig, top1: f64) -> MetricRow {
    MetricRow::new(
        &model_label(cfg),
        model.param_counts().total() as u64,
        model.flops_per_sample(),
        qc.weight_bits,
        qc.act_bits,
        top1,
    )
}

fn loss_report(loss: &[f64]) -> Report {
    let mut r = Report::new(&["epoch", "loss"]);
    for (e, l) in loss.iter().enumerate() {
        r.push(vec![(e + 1).into(), Cell::Float(*l)]).expect("two columns");
    }
    r
}

fn write(cfg: &RunConfig, stem: &str, report: &Report) -> Result<PathBuf> {
    let path = report_path(cfg, stem);
    write_report(report, &path, cfg.output.format)?;
    Ok(path)
}

fn run_train(cfg: &RunConfig, threads: usize) -> Result<Vec<PathBuf>> {
    let (train_set, test_set) = load_data(cfg)?;
    let fp = QuantConfig::full_precision();
    match cfg.train.mode {
        TrainMode::FromScratch => {
            let mut model = Model::new(&cfg.model, cfg.seed)?;
            let log = train(&mut model, &train_set, &cfg.train_config(), &mut Plain)?;
            let ck = cfg.output.dir.join(CHECKPOINT);
            checkpoint::save(&ck, &model.state())?;
            let acc = evaluate(&model, &Plain, &test_set, threads)?;
            Ok(vec![
                ck,
                write(cfg, "loss_curve", &loss_report(&log.epoch_loss))?,
                write(cfg, "train_metrics", &MetricRow::report(&[metric(cfg, &model, &fp, acc)]))?,
            ])
        }
        TrainMode::QatFinetune => {
            let model = load_model(cfg, CHECKPOINT)?;
            let ptq = calibrate_ptq(&model, &train_set, &cfg.quant)?;
            let ptq_acc = evaluate(&ptq.model, &ptq.quant, &test_set, threads)?;
            let mut qat = ptq.into_qat()?;
            let log = train(&mut qat.model, &train_set, &cfg.qat_config(), &mut qat.quant)?;
            let qat_acc = evaluate(&qat.model, &qat.quant, &test_set, threads)?;
            let ck = cfg.output.dir.join(QAT_CHECKPOINT);
            checkpoint::save(&ck, &qat.model.state())?;
            let rows = [metric(cfg, &model, &cfg.quant, ptq_acc), metric(cfg, &qat.model, &cfg.quant, qat_acc)];
            let mut r = MetricRow::report(&rows);
            r.columns.push("stage".into());
            r.rows[0].push("ptq".into());
            r.rows[1].push("qat".into());
            Ok(vec![
                ck,
                write(cfg, "loss_curve_qat", &loss_report(&log.epoch_loss))?,
                write(cfg, "qat_metrics", &r)?,
            ])
        }
    }
}

fn run_calibrate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let (train_set, _) = load_data(cfg)?;
    let model = load_model(cfg, CHECKPOINT)?;
    let qm = calibrate_ptq(&model, &train_set, &cfg.quant)?;
    let mut r = Report::new(&["edge", "layer", "site", "r_min", "r_max", "scale", "zero_point", "bits", "scheme"]);
    for (i, e) in qm.quant.edges().iter().enumerate() {
        let (lo, hi) = e.observer.finalize()?;
        let qp = e.qparams.as_ref().expect("frozen after calibration");
        r.push(vec![
            i.into(),
            e.layer.into(),
            e.site.as_str().into(),
            Cell::Float(lo),
            Cell::Float(hi),
            Cell::Float(qp.scale()),
            Cell::Int(qp.zero_point()),
            Cell::Int(qp.bits() as i64),
            qp.scheme().as_str().into(),
        ])?;
    }
    Ok(vec![write(cfg, "qparams", &r)?])
}

fn run_quantize(cfg: &RunConfig, threads: usize) -> Result<Vec<PathBuf>> {
    let (train_set, test_set) = load_data(cfg)?;
    let model = load_model(cfg, CHECKPOINT)?;
    let fp_acc = evaluate(&model, &Plain, &test_set, threads)?;
    let qm = calibrate_ptq(&model, &train_set, &cfg.quant)?;
    let q_acc = evaluate(&qm.model, &qm.quant, &test_set, threads)?;
    let rows = [
        metric(cfg, &model, &QuantConfig::full_precision(), fp_acc),
        metric(cfg, &model, &cfg.quant, q_acc),
    ];
    Ok(vec![write(cfg, "metrics", &MetricRow::report(&rows))?])
}

fn run_eval(cfg: &RunConfig, threads: usize) -> Result<Vec<PathBuf>> {
    let (_, test_set) = load_data(cfg)?;
    let model = load_model(cfg, CHECKPOINT)?;
    let acc = evaluate(&model, &Plain, &test_set, threads)?;
    let row = metric(cfg, &model, &QuantConfig::full_precision(), acc);
    Ok(vec![write(cfg, "eval", &MetricRow::report(&[row]))?])
}

fn run_sensitivity(cfg: &RunConfig, probes: usize) -> Result<Vec<PathBuf>> {
    let (train_set, _) = load_data(cfg)?;
    let model = load_model(cfg, CHECKPOINT)?;
    let rep = block_report(&model, &train_set, probes, cfg.seed)?;
    Ok(vec![write(cfg, "sensitivity", &rep.to_report())?])
}

fn run_profile(cfg: &RunConfig, p: f64) -> Result<Vec<PathBuf>> {
    let (_, test_set) = load_data(cfg)?;
    let model = load_model(cfg, CHECKPOINT)?;
    let prof = profile_activations(&model, &Plain, &test_set, p)?;
    Ok(vec![write(cfg, "profile", &ActivationProfile::report(&prof))?])
}

/// Concatenates metric tables, keeping the metric columns and tagging each
/// row with the file it came from.
pub fn merge_reports(inputs: &[PathBuf]) -> Result<Report> {
    let mut columns: Vec<&str> = MetricRow::COLUMNS.to_vec();
    columns.push("source");
    let mut out = Report::new(&columns);
    for path in inputs {
        let r = read_report(path)?;
        let idx: Vec<usize> = MetricRow::COLUMNS
            .iter()
            .map(|c| {
                r.column(c).ok_or_else(|| {
                    Error::Format(format!("{} lacks the `{c}` column of a metric table", path.display()))
                })
            })
            .collect::<Result<_>>()?;
        for row in &r.rows {
            let mut cells: Vec<Cell> = idx.iter().map(|&i| row[i].clone()).collect();
            cells.push(path.display().to_string().into());
            out.push(cells)?;
        }
    }
    Ok(out)
}

fn execute(cli: Cli) -> std::result::Result<(), Failure> {
    let files = match cli.command {
        Command::Report(a) => {
            let mut cfg = resolve(a.config.as_deref(), &a.set, None, Some(&a.out))?;
            if a.config.is_none() && a.set.is_empty() {
                cfg.output.dir = a.out.clone();
            }
            print!("{}", cfg.render());
            let merged = merge_reports(&a.inputs)?;
            print!("\n{}", merged.to_table());
            vec![write(&cfg, "report", &merged)?]
        }
        Command::Sensitivity(a) => {
            if a.probes == 0 {
                return Err(Failure::Usage("--probes must be at least 1".into()));
            }
            let cfg = resolve(Some(&a.run.config), &a.run.set, a.run.seed, a.run.out.as_deref())?;
            print!("{}", cfg.render());
            run_sensitivity(&cfg, a.probes)?
        }
        Command::Profile(a) => {
            if !(a.percentile > 0.5 && a.percentile <= 1.0) {
                return Err(Failure::Usage("--percentile must lie in (0.5, 1]".into()));
            }
            let cfg = resolve(Some(&a.run.config), &a.run.set, a.run.seed, a.run.out.as_deref())?;
            print!("{}", cfg.render());
            run_profile(&cfg, a.percentile)?
        }
        cmd => {
            let (a, verb) = match cmd {
                Command::Train(a) => (a, "train"),
                Command::Calibrate(a) => (a, "calibrate"),
                Command::Quantize(a) => (a, "quantize"),
                Command::Eval(a) => (a, "eval"),
                _ => unreachable!("handled above"),
            };
            if a.threads == 0 {
                return Err(Failure::Usage("--threads must be at least 1".into()));
            }
            let cfg = resolve(Some(&a.config), &a.set, a.seed, a.out.as_deref())?;
            print!("{}", cfg.render());
            match verb {
                "train" => run_train(&cfg, a.threads),
                "calibrate" => run_calibrate(&cfg),
                "quantize" => run_quantize(&cfg, a.threads),
                _ => run_eval(&cfg, a.threads),
            }
            .map_err(|e| e.at(verb))?
        }
    };
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

/// Parses `argv` (including the program name) and runs the verb.
/// Returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            use clap::CommandFactory;
            let _ = Cli::command().print_help();
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_verb_is_usage_error() {
        assert_eq!(dispatch(["qmlp", "frobnicate"]), EXIT_USAGE);
        assert_eq!(dispatch(["qmlp"]), EXIT_USAGE);
        assert_eq!(dispatch(["qmlp", "train"]), EXIT_USAGE);
    }

    #[test]
    fn missing_config_file_is_runtime_error() {
        assert_eq!(dispatch(["qmlp", "eval", "--config", "/nonexistent/x.cfg"]), EXIT_RUNTIME);
    }

    #[test]
    fn bad_override_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.cfg");
        std::fs::write(&cfg, "").unwrap();
        let c = cfg.to_str().unwrap();
        assert_eq!(dispatch(["qmlp", "eval", "--config", c, "--set", "quant.nope=1"]), EXIT_USAGE);
        assert_eq!(dispatch(["qmlp", "eval", "--config", c, "--set", "quant.weight_bits=9"]), EXIT_USAGE);
    }

    #[test]
    fn labels() {
        let mut c = RunConfig::default();
        assert_eq!(model_label(&c), "mixer-layernorm-gelu-g4");
        c.model.family = Family::ConvMixer;
        assert_eq!(model_label(&c), "convmixer-layernorm-gelu");
    }
}
