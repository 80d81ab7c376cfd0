use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use resad::features::{read_dataset, synth_dataset, write_dataset, FeatureDataset, LayerSpec, SynthSpec};
use resad::pipeline::verify::run_checks;
use resad::pipeline::{
    class_pools, draw_references, evaluate_with, train_with, write_score_maps, Checkpoint, EvalOptions, Manifest,
    RunConfig,
};
use resad::residual::{decorrelation_report, decorrelation_report_with};
use resad::{Error, Result};

/// Class-agnostic anomaly detection on residual feature maps.
#[derive(Parser)]
#[command(name = "resad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-class dataset.
    Synth(SynthArgs),
    /// Train on a dataset of known classes.
    Train(TrainArgs),
    /// Score a dataset against few-shot references of its own classes.
    Eval(EvalArgs),
    /// Print class-decorrelation statistics.
    Stats(StatsArgs),
    /// Run the built-in self-checks.
    Verify {
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    images_per_class: usize,
    #[arg(long, default_value_t = 0.2)]
    anomaly_fraction: f64,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Feature layer as HxWxC; repeat for several layers.
    #[arg(long = "layer", value_parser = parse_layer, default_values = ["16x16x8", "8x8x8"])]
    layers: Vec<LayerSpec>,
    #[arg(long, default_value_t = 5.0)]
    separation: f64,
    #[arg(long, default_value_t = 3.0)]
    magnitude: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Keep only these class ids, e.g. `0,1`.
    #[arg(long, value_delimiter = ',')]
    keep: Vec<u32>,
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` config file; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override `key=value`, applied after the file.
    #[arg(long = "set")]
    overrides: Vec<String>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RefArgs {
    /// Explicit reference image indices.
    #[arg(long, value_delimiter = ',', conflicts_with = "n_refs")]
    refs: Vec<usize>,
    /// Normal images drawn per class; defaults to the checkpoint's `n_fs`.
    #[arg(long)]
    n_refs: Option<usize>,
    /// Seed of the reference draw; defaults to the checkpoint's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    refs: RefArgs,
    #[arg(long)]
    report: PathBuf,
    /// Also write the score maps (`RSSM` file).
    #[arg(long)]
    maps: Option<PathBuf>,
    #[arg(long)]
    no_fdm: bool,
    #[arg(long)]
    no_mac: bool,
    #[arg(long)]
    fdm_alpha: Option<f64>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    /// Adds statistics of the constrained residuals.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    n_refs: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

/// Names the file in I/O errors.
fn at<T>(path: &Path, result: Result<T>) -> Result<T> {
    result.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn parse_layer(s: &str) -> std::result::Result<LayerSpec, String> {
    let parts: Vec<&str> = s.split('x').collect();
    let dims: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format!("expected HxWxC, got {s:?}"))?;
    match dims[..] {
        [h, w, c] => Ok(LayerSpec::new(h, w, c)),
        _ => Err(format!("expected HxWxC, got {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => eval(a),
        Command::Stats(a) => stats(a),
        Command::Verify { seed } => verify(seed),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let spec = SynthSpec {
        n_classes: a.classes,
        images_per_class: a.images_per_class,
        anomaly_fraction: a.anomaly_fraction,
        image_height: a.height,
        image_width: a.width,
        layers: a.layers,
        class_separation: a.separation,
        anomaly_magnitude: a.magnitude,
        seed: a.seed,
    };
    let mut ds = synth_dataset(&spec)?;
    if !a.keep.is_empty() {
        ds = ds.filter_classes(&a.keep);
        if ds.is_empty() {
            return Err(Error::Contract("--keep selected no images".into()));
        }
    }
    at(&a.out, write_dataset(&ds, &a.out))?;
    println!("wrote {} images to {}", ds.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::parse(&at(p, fs::read_to_string(p).map_err(Error::from))?)?,
        None => RunConfig::default(),
    };
    for o in overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = load_config(a.config.as_deref(), &a.overrides)?;
    let ds = at(&a.data, read_dataset(&a.data))?;
    let outcome = train_with(&ds, &cfg, |log| println!("{}", log.line()))?;
    at(&a.out, outcome.checkpoint.save(&a.out))?;
    let manifest = Manifest::new(&cfg, cfg.seed, &outcome.reference_indices());
    let path = at(&a.out, manifest.write_beside(&a.out))?;
    println!("wrote {} and {}", a.out.display(), path.display());
    Ok(ExitCode::SUCCESS)
}

fn references(ds: &FeatureDataset, cfg: &RunConfig, a: &RefArgs) -> Result<(Vec<usize>, u64)> {
    let seed = a.seed.unwrap_or(cfg.seed);
    if !a.refs.is_empty() {
        let mut refs = a.refs.clone();
        refs.sort_unstable();
        return Ok((refs, seed));
    }
    Ok((draw_references(ds, a.n_refs.unwrap_or(cfg.n_fs), seed)?, seed))
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let ck = at(&a.ckpt, Checkpoint::load(&a.ckpt))?;
    let ds = at(&a.data, read_dataset(&a.data))?;
    let (refs, seed) = references(&ds, &ck.config, &a.refs)?;
    let mut options = EvalOptions::from_config(&ck.config);
    options.use_fdm &= !a.no_fdm;
    options.use_mac &= !a.no_mac;
    if let Some(alpha) = a.fdm_alpha {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("fdm alpha {alpha} outside [0, 1]")));
        }
        options.fdm_alpha = alpha;
    }
    let ev = evaluate_with(&ck, &ds, &refs, &options)?;
    let mut report = ev.report.to_report();
    let _ = writeln!(report, "images_scored = {}", ev.scored.len());
    at(&a.report, fs::write(&a.report, &report).map_err(Error::from))?;
    at(&a.report, Manifest::new(&ck.config, seed, &refs).write_beside(&a.report))?;
    if let Some(path) = &a.maps {
        at(path, write_score_maps(path, &ev.maps))?;
    }
    print!("{report}");
    Ok(ExitCode::SUCCESS)
}

fn stats(a: StatsArgs) -> Result<ExitCode> {
    let ds = at(&a.data, read_dataset(&a.data))?;
    let refs = draw_references(&ds, a.n_refs, a.seed)?;
    let pools = class_pools(&ds, &refs)?;
    let mut sections = BTreeMap::new();
    sections.insert("initial", decorrelation_report(&ds, &pools, false)?);
    sections.insert("residual", decorrelation_report(&ds, &pools, true)?);
    if let Some(path) = &a.ckpt {
        let ck = at(path, Checkpoint::load(path))?;
        if ck.layers != ds.layers {
            return Err(Error::Dimension("dataset layers differ from the checkpoint's".into()));
        }
        let constrained =
            decorrelation_report_with(&ds, &pools, true, |l, map| ck.models[l].constraintor.constrain(map))?;
        sections.insert("constrained", constrained);
    }
    for stage in ["initial", "residual", "constrained"] {
        if let Some(s) = sections.get(stage) {
            for line in s.to_report().lines() {
                println!("{stage}.{line}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn verify(seed: u64) -> Result<ExitCode> {
    let checks = run_checks(seed);
    for c in &checks {
        println!("{}", c.line());
    }
    Ok(if checks.iter().all(|c| c.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
