//! `acm`: synthesize data, train, segment, evaluate, sweep and check gradients.

use std::error::Error as StdError;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use acm_core::adjoint::GradcheckProblem;
use acm_core::config;
use acm_core::io::{load_image, save_mask, save_normalized, write_metrics_csv, DatasetManifest, Split};
use acm_core::predictor::{load_checkpoint, save_checkpoint};
use acm_core::sweep::{run_sweep_with, write_sweep_csv, SweepSpec, SweepVariable};
use acm_core::synth::{generate_synthetic, Style, SynthConfig};
use acm_core::train::{evaluate, segment, train_with, write_log_csv, TrainConfig};

type CliResult = Result<(), Box<dyn StdError>>;

const MODEL_FILE: &str = "model.acmp";
const CONFIG_FILE: &str = "train.cfg";
const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Parser, Debug)]
#[command(name = "acm", version, about = "Trainable localized level-set segmentation", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with a manifest.csv
    Synth(SynthArgs),
    /// Train a model on the train split of a dataset
    Train(TrainArgs),
    /// Segment one image and write the mask and the predicted maps
    Segment(SegmentArgs),
    /// Score a model on one split of a dataset
    Eval(EvalArgs),
    /// Train and evaluate once per value of one setting
    Sweep(SweepArgs),
    /// Compare analytic evolution gradients with finite differences
    Gradcheck(GradcheckArgs),
}

/// Settings shared by every command that runs the evolution.
#[derive(Args, Debug, Default)]
struct Settings {
    /// key = value settings file, applied before --set
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one setting, e.g. --set steps=30 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_setting)]
    set: Vec<(String, String)>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Number of images
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Image side in pixels, a multiple of 8
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// disks, rects or huts
    #[arg(long, default_value = "rects", value_parser = parse_style)]
    style: Style,
    /// Noise standard deviation (default depends on the style)
    #[arg(long)]
    sigma: Option<f64>,
    /// Images in the test split (default: a quarter of --count)
    #[arg(long)]
    test_count: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory or manifest file
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.acmp, train.cfg and train_log.csv
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    settings: Settings,
    /// Number of epochs (same as --set epochs=N)
    #[arg(long)]
    epochs: Option<usize>,
    /// Score the test split after validated epochs (see val_every)
    #[arg(long)]
    validate: bool,
    /// Do not print per-epoch progress
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    model: PathBuf,
    /// Input PNG
    #[arg(long)]
    image: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Settings; defaults to train.cfg next to the model when present
    #[command(flatten)]
    settings: Settings,
    /// Only write the mask
    #[arg(long)]
    no_maps: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory or manifest file
    #[arg(long)]
    data: PathBuf,
    /// Output directory for metrics.csv
    #[arg(long)]
    out: PathBuf,
    /// train or test
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Settings; defaults to train.cfg next to the model when present
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Dataset directory or manifest file
    #[arg(long)]
    data: PathBuf,
    /// Output directory for sweep_<variable>.csv
    #[arg(long)]
    out: PathBuf,
    /// filter_size (f) or iterations (steps)
    #[arg(long, value_parser = parse_variable)]
    variable: SweepVariable,
    /// Comma-separated values, e.g. 10,30,60,90
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
    #[command(flatten)]
    settings: Settings,
    /// Number of epochs per run (same as --set epochs=N)
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Side of the random square problem
    #[arg(long, default_value_t = 16)]
    size: usize,
    /// Seed of the random problem and of the probe positions
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probes per input (phi0, lambda1, lambda2)
    #[arg(long, default_value_t = 50)]
    probes: usize,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Evolution settings on top of steps=5, half_window=2, nu=0.1
    #[command(flatten)]
    settings: Settings,
}

fn parse_setting(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    let (k, v) = (k.trim(), v.trim());
    if !(config::KEYS.contains(&k) || k == "f" || k == "l") {
        return Err(format!("unknown key {k:?}; known keys: {}", config::KEYS.join(", ")));
    }
    if v.is_empty() {
        return Err(format!("empty value for {k}"));
    }
    Ok((k.to_string(), v.to_string()))
}

fn parse_style(s: &str) -> Result<Style, String> {
    Style::parse(s).ok_or_else(|| format!("style must be disks, rects or huts, got {s:?}"))
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("split must be train or test, got {s:?}"))
}

fn parse_variable(s: &str) -> Result<SweepVariable, String> {
    SweepVariable::parse(s).map_err(|e| e.to_string())
}

impl Settings {
    /// `base`, then the config file (or `fallback` if none was given and it
    /// exists), then every --set.
    fn resolve(&self, mut base: TrainConfig, fallback: Option<&Path>) -> Result<TrainConfig, Box<dyn StdError>> {
        let file = self
            .config
            .clone()
            .or_else(|| fallback.filter(|p| p.is_file()).map(Path::to_path_buf));
        if let Some(path) = file {
            let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            config::apply(&mut base, &text).map_err(|e| format!("{}: {e}", path.display()))?;
        }
        for (k, v) in &self.set {
            config::set(&mut base, 0, k, v).map_err(|e| format!("--set {k}={v}: {e}"))?;
        }
        base.validate()?;
        Ok(base)
    }
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    Ok(())
}

fn run_synth(a: SynthArgs) -> CliResult {
    let mut cfg = SynthConfig::new(a.count, a.size, a.seed, a.style);
    cfg.sigma = a.sigma;
    if let Some(t) = a.test_count {
        cfg.test_count = t;
    }
    cfg.validate()?;
    create_dir(&a.out)?;
    let manifest = generate_synthetic(&a.out, &cfg)?;
    let test = manifest.entries.iter().filter(|e| e.split == Split::Test).count();
    println!(
        "wrote {} images ({} train, {} test) to {}",
        manifest.entries.len(),
        manifest.entries.len() - test,
        test,
        a.out.display()
    );
    Ok(())
}

fn run_train(a: TrainArgs) -> CliResult {
    let mut cfg = a.settings.resolve(TrainConfig::default(), None)?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
        cfg.validate()?;
    }
    let manifest = DatasetManifest::read(&a.data)?;
    let train_set = manifest.load(Split::Train)?;
    let val_set = if a.validate { manifest.load(Split::Test)? } else { Vec::new() };
    create_dir(&a.out)?;
    std::fs::write(a.out.join(CONFIG_FILE), config::render(&cfg))?;
    let quiet = a.quiet;
    let (params, log) = train_with(&train_set, &val_set, &cfg, |e| {
        if !quiet {
            let mut line = format!("epoch {:>4}  lr {:.3e}  loss {:.4}", e.epoch, e.lr, e.train_loss);
            if let (Some(m), Some(b)) = (e.val_miou, e.val_boundf) {
                line.push_str(&format!("  val miou {m:.4}  boundf {b:.4}"));
            }
            eprintln!("{line}");
        }
    })?;
    save_checkpoint(&params, a.out.join(MODEL_FILE))?;
    write_log_csv(a.out.join("train_log.csv"), &log)?;
    println!("wrote {}", a.out.join(MODEL_FILE).display());
    Ok(())
}

fn sibling_config(model: &Path) -> PathBuf {
    model.with_file_name(CONFIG_FILE)
}

fn run_segment(a: SegmentArgs) -> CliResult {
    let cfg = a.settings.resolve(TrainConfig::default(), Some(&sibling_config(&a.model)))?;
    let params = load_checkpoint(&a.model)?;
    let image = load_image(&a.image)?;
    let seg = segment(&image, &params, &cfg)?;
    create_dir(&a.out)?;
    let stem = a.image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
    save_mask(&seg.mask, a.out.join(format!("{stem}_mask.png")))?;
    if !a.no_maps {
        save_normalized(&seg.output.phi0, a.out.join(format!("{stem}_phi0.png")))?;
        save_normalized(&seg.maps.lambda1, a.out.join(format!("{stem}_lambda1.png")))?;
        save_normalized(&seg.maps.lambda2, a.out.join(format!("{stem}_lambda2.png")))?;
    }
    println!("wrote {}", a.out.join(format!("{stem}_mask.png")).display());
    Ok(())
}

fn run_eval(a: EvalArgs) -> CliResult {
    let cfg = a.settings.resolve(TrainConfig::default(), Some(&sibling_config(&a.model)))?;
    let params = load_checkpoint(&a.model)?;
    let samples = DatasetManifest::read(&a.data)?.load(a.split)?;
    let ev = evaluate(&samples, &params, &cfg)?;
    create_dir(&a.out)?;
    write_metrics_csv(a.out.join("metrics.csv"), &ev.rows)?;
    let m = ev.mean;
    println!(
        "{} images  miou {:.4}  dice {:.4}  wcov {:.4}  boundf {:.4}",
        ev.rows.len(),
        m.miou,
        m.dice,
        m.wcov,
        m.boundf
    );
    Ok(())
}

fn run_sweep(a: SweepArgs) -> CliResult {
    let mut base = a.settings.resolve(TrainConfig::default(), None)?;
    if let Some(e) = a.epochs {
        base.epochs = e;
    }
    let spec = SweepSpec {
        variable: a.variable,
        values: a.values,
        base,
    };
    spec.validate()?;
    let manifest = DatasetManifest::read(&a.data)?;
    let train_set = manifest.load(Split::Train)?;
    let test = manifest.load(Split::Test)?;
    create_dir(&a.out)?;
    let rows = run_sweep_with(&spec, &train_set, &test, |r| {
        eprintln!("{} = {:>3}  miou {:.4}", spec.variable.as_str(), r.value, r.report.miou);
    })?;
    let path = a.out.join(format!("sweep_{}.csv", spec.variable.as_str()));
    write_sweep_csv(&path, spec.variable, &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Returns whether the check passed.
fn run_gradcheck(a: GradcheckArgs) -> Result<bool, Box<dyn StdError>> {
    let mut base = TrainConfig::default();
    base.evolution.steps = 5;
    base.evolution.half_window = 2;
    base.evolution.nu = 0.1;
    let cfg = a.settings.resolve(base, None)?.evolution;
    if a.size < 4 {
        return Err("gradcheck needs --size of at least 4".into());
    }
    let problem = GradcheckProblem::random(a.size, a.seed);
    let report = problem.check(&cfg, a.probes, a.step, a.seed)?;
    let [p, l1, l2] = report.class_errors;
    println!("phi0 {p:.3e}  lambda1 {l1:.3e}  lambda2 {l2:.3e}");
    println!("max_rel_error {:.3e}", report.max_rel_error);
    Ok(report.max_rel_error < GRADCHECK_TOLERANCE)
}

fn run(argv: Vec<String>) -> ExitCode {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Segment(a) => run_segment(a),
        Command::Eval(a) => run_eval(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Gradcheck(a) => match run_gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => Err(format!("gradient check failed: tolerance {GRADCHECK_TOLERANCE:e}").into()),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn main() -> ExitCode {
    run(std::env::args().collect())
}
