//! `segconsist` command-line entry point.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or configuration error,
//! 3 training aborted on a non-finite value.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use segconsist::autodiff::{BackwardFault, OpKind};
use segconsist::cutmix::{compose_image, generate_boxes};
use segconsist::gradcheck::{self, GradcheckConfig};
use segconsist::losses::{LabelMap, PredictionMap};
use segconsist::oracle::{self, PairBudget};
use segconsist::run::{self, eval_header, eval_row, variant_label, RunManifest, RunStatus};
use segconsist::synthdata::{write_pgm, write_ppm, Dataset};
use segconsist::trainer::{ablation_csv, ema_grid, evaluate, loss_variants, run_ablation, TrainConfig};
use segconsist::{checkpoint, Error};

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "segconsist",
    version,
    about = "Semi-supervised segmentation with structured consistency on synthetic scenes",
    after_help = "Any other `--key value` flag overrides that config key; nested keys use dots, e.g. `--dataset.labeled 10`."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Defaults to `runs/<command>-seed<seed>`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one run into a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Replay the config recorded in a run manifest.
        #[arg(long, conflicts_with = "config")]
        manifest: Option<PathBuf>,
    },
    /// Score a checkpoint on the validation split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Loss-term ablation and EMA placement grid over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Number of seeds per variant, counting up from `--seed`.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, value_enum, default_value_t = Grid::Both)]
        grid: Grid,
    },
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Corrupt one backward rule, as `op:scale` (e.g. `softmax:1.5`).
        #[arg(long)]
        fault: Option<String>,
    },
    /// Sampled structured loss against brute-force enumeration.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        seeds: u64,
    },
    /// Write scenes, a CutMix composition and optional predictions as
    /// PPM/PGM images.
    Dump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Grid {
    Loss,
    Ema,
    Both,
}

/// Flags the parser knows; every other `--key` is a config override.
const KNOWN_FLAGS: &[&str] = &[
    "config",
    "seed",
    "out-dir",
    "manifest",
    "checkpoint",
    "seeds",
    "grid",
    "fault",
    "count",
    "help",
    "version",
];

type Overrides = Vec<(String, String)>;

fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides), String> {
    let mut kept = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            kept.push(a);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if name.is_empty() || KNOWN_FLAGS.contains(&name.as_str()) {
            kept.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| format!("override `--{name}` needs a value"))?,
        };
        overrides.push((name, value));
    }
    Ok((kept, overrides))
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite { .. } => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn load_config(common: &Common, overrides: &Overrides) -> Result<TrainConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            TrainConfig::from_json(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    apply(&mut cfg, common, overrides)?;
    Ok(cfg)
}

fn apply(cfg: &mut TrainConfig, common: &Common, overrides: &Overrides) -> Result<(), Failure> {
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(())
}

fn out_dir(common: &Common, command: &str, seed: u64) -> PathBuf {
    common
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{command}-seed{seed}")))
}

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> Result<(), Failure> {
    fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(dir.join(name), text + "\n")?;
    Ok(())
}

fn cmd_train(common: &Common, manifest: Option<&Path>, overrides: &Overrides) -> Result<u8, Failure> {
    let cfg = match manifest {
        Some(p) => {
            let mut cfg = RunManifest::load(p)?.config;
            apply(&mut cfg, common, overrides)?;
            cfg
        }
        None => load_config(common, overrides)?,
    };
    let dir = out_dir(common, "train", cfg.seed);
    let outcome = run::train_run(&cfg, &dir)?;
    println!("run directory: {}", dir.display());
    println!("config hash: {}", outcome.manifest.config_hash);
    if let Some(report) = &outcome.final_eval {
        println!("final mIoU: {:.6}", report.miou);
    }
    match (outcome.manifest.status, outcome.error) {
        (RunStatus::Completed, _) => Ok(0),
        (_, Some(e)) => Err(e.into()),
        (status, None) => Err(usage(format!("run ended with status {status:?}"))),
    }
}

fn cmd_evaluate(common: &Common, ckpt: &Path, overrides: &Overrides) -> Result<u8, Failure> {
    let cfg = load_config(common, overrides)?;
    let state = checkpoint::load(ckpt)?;
    if state.student.arch() != &cfg.architecture() {
        return Err(usage("checkpoint architecture does not match the config"));
    }
    let data = Dataset::generate(&cfg.dataset, cfg.data_seed)?;
    let (_, report) = evaluate(state.student.arch(), state.eval_params(&cfg), data.validation())?;
    let csv = eval_header(cfg.dataset.classes) + &eval_row(state.step, &variant_label(&cfg), &report);
    print!("{csv}");
    let dir = out_dir(common, "evaluate", cfg.seed);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("eval.csv"), csv)?;
    Ok(0)
}

fn cmd_ablate(common: &Common, seeds: u64, grid: Grid, overrides: &Overrides) -> Result<u8, Failure> {
    if seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let base = load_config(common, overrides)?;
    let dir = out_dir(common, "ablate", base.seed);
    fs::create_dir_all(&dir)?;
    let seed_list: Vec<u64> = (base.seed..base.seed + seeds).collect();
    let mut tables = Vec::new();
    if grid != Grid::Ema {
        tables.push(("ablation_loss.csv", loss_variants()));
    }
    if grid != Grid::Loss {
        tables.push(("ablation_ema.csv", ema_grid()));
    }
    for (name, variants) in tables {
        let rows = run_ablation(&base, &variants, &seed_list)?;
        let csv = ablation_csv(&rows);
        println!("{name}:\n{csv}");
        fs::write(dir.join(name), csv)?;
    }
    write_json(&dir, "config.json", &base)?;
    Ok(0)
}

fn parse_fault(spec: &str) -> Result<BackwardFault, Failure> {
    let (op, scale) = spec
        .split_once(':')
        .ok_or_else(|| usage(format!("fault `{spec}` must look like op:scale")))?;
    let op: OpKind = op.parse()?;
    let scale: f64 = scale.parse().map_err(|_| usage(format!("bad fault scale `{scale}`")))?;
    Ok(BackwardFault { op, scale })
}

fn cmd_gradcheck(common: &Common, seeds: u64, fault: Option<&str>, overrides: &Overrides) -> Result<u8, Failure> {
    let cfg = load_config(common, overrides)?;
    let fault = fault.map(parse_fault).transpose()?;
    let gc = GradcheckConfig {
        first_seed: cfg.seed,
        seeds,
        classes: cfg.dataset.classes,
        ..GradcheckConfig::default()
    };
    let report = gradcheck::run(&gc, fault)?;
    for c in &report.checks {
        println!(
            "{:<24} max relative error {:.3e}  {}",
            c.loss.label(),
            c.max_rel_error,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    write_json(&out_dir(common, "gradcheck", cfg.seed), "gradcheck.json", &report)?;
    if report.passed() {
        return Ok(0);
    }
    for c in report.checks.iter().filter(|c| !c.passed) {
        eprintln!(
            "gradient check failed for {}: error {:.3e} (seed {}) exceeds {:.0e}",
            c.loss.label(),
            c.max_rel_error,
            c.worst_seed,
            gc.tolerance
        );
    }
    Ok(EXIT_CHECK_FAILED)
}

const ORACLE_TOLERANCE: f64 = 1e-10;

fn cmd_oracle(common: &Common, seeds: u64, overrides: &Overrides) -> Result<u8, Failure> {
    let cfg = load_config(common, overrides)?;
    let report = oracle::compare_partitions(cfg.seed, seeds, 6, 3, 3)?;
    println!(
        "6x6 images, 3 classes, 3 tiling boxes, {} seeds: max |sampled - enumerated| = {:.3e}",
        seeds, report.max_abs_deviation
    );
    let budget = PairBudget::new(1024, 2048, 32, 16, 9000);
    println!(
        "2048x1024, N=32, N_box=16, N_pair=9000: {} sampled pairs; {:.3e} for per-box enumeration ({:.0}x), {:.3e} for the full image ({:.3e}x)",
        budget.sampled_pairs,
        budget.box_enumeration_pairs,
        budget.reduction_vs_boxes(),
        budget.full_image_pairs,
        budget.reduction_vs_full()
    );
    let dir = out_dir(common, "oracle", cfg.seed);
    write_json(
        &dir,
        "oracle.json",
        &serde_json::json!({ "comparison": report, "budget": budget }),
    )?;
    if report.max_abs_deviation < ORACLE_TOLERANCE {
        Ok(0)
    } else {
        eprintln!(
            "oracle deviation {:.3e} exceeds {ORACLE_TOLERANCE:.0e}",
            report.max_abs_deviation
        );
        Ok(EXIT_CHECK_FAILED)
    }
}

fn cmd_dump(common: &Common, ckpt: Option<&Path>, count: usize, overrides: &Overrides) -> Result<u8, Failure> {
    let cfg = load_config(common, overrides)?;
    let dir = out_dir(common, "dump", cfg.seed);
    fs::create_dir_all(&dir)?;
    let data = Dataset::generate(&cfg.dataset, cfg.data_seed)?;
    let classes = cfg.dataset.classes;
    for (i, s) in data.labeled().iter().take(count).enumerate() {
        write_ppm(&dir.join(format!("labeled_{i:03}.ppm")), &s.image)?;
        write_pgm(&dir.join(format!("labeled_{i:03}_labels.pgm")), &s.labels, classes)?;
    }
    for (i, s) in data.unlabeled().iter().take(count).enumerate() {
        write_ppm(&dir.join(format!("unlabeled_{i:03}.ppm")), s.image())?;
    }
    if data.unlabeled().len() >= 2 {
        let (h, w) = (cfg.dataset.height, cfg.dataset.width);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let boxes = generate_boxes(&mut rng, h, w, cfg.n_boxes)?;
        let mixed = compose_image(data.unlabeled()[0].image(), data.unlabeled()[1].image(), &boxes)?;
        write_ppm(&dir.join("cutmix_mixed.ppm"), &mixed)?;
        let mask = LabelMap::new(h, w, boxes.mask().to_vec())?;
        write_pgm(&dir.join("cutmix_mask.pgm"), &mask, 2)?;
        write_json(&dir, "cutmix_boxes.json", &boxes.record())?;
    }
    if let Some(p) = ckpt {
        let state = checkpoint::load(p)?;
        for (i, s) in data.validation().iter().take(count).enumerate() {
            let probs = PredictionMap::new(segconsist::model::predict_params(
                state.student.arch(),
                state.eval_params(&cfg),
                &s.image,
            )?)?;
            write_ppm(&dir.join(format!("validation_{i:03}.ppm")), &s.image)?;
            write_pgm(&dir.join(format!("validation_{i:03}_labels.pgm")), &s.labels, classes)?;
            write_pgm(
                &dir.join(format!("validation_{i:03}_predicted.pgm")),
                &probs.argmax(),
                classes,
            )?;
        }
    }
    println!("wrote images to {}", dir.display());
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().collect();
    let (kept, overrides) = match split_overrides(args) {
        Ok(x) => x,
        Err(m) => {
            eprintln!("error: {m}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let cli = match Cli::try_parse_from(kept) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Train { common, manifest } => cmd_train(common, manifest.as_deref(), &overrides),
        Command::Evaluate { common, checkpoint } => cmd_evaluate(common, checkpoint, &overrides),
        Command::Ablate { common, seeds, grid } => cmd_ablate(common, *seeds, *grid, &overrides),
        Command::Gradcheck { common, seeds, fault } => cmd_gradcheck(common, *seeds, fault.as_deref(), &overrides),
        Command::Oracle { common, seeds } => cmd_oracle(common, *seeds, &overrides),
        Command::Dump {
            common,
            checkpoint,
            count,
        } => cmd_dump(common, checkpoint.as_deref(), *count, &overrides),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
