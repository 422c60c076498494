//! Run directories: resolved config, manifest, metrics streams and
//! checkpoints for one training run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::metrics::IouReport;
use crate::synthdata::Dataset;
use crate::trainer::{StepRecord, TrainConfig, Trainer};

pub const METRICS_HEADER: &str = "step,lr,l_x,l_c,l_sc,l_tot";

/// SHA-256 of the config's JSON, framed like a git blob
/// (`blob <len>\0<bytes>`).
pub fn config_hash(cfg: &TrainConfig) -> Result<String> {
    let json = serde_json::to_string(cfg)?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", json.len()).as_bytes());
    h.update(json.as_bytes());
    Ok(h.finalize().iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").expect("writing to a String");
        s
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub seed: u64,
    pub config_hash: String,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub outputs: Outputs,
    pub status: RunStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    pub config: PathBuf,
    pub metrics: PathBuf,
    pub eval: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    NumericAbort,
    Failed,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: RunManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        if config_hash(&m.config)? != m.config_hash {
            return Err(Error::Config(format!(
                "{}: config hash does not match its config",
                path.display()
            )));
        }
        Ok(m)
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn metrics_row(r: &StepRecord) -> String {
    let l = &r.losses;
    format!("{},{},{},{},{},{}\n", r.step, r.lr, l.l_x, l.l_c, l.l_sc, l.l_tot)
}

pub fn eval_header(classes: usize) -> String {
    let ious: Vec<String> = (0..classes).map(|c| format!("iou_{c}")).collect();
    format!("step,variant,{},miou\n", ious.join(","))
}

/// Blank IoU cells mark classes absent from truth and prediction.
pub fn eval_row(step: usize, variant: &str, r: &IouReport) -> String {
    let ious: Vec<String> = r
        .per_class
        .iter()
        .map(|v| v.map_or_else(String::new, |v| v.to_string()))
        .collect();
    format!("{step},{variant},{},{}\n", ious.join(","), r.miou)
}

/// Short label of the loss toggles and EMA switches.
pub fn variant_label(cfg: &TrainConfig) -> String {
    let losses = match (cfg.consistency_weight() > 0.0, cfg.structured_weight() > 0.0) {
        (false, false) => "supervised",
        (true, false) => "consistency",
        (false, true) => "structured_only",
        (true, true) => "structured",
    };
    let mark = |b: bool| if b { 'O' } else { 'X' };
    format!("{losses}:{}/{}", mark(cfg.ema_teacher), mark(cfg.ema_eval))
}

/// Outcome of [`train_run`].
#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub final_eval: Option<IouReport>,
    /// Set when the run stopped early; the manifest records the status.
    pub error: Option<Error>,
}

/// Trains `cfg` into `out_dir`. The manifest is rewritten at the end with
/// the final status, even when training aborts.
pub fn train_run(cfg: &TrainConfig, out_dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let outputs = Outputs {
        config: "config.json".into(),
        metrics: "metrics.csv".into(),
        eval: "eval.csv".into(),
        checkpoints: Vec::new(),
    };
    let mut manifest = RunManifest {
        config: cfg.clone(),
        seed: cfg.seed,
        config_hash: config_hash(cfg)?,
        started_at: now(),
        finished_at: None,
        outputs,
        status: RunStatus::Running,
    };
    fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    write_manifest(out_dir, &manifest)?;

    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let mut evals = eval_header(cfg.dataset.classes);
    let label = variant_label(cfg);

    let result = (|| -> Result<IouReport> {
        let data = Dataset::generate(&cfg.dataset, cfg.data_seed)?;
        let mut t = Trainer::new(cfg.clone(), &data)?;
        while !t.finished() {
            let rec = t.step();
            let rec = match rec {
                Ok(r) => r,
                Err(e) => {
                    fs::write(out_dir.join("metrics.csv"), &metrics)?;
                    return Err(e);
                }
            };
            metrics.push_str(&metrics_row(&rec));
            let done = t.state.step;
            if cfg.eval_every > 0 && done % cfg.eval_every == 0 && !t.finished() {
                evals.push_str(&eval_row(done, &label, &t.evaluate()?));
            }
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && !t.finished() {
                let name = PathBuf::from(format!("checkpoint_step{done:06}.bin"));
                checkpoint::save(&out_dir.join(&name), &t.state)?;
                manifest.outputs.checkpoints.push(name);
            }
        }
        let report = t.evaluate()?;
        evals.push_str(&eval_row(t.state.step, &label, &report));
        fs::write(out_dir.join("metrics.csv"), &metrics)?;
        fs::write(out_dir.join("eval.csv"), &evals)?;
        let name = PathBuf::from("checkpoint_final.bin");
        checkpoint::save(&out_dir.join(&name), &t.state)?;
        manifest.outputs.checkpoints.push(name);
        Ok(report)
    })();

    manifest.finished_at = Some(now());
    let (final_eval, error) = match result {
        Ok(r) => {
            manifest.status = RunStatus::Completed;
            (Some(r), None)
        }
        Err(e) => {
            manifest.status = match e {
                Error::NonFinite { .. } => RunStatus::NumericAbort,
                _ => RunStatus::Failed,
            };
            (None, Some(e))
        }
    };
    write_manifest(out_dir, &manifest)?;
    Ok(RunOutcome {
        manifest,
        final_eval,
        error,
    })
}

fn write_manifest(dir: &Path, m: &RunManifest) -> Result<()> {
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(m)? + "\n")?;
    Ok(())
}
