//! Finite-difference verification of the loss gradients.
//!
//! Each loss is evaluated as a function of a random logit field `[S, S, C]`
//! passed through softmax, and its tape gradient is compared entry by entry
//! with a central difference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardFault, Tape, Var};
use crate::cutmix::{drop_pairs, generate_boxes, BoxSet, PairMode, PairSet};
use crate::error::{invalid, Result};
use crate::losses::{
    consistency_loss_var, relaxed_cross_entropy_var, structured_consistency_box_var, LabelMap, PredictionMap,
};
use crate::tensor::Tensor;

/// Denominator floor of the relative error, for gradients that vanish.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub first_seed: u64,
    pub seeds: u64,
    pub size: usize,
    pub classes: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            first_seed: 0,
            seeds: 20,
            size: 8,
            classes: 4,
            step: 1e-3,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    RelaxedCeW1,
    RelaxedCeW3,
    Consistency,
    StructuredConsistency,
}

impl LossName {
    pub const ALL: [LossName; 4] = [
        LossName::RelaxedCeW1,
        LossName::RelaxedCeW3,
        LossName::Consistency,
        LossName::StructuredConsistency,
    ];

    pub fn label(self) -> &'static str {
        match self {
            LossName::RelaxedCeW1 => "relaxed_ce_w1",
            LossName::RelaxedCeW3 => "relaxed_ce_w3",
            LossName::Consistency => "consistency",
            LossName::StructuredConsistency => "structured_consistency",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCheck {
    pub loss: LossName,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checks: Vec<LossCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Fixed targets of one seed: labels with some ignore pixels, a guessed
/// label map, and a box set with its full pair lists.
struct Fixture {
    labels: LabelMap,
    guessed: PredictionMap,
    boxes: BoxSet,
    pairs: PairSet,
}

impl Fixture {
    fn new(rng: &mut ChaCha8Rng, size: usize, classes: usize) -> Result<Self> {
        let labels: Vec<u8> = (0..size * size)
            .map(|_| {
                if rng.random_bool(0.1) {
                    LabelMap::IGNORE
                } else {
                    rng.random_range(0..classes) as u8
                }
            })
            .collect();
        let labels = LabelMap::new(size, size, labels)?;
        let guessed = PredictionMap::from_logits(&random_logits(rng, size, classes))?;
        let boxes = generate_boxes(rng, size, size, 4)?.with_active(2)?;
        // Budget above |T|^2 for any region: every pair is kept.
        let pairs = drop_pairs(&boxes, size.pow(4), PairMode::Ordered, rng)?;
        Ok(Self {
            labels,
            guessed,
            boxes,
            pairs,
        })
    }

    fn loss(&self, tape: &mut Tape, which: LossName, logits: Var) -> Result<Var> {
        let probs = tape.softmax(logits)?;
        match which {
            LossName::RelaxedCeW1 => relaxed_cross_entropy_var(tape, probs, &self.labels, 1),
            LossName::RelaxedCeW3 => relaxed_cross_entropy_var(tape, probs, &self.labels, 3),
            LossName::Consistency => consistency_loss_var(tape, probs, &self.guessed),
            LossName::StructuredConsistency => {
                Ok(structured_consistency_box_var(tape, probs, &self.guessed, &self.boxes, &self.pairs)?.loss)
            }
        }
    }

    fn value(&self, which: LossName, logits: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let z = tape.constant(logits.clone());
        let l = self.loss(&mut tape, which, z)?;
        Ok(tape.value(l).item())
    }
}

fn random_logits(rng: &mut ChaCha8Rng, size: usize, classes: usize) -> Tensor {
    let data = (0..size * size * classes)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    Tensor::new(&[size, size, classes], data).expect("positive extents")
}

/// Relative error of one loss on one seed, in the max norm:
/// `max_i |a_i - n_i| / max_i |n_i|` for analytic `a` and numeric `n`.
pub fn check_one(cfg: &GradcheckConfig, which: LossName, seed: u64, fault: Option<BackwardFault>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fixture = Fixture::new(&mut rng, cfg.size, cfg.classes)?;
    let logits = random_logits(&mut rng, cfg.size, cfg.classes).with_grad();

    let mut tape = Tape::with_fault(fault);
    let z = tape.leaf(&logits);
    let l = fixture.loss(&mut tape, which, z)?;
    let grads = tape.backward(l)?;
    let analytic = grads
        .get(z)
        .ok_or_else(|| invalid("logits received no gradient"))?
        .to_vec();

    let (mut max_diff, mut max_numeric): (f64, f64) = (0.0, 0.0);
    let mut probe = logits.detached();
    for (i, &a) in analytic.iter().enumerate() {
        let x = probe.data()[i];
        probe.data_mut()[i] = x + cfg.step;
        let plus = fixture.value(which, &probe)?;
        probe.data_mut()[i] = x - cfg.step;
        let minus = fixture.value(which, &probe)?;
        probe.data_mut()[i] = x;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        max_diff = max_diff.max((a - numeric).abs());
        max_numeric = max_numeric.max(numeric.abs());
    }
    Ok(max_diff / max_numeric.max(REL_FLOOR))
}

/// Runs every loss over `cfg.seeds` seeds. `fault` corrupts one backward
/// rule, as a negative control.
pub fn run(cfg: &GradcheckConfig, fault: Option<BackwardFault>) -> Result<GradcheckReport> {
    if cfg.seeds == 0 || cfg.size < 8 || cfg.classes < 2 || cfg.step.is_nan() || cfg.step <= 0.0 {
        return Err(invalid(
            "gradcheck needs seeds >= 1, size >= 8, classes >= 2 and a positive step",
        ));
    }
    let checks = LossName::ALL
        .iter()
        .map(|&loss| {
            let mut max_rel_error: f64 = 0.0;
            let mut worst_seed = 0;
            for seed in cfg.first_seed..cfg.first_seed + cfg.seeds {
                let e = check_one(cfg, loss, seed, fault)?;
                if e > max_rel_error || e.is_nan() {
                    max_rel_error = e;
                    worst_seed = seed;
                }
            }
            Ok(LossCheck {
                loss,
                max_rel_error,
                worst_seed,
                passed: max_rel_error < cfg.tolerance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport { checks })
}
