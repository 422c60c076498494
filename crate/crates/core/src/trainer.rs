//! Semi-supervised training: a supervised step on one labeled scene plus a
//! teacher-guided step on one CutMix-composed unlabeled pair, followed by an
//! SGD update of the student and an EMA update of the teacher.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::Tape;
use crate::cutmix::{compose_image, compose_predictions, drop_pairs, generate_boxes, PairMode};
use crate::ema::EmaState;
use crate::error::{invalid, Error, Result};
use crate::losses::{
    consistency_loss_var, relaxed_cross_entropy_var, structured_consistency_box_var, total_loss, LossBreakdown,
    PredictionMap,
};
use crate::metrics::{ConfusionMatrix, IouReport};
use crate::model::{predict_params, Architecture, SegNet};
use crate::optim::{poly_lr, sgd_step, SgdParams, Velocity};
use crate::synthdata::{augment_pair, AugmentConfig, Dataset, DatasetConfig, SceneSample};
use crate::tensor::Tensor;

/// Hidden layer widths and kernel size; the output width is the class
/// count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32, 32],
            kernel: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Seeds weight init, sample order, augmentation and box sampling.
    pub seed: u64,
    /// Seeds the corpus, so runs with different `seed` share data.
    pub data_seed: u64,
    pub lr0: f64,
    pub power: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Passes over the labeled split; one step per labeled scene.
    pub epochs: usize,
    /// Supervised-only passes run before the main schedule, with their own
    /// learning-rate decay. The student that comes out of them initializes
    /// both the main-run student and its teacher.
    pub pretrain_epochs: usize,
    pub n_boxes: usize,
    pub n_active_boxes: usize,
    pub n_pair: usize,
    pub pair_mode: PairMode,
    pub lambda_c: f64,
    pub lambda_sc: f64,
    pub use_consistency: bool,
    pub use_structured: bool,
    /// Label-relaxation window of the supervised loss.
    pub window: usize,
    pub ema_decay: f64,
    /// Guessed labels come from EMA weights; otherwise from the current
    /// student weights.
    pub ema_teacher: bool,
    /// Evaluation uses EMA weights; otherwise student weights.
    pub ema_eval: bool,
    /// Steps between evaluations; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_seed: 0,
            lr0: 0.002,
            power: 1.0,
            weight_decay: 0.001,
            momentum: 0.9,
            epochs: 175,
            pretrain_epochs: 0,
            n_boxes: 32,
            n_active_boxes: 16,
            n_pair: 9000,
            pair_mode: PairMode::Ordered,
            lambda_c: 20.0,
            lambda_sc: 3.0,
            use_consistency: true,
            use_structured: true,
            window: 3,
            ema_decay: crate::ema::DEFAULT_DECAY,
            ema_teacher: true,
            ema_eval: true,
            eval_every: 0,
            checkpoint_every: 0,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_boxes == 0 || self.n_active_boxes == 0 || self.n_active_boxes > self.n_boxes {
            return bad(format!(
                "need 1 <= n_active_boxes <= n_boxes, got {} and {}",
                self.n_active_boxes, self.n_boxes
            ));
        }
        if self.n_pair == 0 {
            return bad("n_pair must be at least 1".into());
        }
        for (k, v) in [
            ("lambda_c", self.lambda_c),
            ("lambda_sc", self.lambda_sc),
            ("lr0", self.lr0),
            ("power", self.power),
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{k} must be finite and non-negative, got {v}"));
            }
        }
        if self.window.is_multiple_of(2) {
            return bad(format!("window must be odd, got {}", self.window));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must be in [0, 1], got {}", self.ema_decay));
        }
        self.dataset.validate()?;
        if self.unlabeled_active() && self.dataset.unlabeled < 2 {
            return bad("the unlabeled branch needs at least 2 unlabeled scenes".into());
        }
        if self.n_boxes > self.dataset.height * self.dataset.width {
            return bad(format!("n_boxes {} exceeds the pixel count", self.n_boxes));
        }
        self.architecture().validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn architecture(&self) -> Architecture {
        let mut widths = self.model.hidden.clone();
        widths.push(self.dataset.classes);
        Architecture {
            in_channels: 3,
            widths,
            kernel: self.model.kernel,
        }
    }

    pub fn max_steps(&self) -> usize {
        self.epochs * self.dataset.labeled
    }

    pub fn consistency_weight(&self) -> f64 {
        if self.use_consistency {
            self.lambda_c
        } else {
            0.0
        }
    }

    pub fn structured_weight(&self) -> f64 {
        if self.use_structured {
            self.lambda_sc
        } else {
            0.0
        }
    }

    /// Whether any unlabeled loss term contributes to the objective.
    pub fn unlabeled_active(&self) -> bool {
        self.consistency_weight() > 0.0 || self.structured_weight() > 0.0
    }

    /// Sets a top-level or dotted key (`dataset.labeled`) from a string. The
    /// value is parsed as JSON, falling back to a plain string.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        *slot = value;
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("`{key}`: {e}")))?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Everything recorded about one optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
    /// Sampled pairs per active box, in paste order.
    pub pair_counts: Vec<usize>,
    pub coverage: Option<f64>,
    pub unlabeled_forward: bool,
    pub wall_time_ms: f64,
}

/// The two unlabeled images of one step, before augmentation.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledPair<'a> {
    pub ua: &'a Tensor,
    pub ub: &'a Tensor,
}

/// Mutable state of a run between steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: SegNet,
    pub velocity: Velocity,
    pub ema: EmaState,
    pub step: usize,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(STREAM_INIT);
        let student = SegNet::init(&mut rng, cfg.architecture())?;
        let velocity = Velocity::zeros_like(student.params());
        let ema = EmaState::init(student.params(), cfg.ema_decay)?;
        Ok(Self {
            student,
            velocity,
            ema,
            step: 0,
        })
    }

    /// Weights that produce guessed labels.
    pub fn teacher_params(&self, cfg: &TrainConfig) -> Vec<Tensor> {
        if cfg.ema_teacher {
            self.ema.teacher().to_vec()
        } else {
            self.student.params().iter().map(Tensor::detached).collect()
        }
    }

    /// Weights scored by evaluation.
    pub fn eval_params(&self, cfg: &TrainConfig) -> &[Tensor] {
        if cfg.ema_eval {
            self.ema.teacher()
        } else {
            self.student.params()
        }
    }
}

const STREAM_INIT: u64 = 1;
const STREAM_LABELED_ORDER: u64 = 2;
const STREAM_UNLABELED_ORDER: u64 = 3;
const STREAM_UNLABELED_AUG: u64 = 4;
const STREAM_PAIRS: u64 = 5;

/// Random sources of the unlabeled branch. Pair sampling has its own
/// stream so that toggling the structured loss leaves augmentation and box
/// draws unchanged.
#[derive(Debug, Clone)]
pub struct StepRngs {
    pub augment: ChaCha8Rng,
    pub pairs: ChaCha8Rng,
}

impl StepRngs {
    pub fn new(seed: u64) -> Self {
        let stream = |s| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Self {
            augment: stream(STREAM_UNLABELED_AUG),
            pairs: stream(STREAM_PAIRS),
        }
    }
}

/// One optimization step.
///
/// The supervised loss always runs. The unlabeled branch runs only when a
/// loss term that depends on it has positive weight; its random draws come
/// from `rngs`, which nothing else touches.
pub fn train_step(
    state: &mut TrainState,
    labeled: &SceneSample,
    unlabeled: Option<UnlabeledPair<'_>>,
    cfg: &TrainConfig,
    rngs: &mut StepRngs,
) -> Result<StepRecord> {
    let started = Instant::now();
    let step = state.step;
    let lr = poly_lr(step, cfg.max_steps(), cfg.lr0, cfg.power)?;
    let (wc, wsc) = (cfg.consistency_weight(), cfg.structured_weight());

    let mut tape = Tape::new();
    let x = tape.constant(labeled.image.clone());
    let (logits, vars) = state.student.forward(&mut tape, x)?;
    let probs = tape.softmax(logits)?;
    let l_x_var = relaxed_cross_entropy_var(&mut tape, probs, &labeled.labels, cfg.window)?;
    let mut objective = l_x_var;

    let (mut l_c, mut l_sc) = (0.0, 0.0);
    let mut pair_counts = Vec::new();
    let mut coverage = None;
    let unlabeled_forward = cfg.unlabeled_active();
    if unlabeled_forward {
        let pair = unlabeled.ok_or_else(|| invalid("unlabeled loss enabled but no unlabeled pair given"))?;
        let aug = augment_pair(&mut rngs.augment, pair.ua, pair.ub, &cfg.augment)?;
        let teacher = state.teacher_params(cfg);
        let arch = state.student.arch();
        let pa = teacher_prediction(step, arch, &teacher, &aug.ua.image)?;
        let pb = teacher_prediction(step, arch, &teacher, &aug.ub.image)?;
        let (h, w) = (pa.height(), pa.width());
        let boxes = generate_boxes(&mut rngs.augment, h, w, cfg.n_boxes)?.with_active(cfg.n_active_boxes)?;
        coverage = Some(boxes.coverage());
        let guessed = compose_predictions(&pa, &pb, &boxes)?;
        let mixed = compose_image(&aug.ua.image, &aug.ub.image, &boxes)?;

        let um = tape.constant(mixed);
        let (mixed_logits, mixed_vars) = state.student.forward(&mut tape, um)?;
        let student_mixed = tape.softmax(mixed_logits)?;
        if wc > 0.0 {
            let lc = consistency_loss_var(&mut tape, student_mixed, &guessed)?;
            l_c = tape.value(lc).item();
            let weighted = tape.scale(lc, wc);
            objective = tape.add(objective, weighted)?;
        }
        if wsc > 0.0 {
            let pairs = drop_pairs(&boxes, cfg.n_pair, cfg.pair_mode, &mut rngs.pairs)?;
            pair_counts = pairs.counts();
            let lsc = structured_consistency_box_var(&mut tape, student_mixed, &guessed, &boxes, &pairs)?;
            l_sc = tape.value(lsc.loss).item();
            let weighted = tape.scale(lsc.loss, wsc);
            objective = tape.add(objective, weighted)?;
        }
        let l_x = tape.value(l_x_var).item();
        let losses = checked_breakdown(step, l_x, l_c, l_sc, wc, wsc)?;
        let grads = tape.backward(objective)?;
        state.student.accumulate_grads(&grads, &vars)?;
        // The mixed-image forward registered its own parameter leaves.
        state.student.accumulate_grads(&grads, &mixed_vars)?;
        return finish(state, cfg, lr, losses, pair_counts, coverage, true, started);
    }

    let l_x = tape.value(l_x_var).item();
    let losses = checked_breakdown(step, l_x, l_c, l_sc, wc, wsc)?;
    let grads = tape.backward(objective)?;
    state.student.accumulate_grads(&grads, &vars)?;
    finish(state, cfg, lr, losses, pair_counts, coverage, false, started)
}

fn teacher_prediction(step: usize, arch: &Architecture, teacher: &[Tensor], image: &Tensor) -> Result<PredictionMap> {
    let probs = predict_params(arch, teacher, image)?;
    if !probs.is_finite() {
        return Err(Error::NonFinite {
            step,
            what: "teacher prediction".into(),
        });
    }
    PredictionMap::new(probs)
}

fn checked_breakdown(step: usize, l_x: f64, l_c: f64, l_sc: f64, wc: f64, wsc: f64) -> Result<LossBreakdown> {
    for (what, v) in [("l_x", l_x), ("l_c", l_c), ("l_sc", l_sc)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: format!("{what} = {v}"),
            });
        }
    }
    total_loss(l_x, l_c, l_sc, wc, wsc)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    state: &mut TrainState,
    cfg: &TrainConfig,
    lr: f64,
    losses: LossBreakdown,
    pair_counts: Vec<usize>,
    coverage: Option<f64>,
    unlabeled_forward: bool,
    started: Instant,
) -> Result<StepRecord> {
    let step = state.step;
    let hp = SgdParams {
        lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    sgd_step(state.student.params_mut(), hp, &mut state.velocity)?;
    if let Some(i) = state.student.params().iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite {
            step,
            what: format!("parameter tensor {i} after update"),
        });
    }
    // The EMA is kept even when guessed labels use student weights, so that
    // evaluation can still select it.
    state.ema.update(state.student.params())?;
    if let Some(i) = state
        .ema
        .teacher()
        .iter()
        .position(|t| t.grad().is_some() || t.requires_grad())
    {
        return Err(invalid(format!("teacher tensor {i} holds a gradient")));
    }
    state.step += 1;
    Ok(StepRecord {
        step,
        lr,
        losses,
        pair_counts,
        coverage,
        unlabeled_forward,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Argmax predictions of `params` over `samples`, scored against their
/// labels.
pub fn evaluate(
    arch: &Architecture,
    params: &[Tensor],
    samples: &[SceneSample],
) -> Result<(ConfusionMatrix, IouReport)> {
    if samples.is_empty() {
        return Err(invalid("evaluation set is empty"));
    }
    let mut cm = ConfusionMatrix::new(arch.classes())?;
    for s in samples {
        let probs = PredictionMap::new(predict_params(arch, params, &s.image)?)?;
        cm.accumulate(&probs.argmax(), &s.labels)?;
    }
    let report = cm.iou()?;
    Ok((cm, report))
}

/// Drives [`train_step`] over a dataset: labeled scenes in a freshly
/// shuffled order each epoch, unlabeled scenes paired off from a shuffled
/// cycle.
pub struct Trainer<'d> {
    pub cfg: TrainConfig,
    pub state: TrainState,
    data: &'d Dataset,
    labeled_rng: ChaCha8Rng,
    unlabeled_rng: ChaCha8Rng,
    step_rngs: StepRngs,
    labeled_queue: Vec<usize>,
    unlabeled_queue: Vec<usize>,
}

impl<'d> Trainer<'d> {
    /// Fresh student, after the configured pre-training stage if any.
    pub fn new(cfg: TrainConfig, data: &'d Dataset) -> Result<Self> {
        let student = pretrain(&cfg, data)?;
        Self::from_student(cfg, data, student)
    }

    /// Starts the main schedule from `student`, with the teacher a copy of
    /// it and zero momentum.
    pub fn from_student(cfg: TrainConfig, data: &'d Dataset, student: SegNet) -> Result<Self> {
        cfg.validate()?;
        if data.config() != &cfg.dataset {
            return Err(Error::Config("dataset does not match the config".into()));
        }
        let stream = |s| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(s);
            r
        };
        if student.arch() != &cfg.architecture() {
            return Err(Error::Config(
                "initial student does not match the configured architecture".into(),
            ));
        }
        let state = TrainState {
            velocity: Velocity::zeros_like(student.params()),
            ema: EmaState::init(student.params(), cfg.ema_decay)?,
            student,
            step: 0,
        };
        Ok(Self {
            state,
            labeled_rng: stream(STREAM_LABELED_ORDER),
            unlabeled_rng: stream(STREAM_UNLABELED_ORDER),
            step_rngs: StepRngs::new(cfg.seed),
            labeled_queue: Vec::new(),
            unlabeled_queue: Vec::new(),
            cfg,
            data,
        })
    }

    pub fn finished(&self) -> bool {
        self.state.step >= self.cfg.max_steps()
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        if self.finished() {
            return Err(invalid("step budget exhausted"));
        }
        if self.labeled_queue.is_empty() {
            self.labeled_queue = (0..self.data.labeled().len()).collect();
            self.labeled_queue.shuffle(&mut self.labeled_rng);
            self.labeled_queue.reverse();
        }
        let li = self.labeled_queue.pop().expect("refilled above");
        let pair = if self.cfg.unlabeled_active() {
            if self.unlabeled_queue.len() < 2 {
                self.unlabeled_queue = (0..self.data.unlabeled().len()).collect();
                self.unlabeled_queue.shuffle(&mut self.unlabeled_rng);
            }
            let a = self.unlabeled_queue.pop().expect("at least two queued");
            let b = self.unlabeled_queue.pop().expect("at least two queued");
            Some(UnlabeledPair {
                ua: self.data.unlabeled()[a].image(),
                ub: self.data.unlabeled()[b].image(),
            })
        } else {
            None
        };
        train_step(
            &mut self.state,
            &self.data.labeled()[li],
            pair,
            &self.cfg,
            &mut self.step_rngs,
        )
    }

    pub fn evaluate(&self) -> Result<IouReport> {
        let arch = self.state.student.arch();
        Ok(evaluate(arch, self.state.eval_params(&self.cfg), self.data.validation())?.1)
    }
}

/// The seeded initial student after `cfg.pretrain_epochs` supervised-only
/// epochs. Depends only on the seed, data, model and optimizer settings, so
/// variants of one seed share it.
pub fn pretrain(cfg: &TrainConfig, data: &Dataset) -> Result<SegNet> {
    let init = TrainState::init(cfg)?.student;
    if cfg.pretrain_epochs == 0 {
        return Ok(init);
    }
    let stage = TrainConfig {
        epochs: cfg.pretrain_epochs,
        pretrain_epochs: 0,
        use_consistency: false,
        use_structured: false,
        ..cfg.clone()
    };
    let mut t = Trainer::from_student(stage, data, init)?;
    while !t.finished() {
        t.step()?;
    }
    Ok(t.state.student)
}

/// Trains `cfg` to completion and returns the final validation report.
pub fn train_and_evaluate(cfg: &TrainConfig, data: &Dataset) -> Result<IouReport> {
    train_from(cfg, data, pretrain(cfg, data)?)
}

fn train_from(cfg: &TrainConfig, data: &Dataset, student: SegNet) -> Result<IouReport> {
    let mut t = Trainer::from_student(cfg.clone(), data, student)?;
    while !t.finished() {
        t.step()?;
    }
    t.evaluate()
}

/// A named modification of the base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub use_consistency: bool,
    pub use_structured: bool,
    pub ema_teacher: bool,
    pub ema_eval: bool,
}

impl Variant {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            use_consistency: self.use_consistency,
            use_structured: self.use_structured,
            ema_teacher: self.ema_teacher,
            ema_eval: self.ema_eval,
            ..base.clone()
        }
    }
}

/// Supervised only, plus consistency, plus structured consistency.
pub fn loss_variants() -> Vec<Variant> {
    [
        ("supervised", false, false),
        ("consistency", true, false),
        ("structured", true, true),
    ]
    .into_iter()
    .map(|(name, c, s)| Variant {
        name: name.into(),
        use_consistency: c,
        use_structured: s,
        ema_teacher: true,
        ema_eval: true,
    })
    .collect()
}

/// EMA on/off for the guessed-label teacher and for evaluation, named
/// `teacher/eval` with `O` for on and `X` for off.
pub fn ema_grid() -> Vec<Variant> {
    [(false, false), (false, true), (true, false), (true, true)]
        .into_iter()
        .map(|(t, e)| {
            let mark = |b: bool| if b { 'O' } else { 'X' };
            Variant {
                name: format!("{}/{}", mark(t), mark(e)),
                use_consistency: true,
                use_structured: true,
                ema_teacher: t,
                ema_eval: e,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub miou: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.miou.iter().sum::<f64>() / self.miou.len() as f64
    }
}

/// Trains every variant on every seed over one shared corpus.
pub fn run_ablation(base: &TrainConfig, variants: &[Variant], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(invalid("ablation needs at least one seed"));
    }
    let data = Dataset::generate(&base.dataset, base.data_seed)?;
    let initial = seeds
        .iter()
        .map(|&seed| pretrain(&TrainConfig { seed, ..base.clone() }, &data))
        .collect::<Result<Vec<_>>>()?;
    variants
        .iter()
        .map(|v| {
            let miou = seeds
                .iter()
                .zip(&initial)
                .map(|(&seed, student)| {
                    let cfg = TrainConfig { seed, ..v.apply(base) };
                    let report = train_from(&cfg, &data, student.clone())?;
                    log::info!("variant {} seed {seed}: mIoU {:.4}", v.name, report.miou);
                    Ok(report.miou)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(AblationRow {
                variant: v.name.clone(),
                seeds: seeds.to_vec(),
                miou,
            })
        })
        .collect()
}

/// `variant,seeds,mean_miou,per_seed_miou`; per-seed values are
/// `;`-separated in seed order.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,seeds,mean_miou,per_seed_miou\n");
    for r in rows {
        let per: Vec<String> = r.miou.iter().map(|m| m.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.variant,
            r.seeds.len(),
            r.mean(),
            per.join(";")
        ));
    }
    out
}
