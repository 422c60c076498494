//! Supervised and unsupervised loss terms.
//!
//! Every differentiable loss has a `*_var` form that records onto a [`Tape`]
//! and takes the student probabilities as a [`Var`]; targets (labels, guessed
//! labels) are plain values and never receive gradient. The value-level
//! wrappers evaluate the same code on a throwaway tape.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cutmix::{BoxSet, PairSet};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Floor applied inside the log of the relaxed cross entropy.
pub const LOG_FLOOR: f64 = 1e-12;

/// Largest image (in pixels) the all-pairs structured loss will accept.
pub const FULL_STRUCTURED_CAP: usize = 256;

/// Per-pixel class probabilities, `[H, W, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap {
    probs: Tensor,
}

impl PredictionMap {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.shape().len() != 3 {
            return Err(invalid(format!(
                "prediction map must be [H, W, C], got {:?}",
                probs.shape()
            )));
        }
        for r in 0..probs.rows() {
            let row = probs.row(r);
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| p.is_nan() || p < 0.0) {
                return Err(invalid(format!("pixel {r} is not a probability vector (sum {s})")));
            }
        }
        Ok(Self {
            probs: probs.detached(),
        })
    }

    /// Softmax over the class axis of `[H, W, C]` logits.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone());
        let p = tape.softmax(l)?;
        Self::new(tape.value(p).clone())
    }

    pub fn uniform(height: usize, width: usize, classes: usize) -> Self {
        Self {
            probs: Tensor::full(&[height, width, classes], 1.0 / classes as f64),
        }
    }

    pub(crate) fn from_tensor_unchecked(probs: Tensor) -> Self {
        Self { probs }
    }

    pub fn height(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[2]
    }

    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        self.probs.row(i)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.probs
    }

    /// Per-pixel argmax (lowest class index on ties).
    pub fn argmax(&self) -> LabelMap {
        let labels = (0..self.pixels())
            .map(|i| {
                let row = self.pixel(i);
                let mut best = 0;
                for (c, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap {
            height: self.height(),
            width: self.width(),
            labels,
        }
    }
}

/// Per-pixel class indices; [`LabelMap::IGNORE`] marks unscored pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub const IGNORE: u8 = u8::MAX;

    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Shape {
                op: "label map",
                lhs: vec![height, width],
                rhs: vec![labels.len()],
            });
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Checks every non-ignore label is below `classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&l| l != Self::IGNORE && l as usize >= classes)
        {
            Some(l) => Err(invalid(format!("label {l} out of range for {classes} classes"))),
            None => Ok(()),
        }
    }
}

/// Weights and values of every loss term for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_x: f64,
    pub l_c: f64,
    pub l_sc: f64,
    pub l_u: f64,
    pub l_tot: f64,
    pub lambda_c: f64,
    pub lambda_sc: f64,
}

/// `L_u = lambda_c * L_c + lambda_sc * L_sc`, `L_tot = L_x + L_u`.
pub fn total_loss(l_x: f64, l_c: f64, l_sc: f64, lambda_c: f64, lambda_sc: f64) -> Result<LossBreakdown> {
    for (name, v) in [
        ("l_x", l_x),
        ("l_c", l_c),
        ("l_sc", l_sc),
        ("lambda_c", lambda_c),
        ("lambda_sc", lambda_sc),
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(invalid(format!("{name} must be finite and non-negative, got {v}")));
        }
    }
    let l_u = lambda_c * l_c + lambda_sc * l_sc;
    Ok(LossBreakdown {
        l_x,
        l_c,
        l_sc,
        l_u,
        l_tot: l_x + l_u,
        lambda_c,
        lambda_sc,
    })
}

fn check_map_shape(op: &'static str, shape: &[usize], h: usize, w: usize) -> Result<()> {
    if shape.len() != 3 || shape[0] != h || shape[1] != w {
        return Err(Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![h, w],
        });
    }
    Ok(())
}

/// Indicator `[H, W, C]` of the classes present in each pixel's `w x w`
/// label window (clipped at the border, ignore pixels skipped). Rows of
/// ignored pixels are left empty.
pub fn window_class_mask(labels: &LabelMap, classes: usize, window: usize) -> Result<Tensor> {
    if window.is_multiple_of(2) {
        return Err(invalid(format!("relaxation window must be odd, got {window}")));
    }
    labels.validate(classes)?;
    let (h, w) = (labels.height(), labels.width());
    let r = window / 2;
    let mut mask = Tensor::zeros(&[h, w, classes]);
    let data = mask.data_mut();
    for y in 0..h {
        for x in 0..w {
            if labels.get(y, x) == LabelMap::IGNORE {
                continue;
            }
            let row = &mut data[(y * w + x) * classes..][..classes];
            for wy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for wx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    let l = labels.get(wy, wx);
                    if l != LabelMap::IGNORE {
                        row[l as usize] = 1.0;
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Boundary-relaxed cross entropy: per pixel `-log sum_{c in N_w(p)} P(c)`,
/// averaged over non-ignore pixels. `w = 1` is the ordinary cross entropy.
pub fn relaxed_cross_entropy_var(tape: &mut Tape, probs: Var, labels: &LabelMap, window: usize) -> Result<Var> {
    let shape = tape.value(probs).shape().to_vec();
    check_map_shape("relaxed_cross_entropy", &shape, labels.height(), labels.width())?;
    let valid: Vec<usize> = labels
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != LabelMap::IGNORE)
        .map(|(i, _)| i)
        .collect();
    if valid.is_empty() {
        return Err(invalid("relaxed_cross_entropy: every pixel is ignored"));
    }
    let mask = window_class_mask(labels, shape[2], window)?;
    let m = tape.constant(mask);
    let selected = tape.mul(probs, m)?;
    let mass = tape.sum_last_axis(selected);
    let logs = tape.log_clamped(mass, LOG_FLOOR);
    let picked = tape.gather(logs, valid)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -1.0))
}

pub fn relaxed_cross_entropy(probs: &PredictionMap, labels: &LabelMap, window: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.tensor().clone());
    let l = relaxed_cross_entropy_var(&mut tape, p, labels, window)?;
    Ok(tape.value(l).item())
}

/// Per-pixel relaxed cross entropy; `None` at ignored pixels.
pub fn relaxed_cross_entropy_per_pixel(
    probs: &PredictionMap,
    labels: &LabelMap,
    window: usize,
) -> Result<Vec<Option<f64>>> {
    check_map_shape(
        "relaxed_cross_entropy",
        probs.tensor().shape(),
        labels.height(),
        labels.width(),
    )?;
    let mask = window_class_mask(labels, probs.classes(), window)?;
    Ok((0..probs.pixels())
        .map(|i| {
            (labels.labels()[i] != LabelMap::IGNORE).then(|| {
                let mass: f64 = probs.pixel(i).iter().zip(mask.row(i)).map(|(p, m)| p * m).sum();
                -mass.max(LOG_FLOOR).ln()
            })
        })
        .collect())
}

/// Mean over all pixels of the squared L2 distance between the student's
/// and the guessed label's class vectors.
pub fn consistency_loss_var(tape: &mut Tape, student: Var, guessed: &PredictionMap) -> Result<Var> {
    let shape = tape.value(student).shape().to_vec();
    if shape != guessed.tensor().shape() {
        return Err(Error::Shape {
            op: "consistency_loss",
            lhs: shape,
            rhs: guessed.tensor().shape().to_vec(),
        });
    }
    let t = tape.constant(guessed.tensor().clone());
    let d = tape.sub(student, t)?;
    let sq = tape.square(d);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / guessed.pixels() as f64))
}

pub fn consistency_loss(student: &PredictionMap, guessed: &PredictionMap) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(student.tensor().clone());
    let l = consistency_loss_var(&mut tape, s, guessed)?;
    Ok(tape.value(l).item())
}

/// `a . b / (|a| |b|)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "cosine_similarity",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(invalid("cosine_similarity: zero-norm vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Structured consistency over every ordered pixel pair of the image:
/// `1/(HW)^2 sum_i sum_j (a^s_ij - a^t_ij)^2`. Quadratic in the pixel count,
/// so it is refused above [`FULL_STRUCTURED_CAP`] pixels.
pub fn structured_consistency_full(student: &PredictionMap, teacher: &PredictionMap) -> Result<f64> {
    if student.tensor().shape() != teacher.tensor().shape() {
        return Err(Error::Shape {
            op: "structured_consistency_full",
            lhs: student.tensor().shape().to_vec(),
            rhs: teacher.tensor().shape().to_vec(),
        });
    }
    let n = student.pixels();
    if n > FULL_STRUCTURED_CAP {
        return Err(Error::OracleCap {
            cap: FULL_STRUCTURED_CAP,
            pixels: n,
        });
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let s = cosine_similarity(student.pixel(i), student.pixel(j))?;
            let t = cosine_similarity(teacher.pixel(i), teacher.pixel(j))?;
            total += (s - t) * (s - t);
        }
    }
    Ok(total / (n * n) as f64)
}

/// Result of the box-restricted structured loss.
#[derive(Debug, Clone, Copy)]
pub struct BoxLoss {
    pub loss: Var,
    /// Active boxes with a non-empty pair list (the averaging divisor).
    pub boxes_used: usize,
}

/// Box-restricted, pair-sampled structured consistency. For every active
/// box with a non-empty pair list, the mean of `(a^s_ij - a^t_ij)^2` over
/// its sampled pairs; averaged over those boxes. Student similarities come
/// from `student` (probabilities of the mixed image), teacher similarities
/// from the guessed label at the same pixels.
pub fn structured_consistency_box_var(
    tape: &mut Tape,
    student: Var,
    guessed: &PredictionMap,
    boxset: &BoxSet,
    pairs: &PairSet,
) -> Result<BoxLoss> {
    let shape = tape.value(student).shape().to_vec();
    if shape != guessed.tensor().shape() {
        return Err(Error::Shape {
            op: "structured_consistency_box",
            lhs: shape,
            rhs: guessed.tensor().shape().to_vec(),
        });
    }
    check_map_shape("structured_consistency_box", &shape, boxset.height(), boxset.width())?;

    let teacher_unit = unit_rows(guessed.tensor())?;
    let student_unit = tape.row_normalize(student)?;
    let mut terms = Vec::new();
    for bp in pairs.boxes().iter().filter(|b| !b.pairs.is_empty()) {
        let (is, js): (Vec<usize>, Vec<usize>) = bp.pairs.iter().copied().unzip();
        let target: Vec<f64> = is
            .iter()
            .zip(&js)
            .map(|(&i, &j)| dot(teacher_unit.row(i), teacher_unit.row(j)))
            .collect();
        let gi = tape.gather_rows(student_unit, is)?;
        let gj = tape.gather_rows(student_unit, js)?;
        let prod = tape.mul(gi, gj)?;
        let a_s = tape.sum_last_axis(prod);
        let a_t = tape.constant(Tensor::from_vec(target));
        let d = tape.sub(a_s, a_t)?;
        let sq = tape.square(d);
        terms.push(tape.mean(sq));
    }
    if terms.is_empty() {
        log::warn!("structured consistency: every active box has an empty pair list");
        return Ok(BoxLoss {
            loss: tape.constant(Tensor::scalar(0.0)),
            boxes_used: 0,
        });
    }
    let b = terms.len();
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(BoxLoss {
        loss: tape.scale(acc, 1.0 / b as f64),
        boxes_used: b,
    })
}

pub fn structured_consistency_box(
    student: &PredictionMap,
    guessed: &PredictionMap,
    boxset: &BoxSet,
    pairs: &PairSet,
) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(student.tensor().clone());
    let out = structured_consistency_box_var(&mut tape, s, guessed, boxset, pairs)?;
    Ok(tape.value(out.loss).item())
}

fn unit_rows(t: &Tensor) -> Result<Tensor> {
    let c = t.last_dim();
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(invalid("zero-norm prediction vector"));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::new(t.shape(), data)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cutmix::{drop_pairs, BoxSet, PairMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> PredictionMap {
        let logits = Tensor::new(
            &[h, w, c],
            (0..h * w * c).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        PredictionMap::from_logits(&logits).unwrap()
    }

    fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> LabelMap {
        LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..c as u8)).collect()).unwrap()
    }

    fn one_hot(h: usize, w: usize, c: usize, class: usize) -> PredictionMap {
        let mut t = Tensor::zeros(&[h, w, c]);
        for r in 0..h * w {
            t.data_mut()[r * c + class] = 1.0;
        }
        PredictionMap::new(t).unwrap()
    }

    #[test]
    fn prediction_map_validation() {
        assert!(PredictionMap::new(Tensor::full(&[2, 2, 2], 0.6)).is_err());
        assert!(PredictionMap::new(Tensor::full(&[2, 2, 2], 0.5)).is_ok());
        assert!(PredictionMap::new(Tensor::full(&[4, 2], 0.5)).is_err());
    }

    #[test]
    fn relaxed_ce_with_unit_window_is_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let p = random_map(&mut rng, 5, 7, 4);
            let l = random_labels(&mut rng, 5, 7, 4);
            let standard: f64 = (0..35).map(|i| -p.pixel(i)[l.labels()[i] as usize].ln()).sum::<f64>() / 35.0;
            assert!((relaxed_cross_entropy(&p, &l, 1).unwrap() - standard).abs() <= 1e-12);
        }
    }

    #[test]
    fn relaxed_ce_on_homogeneous_labels_is_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_map(&mut rng, 6, 6, 3);
        let l = LabelMap::filled(6, 6, 2);
        let ce = relaxed_cross_entropy(&p, &l, 1).unwrap();
        for w in [3, 5, 7] {
            assert!((relaxed_cross_entropy(&p, &l, w).unwrap() - ce).abs() <= 1e-12);
        }
    }

    #[test]
    fn relaxed_ce_hand_example() {
        let p = PredictionMap::uniform(2, 2, 3);
        let l = LabelMap::new(2, 2, vec![0, 1, 0, 1]).unwrap();
        let v = relaxed_cross_entropy(&p, &l, 3).unwrap();
        assert!((v + (2.0f64 / 3.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn relaxed_ce_errors_and_clamp() {
        let p = PredictionMap::uniform(2, 2, 3);
        let all_ignored = LabelMap::filled(2, 2, LabelMap::IGNORE);
        assert!(relaxed_cross_entropy(&p, &all_ignored, 3).is_err());
        assert!(relaxed_cross_entropy(&p, &LabelMap::filled(2, 2, 0), 2).is_err());
        assert!(relaxed_cross_entropy(&p, &LabelMap::filled(2, 2, 3), 1).is_err());
        let zero_mass = one_hot(2, 2, 3, 1);
        let v = relaxed_cross_entropy(&zero_mass, &LabelMap::filled(2, 2, 0), 1).unwrap();
        assert!((v + LOG_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn relaxed_ce_skips_ignored_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_map(&mut rng, 1, 3, 2);
        let l = LabelMap::new(1, 3, vec![0, LabelMap::IGNORE, 1]).unwrap();
        let expected = -(p.pixel(0)[0].ln() + p.pixel(2)[1].ln()) / 2.0;
        assert!((relaxed_cross_entropy(&p, &l, 1).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn consistency_examples() {
        let a = one_hot(3, 4, 2, 0);
        let b = one_hot(3, 4, 2, 1);
        assert_eq!(consistency_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(consistency_loss(&a, &b).unwrap(), 2.0);
        assert!(consistency_loss(&a, &one_hot(3, 3, 2, 0)).is_err());
    }

    #[test]
    fn consistency_matches_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let s = random_map(&mut rng, 3, 3, 3);
            let t = random_map(&mut rng, 3, 3, 3);
            let mut acc = 0.0;
            for i in 0..9 {
                for c in 0..3 {
                    let d = s.pixel(i)[c] - t.pixel(i)[c];
                    acc += d * d;
                }
            }
            assert!((consistency_loss(&s, &t).unwrap() - acc / 9.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn full_structured_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_map(&mut rng, 4, 4, 3);
        assert!(structured_consistency_full(&s, &s).unwrap() < 1e-24);
        let one = random_map(&mut rng, 1, 1, 3);
        let other = random_map(&mut rng, 1, 1, 3);
        assert!(structured_consistency_full(&one, &other).unwrap() < 1e-24);
        let big = PredictionMap::uniform(17, 16, 2);
        assert!(matches!(
            structured_consistency_full(&big, &big),
            Err(Error::OracleCap { cap: 256, pixels: 272 })
        ));
    }

    #[test]
    fn box_structured_zero_at_fixpoint_and_single_pixel_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_map(&mut rng, 8, 8, 3);
        let t = random_map(&mut rng, 8, 8, 3);
        let boxes = BoxSet::from_rects(8, 8, &[(0, 0, 4, 4), (4, 4, 1, 1)]).unwrap();
        let pairs = drop_pairs(&boxes, 9000, PairMode::Ordered, &mut rng).unwrap();
        assert_eq!(structured_consistency_box(&s, &s, &boxes, &pairs).unwrap(), 0.0);

        let single = BoxSet::from_rects(8, 8, &[(4, 4, 1, 1)]).unwrap();
        let pairs = drop_pairs(&single, 9000, PairMode::Ordered, &mut rng).unwrap();
        assert!(structured_consistency_box(&s, &t, &single, &pairs).unwrap() < 1e-24);
    }

    #[test]
    fn box_structured_with_no_pairs_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_map(&mut rng, 8, 8, 3);
        let t = random_map(&mut rng, 8, 8, 3);
        // The first box is entirely covered by the second; only it is active.
        let boxes = BoxSet::from_rects(8, 8, &[(2, 2, 2, 2), (0, 0, 2, 2), (2, 2, 3, 3)])
            .unwrap()
            .with_active(3)
            .unwrap();
        let pairs = drop_pairs(&boxes, 9000, PairMode::Ordered, &mut rng).unwrap();
        assert!(pairs.boxes()[0].pairs.is_empty());
        let mut tape = Tape::new();
        let sv = tape.constant(s.tensor().clone());
        let out = structured_consistency_box_var(&mut tape, sv, &t, &boxes, &pairs).unwrap();
        assert_eq!(out.boxes_used, 2);

        let hidden = BoxSet::from_rects(8, 8, &[(2, 2, 2, 2), (2, 2, 3, 3)]).unwrap();
        let mut only_first = drop_pairs(&hidden, 9000, PairMode::Ordered, &mut rng).unwrap();
        only_first.retain_boxes(|b| b.paste_index == 1);
        assert_eq!(structured_consistency_box(&s, &t, &hidden, &only_first).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(1.0, 0.0, 0.0, 20.0, 3.0).unwrap().l_tot, 1.0);
        let b = total_loss(0.0, 0.1, 0.01, 20.0, 3.0).unwrap();
        assert!((b.l_u - 2.03).abs() < 1e-12 && (b.l_tot - 2.03).abs() < 1e-12);
        let b = total_loss(0.5, 0.0, 0.02, 20.0, 3.0).unwrap();
        assert!((b.l_tot - 0.56).abs() < 1e-12);
        assert!(total_loss(-0.1, 0.0, 0.0, 20.0, 3.0).is_err());
        assert!(total_loss(0.1, f64::NAN, 0.0, 20.0, 3.0).is_err());
    }

    #[test]
    fn window_mask_is_monotone_in_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let p = random_map(&mut rng, 6, 5, 4);
            let l = random_labels(&mut rng, 6, 5, 4);
            let narrow = relaxed_cross_entropy_per_pixel(&p, &l, 1).unwrap();
            let wide = relaxed_cross_entropy_per_pixel(&p, &l, 3).unwrap();
            for (n, w) in narrow.iter().zip(&wide) {
                assert!(w.unwrap() <= n.unwrap());
            }
        }
    }
}
