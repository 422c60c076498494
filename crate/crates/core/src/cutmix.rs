//! Multi-box CutMix geometry.
//!
//! Boxes are pasted in order from image `u_b` onto image `u_a`. A pixel
//! belongs to the effective region of the last box pasted over it, so the
//! regions are disjoint and tile the mask. Only the last `n_active` boxes
//! take part in the structured loss, each with at most `N_pair` sampled
//! pixel pairs.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::losses::PredictionMap;
use crate::tensor::Tensor;

pub const COVERAGE_RANGE: (f64, f64) = (0.45, 0.55);
pub const MAX_ATTEMPTS: usize = 100;

/// Relative spread of box side lengths around their mean.
const SIDE_SPREAD: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutBox {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    /// 1-based position in the paste order.
    pub paste_index: usize,
}

impl CutBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

/// Serializable description of a [`BoxSet`], enough to rebuild it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSetRecord {
    pub height: usize,
    pub width: usize,
    pub n_active: usize,
    pub seed: Option<u64>,
    pub boxes: Vec<CutBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    height: usize,
    width: usize,
    boxes: Vec<CutBox>,
    n_active: usize,
    /// 1 where the pixel comes from `u_b`.
    mask: Vec<u8>,
    /// Effective pixel set of each box, ascending pixel indices.
    regions: Vec<Vec<usize>>,
    seed: Option<u64>,
    attempts: usize,
    warning: Option<String>,
}

impl BoxSet {
    /// Builds a set from `(x0, y0, w, h)` rectangles in paste order, with
    /// every box active and no coverage constraint.
    pub fn from_rects(height: usize, width: usize, rects: &[(usize, usize, usize, usize)]) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("box set needs a non-empty image"));
        }
        let mut boxes = Vec::with_capacity(rects.len());
        for (i, &(x0, y0, w, h)) in rects.iter().enumerate() {
            if w == 0 || h == 0 || x0 + w > width || y0 + h > height {
                return Err(invalid(format!(
                    "box {} ({x0}, {y0}, {w}, {h}) does not fit a {height}x{width} image",
                    i + 1
                )));
            }
            boxes.push(CutBox {
                x0,
                y0,
                w,
                h,
                paste_index: i + 1,
            });
        }
        let mut owner: Vec<Option<usize>> = vec![None; height * width];
        for (n, b) in boxes.iter().enumerate() {
            for y in b.y0..b.y0 + b.h {
                owner[y * width + b.x0..y * width + b.x0 + b.w].fill(Some(n));
            }
        }
        let mut regions = vec![Vec::new(); boxes.len()];
        for (p, o) in owner.iter().enumerate() {
            if let Some(n) = o {
                regions[*n].push(p);
            }
        }
        let mask = owner.iter().map(|o| o.is_some() as u8).collect();
        Ok(Self {
            height,
            width,
            n_active: boxes.len(),
            boxes,
            mask,
            regions,
            seed: None,
            attempts: 1,
            warning: None,
        })
    }

    /// Restricts the structured loss to the last `n_active` pasted boxes.
    pub fn with_active(mut self, n_active: usize) -> Result<Self> {
        if n_active == 0 || n_active > self.boxes.len() {
            return Err(invalid(format!(
                "active box count {n_active} must be in 1..={}",
                self.boxes.len()
            )));
        }
        self.n_active = n_active;
        Ok(self)
    }

    pub fn from_record(r: &BoxSetRecord) -> Result<Self> {
        for (i, b) in r.boxes.iter().enumerate() {
            if b.paste_index != i + 1 {
                return Err(invalid(format!("box {} has paste index {}", i + 1, b.paste_index)));
            }
        }
        let rects: Vec<_> = r.boxes.iter().map(|b| (b.x0, b.y0, b.w, b.h)).collect();
        let mut s = Self::from_rects(r.height, r.width, &rects)?.with_active(r.n_active)?;
        s.seed = r.seed;
        Ok(s)
    }

    pub fn record(&self) -> BoxSetRecord {
        BoxSetRecord {
            height: self.height,
            width: self.width,
            n_active: self.n_active,
            seed: self.seed,
            boxes: self.boxes.clone(),
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn boxes(&self) -> &[CutBox] {
        &self.boxes
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn n_active(&self) -> usize {
        self.n_active
    }

    /// Zero-based indices of the active boxes.
    pub fn active(&self) -> std::ops::Range<usize> {
        self.boxes.len() - self.n_active..self.boxes.len()
    }

    /// Effective region of the box at zero-based position `n`.
    pub fn region(&self, n: usize) -> &[usize] {
        &self.regions[n]
    }

    pub fn regions(&self) -> &[Vec<usize>] {
        &self.regions
    }

    pub fn coverage(&self) -> f64 {
        self.mask.iter().map(|&m| m as usize).sum::<usize>() as f64 / self.mask.len() as f64
    }

    /// Generation attempts consumed (1 when the first proposal was accepted).
    pub fn attempts(&self) -> usize {
        self.attempts
    }

    /// Set when rejection sampling gave up without reaching the coverage
    /// target.
    pub fn warning(&self) -> Option<&str> {
        self.warning.as_deref()
    }
}

/// Draws `n` boxes whose union covers 45-55% of an `h x w` image.
///
/// Side lengths are uniform within +-75% of a mean chosen so that `n`
/// independently placed boxes cover about half the image; the whole set is
/// resampled until the coverage lands in range.
pub fn generate_boxes<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, n: usize) -> Result<BoxSet> {
    if height < 8 || width < 8 {
        return Err(invalid(format!(
            "cutmix needs at least an 8x8 image, got {height}x{width}"
        )));
    }
    if n == 0 || n > height * width {
        return Err(invalid(format!("box count {n} must be in 1..={}", height * width)));
    }
    // Per-box area fraction a with 1 - (1 - a)^n = 1/2.
    let area = 1.0 - 0.5f64.powf(1.0 / n as f64);
    let mean_side = area.sqrt();
    let lo = mean_side * (1.0 - SIDE_SPREAD);
    let hi = mean_side * (1.0 + SIDE_SPREAD);
    let side = |rng: &mut R, dim: usize| -> usize {
        let f: f64 = rng.random_range(lo..hi);
        ((f * dim as f64).round() as usize).clamp(1, dim)
    };
    generate_with(height, width, |_| {
        (0..n)
            .map(|_| {
                let bw = side(rng, width);
                let bh = side(rng, height);
                let x0 = rng.random_range(0..=width - bw);
                let y0 = rng.random_range(0..=height - bh);
                (x0, y0, bw, bh)
            })
            .collect()
    })
}

/// Rejection loop over proposals from `propose(attempt)`. After
/// [`MAX_ATTEMPTS`] misses the proposal closest to 50% coverage is returned
/// with a warning attached.
pub fn generate_with(
    height: usize,
    width: usize,
    mut propose: impl FnMut(usize) -> Vec<(usize, usize, usize, usize)>,
) -> Result<BoxSet> {
    let mut best: Option<BoxSet> = None;
    for attempt in 0..MAX_ATTEMPTS {
        let mut set = BoxSet::from_rects(height, width, &propose(attempt))?;
        set.attempts = attempt + 1;
        let cov = set.coverage();
        if (COVERAGE_RANGE.0..=COVERAGE_RANGE.1).contains(&cov) {
            return Ok(set);
        }
        if best
            .as_ref()
            .is_none_or(|b| (cov - 0.5).abs() < (b.coverage() - 0.5).abs())
        {
            best = Some(set);
        }
    }
    let mut set = best.expect("at least one attempt");
    let msg = format!(
        "cutmix coverage target missed after {MAX_ATTEMPTS} attempts; using coverage {:.4}",
        set.coverage()
    );
    log::warn!("{msg}");
    set.attempts = MAX_ATTEMPTS;
    set.warning = Some(msg);
    Ok(set)
}

fn check_composable(op: &'static str, a: &Tensor, b: &Tensor, boxes: &BoxSet) -> Result<()> {
    let s = a.shape();
    if s != b.shape() || s.len() != 3 || s[0] != boxes.height || s[1] != boxes.width {
        return Err(Error::Shape {
            op,
            lhs: s.to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn select(a: &Tensor, b: &Tensor, boxes: &BoxSet) -> Tensor {
    let c = a.last_dim();
    let mut out = a.detached();
    for (p, &m) in boxes.mask.iter().enumerate() {
        if m == 1 {
            out.data_mut()[p * c..(p + 1) * c].copy_from_slice(b.row(p));
        }
    }
    out
}

/// Mixed image: `ub` inside the mask, `ua` elsewhere.
pub fn compose_image(ua: &Tensor, ub: &Tensor, boxes: &BoxSet) -> Result<Tensor> {
    check_composable("compose_image", ua, ub, boxes)?;
    Ok(select(ua, ub, boxes))
}

/// Guessed label: the same per-pixel selection applied to two prediction
/// maps.
pub fn compose_predictions(pa: &PredictionMap, pb: &PredictionMap, boxes: &BoxSet) -> Result<PredictionMap> {
    check_composable("compose_predictions", pa.tensor(), pb.tensor(), boxes)?;
    Ok(PredictionMap::from_tensor_unchecked(select(
        pa.tensor(),
        pb.tensor(),
        boxes,
    )))
}

/// Which pixel pairs of an effective region are eligible for sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// All `|T|^2` ordered pairs, diagonal included.
    #[default]
    Ordered,
    /// The `|T|(|T|-1)/2` pairs with `i < j`.
    Unordered,
}

impl PairMode {
    pub fn universe(self, m: usize) -> u64 {
        let m = m as u64;
        match self {
            PairMode::Ordered => m * m,
            PairMode::Unordered => m * m.saturating_sub(1) / 2,
        }
    }

    /// Maps a pair number in `0..universe(m)` to local positions `(a, b)`.
    fn decode(self, k: u64, m: usize) -> (usize, usize) {
        match self {
            PairMode::Ordered => ((k / m as u64) as usize, (k % m as u64) as usize),
            PairMode::Unordered => {
                // k enumerates (a, b), a < b, ordered by b then a.
                let mut b = ((1.0 + (1.0 + 8.0 * k as f64).sqrt()) / 2.0) as u64;
                while b * (b - 1) / 2 > k {
                    b -= 1;
                }
                while (b + 1) * b / 2 <= k {
                    b += 1;
                }
                let a = k - b * (b - 1) / 2;
                (a as usize, b as usize)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxPairs {
    pub paste_index: usize,
    /// Global pixel index pairs, sorted.
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    n_pair: usize,
    mode: PairMode,
    boxes: Vec<BoxPairs>,
}

impl PairSet {
    pub fn budget(&self) -> usize {
        self.n_pair
    }

    pub fn mode(&self) -> PairMode {
        self.mode
    }

    /// One entry per active box, in paste order.
    pub fn boxes(&self) -> &[BoxPairs] {
        &self.boxes
    }

    pub fn counts(&self) -> Vec<usize> {
        self.boxes.iter().map(|b| b.pairs.len()).collect()
    }

    pub fn total(&self) -> usize {
        self.boxes.iter().map(|b| b.pairs.len()).sum()
    }

    pub fn retain_boxes(&mut self, keep: impl FnMut(&BoxPairs) -> bool) {
        self.boxes.retain(keep);
    }
}

/// Keeps every eligible pair of an active box when there are at most
/// `n_pair` of them, otherwise exactly `n_pair` distinct pairs drawn
/// uniformly without replacement. Pairs are drawn as pair numbers and
/// decoded, so the full pair list is never built.
pub fn drop_pairs<R: Rng + ?Sized>(boxes: &BoxSet, n_pair: usize, mode: PairMode, rng: &mut R) -> Result<PairSet> {
    if n_pair == 0 {
        return Err(invalid("pair budget must be at least 1"));
    }
    let per_box = boxes
        .active()
        .map(|n| {
            let region = boxes.region(n);
            let m = region.len();
            let universe = mode.universe(m);
            let numbers: Vec<u64> = if universe <= n_pair as u64 {
                (0..universe).collect()
            } else {
                sample_distinct(rng, universe, n_pair)
            };
            let pairs = numbers
                .into_iter()
                .map(|k| {
                    let (a, b) = mode.decode(k, m);
                    (region[a], region[b])
                })
                .collect();
            BoxPairs {
                paste_index: n + 1,
                pairs,
            }
        })
        .collect();
    Ok(PairSet {
        n_pair,
        mode,
        boxes: per_box,
    })
}

/// Floyd's algorithm: `k` distinct values from `0..universe`, sorted.
fn sample_distinct<R: Rng + ?Sized>(rng: &mut R, universe: u64, k: usize) -> Vec<u64> {
    let mut chosen = HashSet::with_capacity(k);
    let mut out = Vec::with_capacity(k);
    for j in universe - k as u64..universe {
        let t = rng.random_range(0..=j);
        let pick = if chosen.contains(&t) { j } else { t };
        chosen.insert(pick);
        out.push(pick);
    }
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn check_invariants(s: &BoxSet) {
        let mask_pixels: usize = s.mask().iter().map(|&m| m as usize).sum();
        let region_pixels: usize = s.regions().iter().map(Vec::len).sum();
        assert_eq!(mask_pixels, region_pixels);
        let mut seen = vec![false; s.mask().len()];
        for (n, region) in s.regions().iter().enumerate() {
            for &p in region {
                assert!(!seen[p], "regions overlap at {p}");
                seen[p] = true;
                assert_eq!(s.mask()[p], 1);
                let (x, y) = (p % s.width(), p / s.width());
                assert!(s.boxes()[n].contains(x, y));
            }
        }
        for (n, b) in s.boxes().iter().enumerate() {
            assert!(b.x0 + b.w <= s.width() && b.y0 + b.h <= s.height());
            for y in b.y0..b.y0 + b.h {
                for x in b.x0..b.x0 + b.w {
                    let p = y * s.width() + x;
                    if s.region(n).binary_search(&p).is_err() {
                        assert!(s.boxes()[n + 1..].iter().any(|later| later.contains(x, y)));
                    }
                }
            }
        }
    }

    #[test]
    fn later_box_excludes_covered_half() {
        let s = BoxSet::from_rects(10, 10, &[(0, 0, 10, 5), (5, 0, 5, 10)]).unwrap();
        // Box 1 spans columns 0-9 of rows 0-4; box 2 covers columns 5-9.
        let expected: Vec<usize> = (0..5).flat_map(|y| (0..5).map(move |x| y * 10 + x)).collect();
        assert_eq!(s.region(0), expected.as_slice());
        assert_eq!(s.region(1).len(), 50);
        check_invariants(&s);
    }

    #[test]
    fn full_cover_proposal_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = generate_with(10, 10, |attempt| {
            if attempt == 0 {
                vec![(0, 0, 10, 10)]
            } else {
                let w = rng.random_range(1..=10);
                let h = rng.random_range(1..=10);
                vec![(0, 0, w, h)]
            }
        })
        .unwrap();
        assert!(s.attempts() > 1);
        let cov = s.coverage();
        assert!((0.45..=0.55).contains(&cov), "{cov}");
        assert!(s.warning().is_none());
    }

    #[test]
    fn unreachable_target_returns_closest_with_warning() {
        let s = generate_with(10, 10, |a| vec![(0, 0, 1 + a % 3, 1)]).unwrap();
        assert_eq!(s.attempts(), MAX_ATTEMPTS);
        assert_eq!(s.coverage(), 0.03);
        assert!(s.warning().is_some());
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate_boxes(&mut ChaCha8Rng::seed_from_u64(9), 64, 64, 32).unwrap();
        let b = generate_boxes(&mut ChaCha8Rng::seed_from_u64(9), 64, 64, 32).unwrap();
        assert_eq!(a, b);
        assert!(generate_boxes(&mut ChaCha8Rng::seed_from_u64(9), 7, 64, 3).is_err());
        assert!(generate_boxes(&mut ChaCha8Rng::seed_from_u64(9), 8, 8, 0).is_err());
    }

    #[test]
    fn generation_hits_coverage_for_several_box_counts() {
        for n in [1, 2, 4, 16, 32, 64] {
            for seed in 0..20 {
                let s = generate_boxes(&mut ChaCha8Rng::seed_from_u64(seed), 64, 64, n).unwrap();
                assert!(s.warning().is_none(), "n={n} seed={seed}");
                check_invariants(&s);
            }
        }
    }

    #[test]
    fn record_round_trip() {
        let mut s = generate_boxes(&mut ChaCha8Rng::seed_from_u64(3), 32, 48, 8)
            .unwrap()
            .with_active(4)
            .unwrap();
        s.set_seed(3);
        let json = serde_json::to_string(&s.record()).unwrap();
        let back = BoxSet::from_record(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.record(), s.record());
        assert_eq!(back.mask(), s.mask());
    }

    #[test]
    fn composition_examples() {
        let ua = Tensor::full(&[8, 8, 3], 0.25);
        let ub = Tensor::full(&[8, 8, 3], 0.75);
        let none = BoxSet::from_rects(8, 8, &[]).unwrap();
        assert_eq!(compose_image(&ua, &ub, &none).unwrap(), ua);
        let all = BoxSet::from_rects(8, 8, &[(0, 0, 8, 8)]).unwrap();
        assert_eq!(compose_image(&ua, &ub, &all).unwrap(), ub);
        let small = BoxSet::from_rects(8, 8, &[(3, 5, 2, 2)]).unwrap();
        let mixed = compose_image(&ua, &ub, &small).unwrap();
        let differing = (0..64).filter(|&p| mixed.row(p) != ua.row(p)).count();
        assert_eq!(differing, 4);
        assert!(compose_image(&ua, &Tensor::zeros(&[8, 7, 3]), &small).is_err());

        let pa = PredictionMap::uniform(8, 8, 2);
        let mut t = Tensor::zeros(&[8, 8, 2]);
        for r in 0..64 {
            t.data_mut()[2 * r] = 1.0;
        }
        let pb = PredictionMap::new(t).unwrap();
        assert_eq!(&compose_predictions(&pa, &pb, &none).unwrap(), &pa);
        assert_eq!(&compose_predictions(&pa, &pb, &all).unwrap(), &pb);
        let g = compose_predictions(&pa, &pb, &small).unwrap();
        assert_eq!((0..64).filter(|&p| g.pixel(p) != pa.pixel(p)).count(), 4);
    }

    #[test]
    fn small_region_keeps_every_ordered_pair() {
        let s = BoxSet::from_rects(8, 8, &[(0, 0, 3, 1)]).unwrap();
        let p = drop_pairs(&s, 100, PairMode::Ordered, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.boxes()[0].pairs.len(), 9);
        let u = drop_pairs(&s, 100, PairMode::Unordered, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(u.boxes()[0].pairs, vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn binding_budget_gives_distinct_pairs() {
        let s = BoxSet::from_rects(10, 10, &[(0, 0, 10, 10)]).unwrap();
        for mode in [PairMode::Ordered, PairMode::Unordered] {
            let p = drop_pairs(&s, 50, mode, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let pairs = &p.boxes()[0].pairs;
            assert_eq!(pairs.len(), 50);
            let distinct: HashSet<_> = pairs.iter().collect();
            assert_eq!(distinct.len(), 50);
            if mode == PairMode::Unordered {
                assert!(pairs.iter().all(|(i, j)| i < j));
            }
        }
        assert!(drop_pairs(&s, 0, PairMode::Ordered, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn unordered_decode_enumerates_upper_triangle() {
        let m = 9;
        let all: Vec<_> = (0..PairMode::Unordered.universe(m))
            .map(|k| PairMode::Unordered.decode(k, m))
            .collect();
        let mut expected = Vec::new();
        for b in 1..m {
            for a in 0..b {
                expected.push((a, b));
            }
        }
        assert_eq!(all, expected);
    }

    #[test]
    fn single_pair_sampling_is_uniform() {
        let s = BoxSet::from_rects(8, 8, &[(0, 0, 2, 2)]).unwrap();
        let region = s.region(0).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = 100_000;
        let mut counts = [0usize; 16];
        for _ in 0..draws {
            let p = drop_pairs(&s, 1, PairMode::Ordered, &mut rng).unwrap();
            let (i, j) = p.boxes()[0].pairs[0];
            let a = region.iter().position(|&r| r == i).unwrap();
            let b = region.iter().position(|&r| r == j).unwrap();
            counts[a * 4 + b] += 1;
        }
        let p = 1.0 / 16.0;
        let expected = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for &c in &counts {
            assert!((c as f64 - expected).abs() <= 3.0 * sigma, "{counts:?}");
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        // 99.9th percentile of chi-square with 15 degrees of freedom.
        assert!(chi2 < 37.70, "chi2 {chi2}");
    }

    #[test]
    fn empty_region_gives_empty_list() {
        let s = BoxSet::from_rects(8, 8, &[(0, 0, 2, 2), (0, 0, 3, 3)]).unwrap();
        let p = drop_pairs(&s, 10, PairMode::Ordered, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.counts(), vec![0, 10]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn generated_sets_satisfy_invariants(seed in any::<u64>(), n in 1usize..40, n_pair in 1usize..400, n_active in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = generate_boxes(&mut rng, 24, 32, n).unwrap();
            let s = s.with_active(n_active.min(n)).unwrap();
            check_invariants(&s);
            let pairs = drop_pairs(&s, n_pair, PairMode::Ordered, &mut rng).unwrap();
            prop_assert!(pairs.total() <= s.n_active() * n_pair);
            for (bp, n) in pairs.boxes().iter().zip(s.active()) {
                let m = s.region(n).len();
                prop_assert_eq!(bp.pairs.len(), (m * m).min(n_pair));
                for &(i, j) in &bp.pairs {
                    prop_assert!(s.region(n).binary_search(&i).is_ok());
                    prop_assert!(s.region(n).binary_search(&j).is_ok());
                }
            }
        }

        #[test]
        fn composing_an_image_with_itself_is_identity(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(&[12, 10, 3], (0..360).map(|_| rng.random::<f64>()).collect()).unwrap();
            let s = generate_boxes(&mut rng, 12, 10, 5).unwrap();
            prop_assert_eq!(compose_image(&x, &x, &s).unwrap(), x);
        }
    }
}
