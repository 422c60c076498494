//! Brute-force references for the box-restricted structured loss, and the
//! pair-count arithmetic that motivates sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cutmix::{drop_pairs, BoxSet, PairMode};
use crate::error::{invalid, Result};
use crate::losses::{cosine_similarity, structured_consistency_box, structured_consistency_full, PredictionMap};
use crate::tensor::Tensor;

/// Splits an `h x w` image into `n` rectangles by repeated random
/// guillotine cuts of the largest piece that can still be cut.
pub fn guillotine_partition<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    n: usize,
) -> Result<Vec<(usize, usize, usize, usize)>> {
    if n == 0 || n > height * width {
        return Err(invalid(format!("cannot split {height}x{width} into {n} rectangles")));
    }
    let mut pieces = vec![(0, 0, width, height)];
    while pieces.len() < n {
        let (k, _) = pieces
            .iter()
            .enumerate()
            .filter(|(_, p)| p.2 * p.3 > 1)
            .max_by_key(|(_, p)| p.2 * p.3)
            .expect("some piece has more than one pixel");
        let (x0, y0, w, h) = pieces.swap_remove(k);
        let vertical = if w > 1 && h > 1 { rng.random_bool(0.5) } else { w > 1 };
        if vertical {
            let cut = rng.random_range(1..w);
            pieces.push((x0, y0, cut, h));
            pieces.push((x0 + cut, y0, w - cut, h));
        } else {
            let cut = rng.random_range(1..h);
            pieces.push((x0, y0, w, cut));
            pieces.push((x0, y0 + cut, w, h - cut));
        }
    }
    Ok(pieces)
}

fn crop(map: &PredictionMap, x0: usize, y0: usize, w: usize, h: usize) -> Result<PredictionMap> {
    let c = map.classes();
    let mut data = Vec::with_capacity(w * h * c);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            data.extend_from_slice(map.pixel(y * map.width() + x));
        }
    }
    PredictionMap::new(Tensor::new(&[h, w, c], data)?)
}

/// Mean over boxes of the full-image structured loss applied to each box's
/// crop. Valid when the boxes do not overlap, so each effective region is
/// its whole rectangle.
pub fn per_box_full(
    student: &PredictionMap,
    teacher: &PredictionMap,
    rects: &[(usize, usize, usize, usize)],
) -> Result<f64> {
    let mut total = 0.0;
    for &(x0, y0, w, h) in rects {
        total += structured_consistency_full(&crop(student, x0, y0, w, h)?, &crop(teacher, x0, y0, w, h)?)?;
    }
    Ok(total / rects.len() as f64)
}

/// Direct double loop over every pixel pair of every non-empty active
/// effective region, with similarities from [`cosine_similarity`].
pub fn enumerate_regions(student: &PredictionMap, teacher: &PredictionMap, boxes: &BoxSet) -> Result<f64> {
    let mut total = 0.0;
    let mut used = 0;
    for n in boxes.active() {
        let region = boxes.region(n);
        if region.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        for &i in region {
            for &j in region {
                let a_s = cosine_similarity(student.pixel(i), student.pixel(j))?;
                let a_t = cosine_similarity(teacher.pixel(i), teacher.pixel(j))?;
                sum += (a_s - a_t).powi(2);
            }
        }
        total += sum / (region.len() * region.len()) as f64;
        used += 1;
    }
    Ok(if used == 0 { 0.0 } else { total / used as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub first_seed: u64,
    pub seeds: u64,
    pub max_abs_deviation: f64,
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Result<PredictionMap> {
    let data = (0..h * w * c).map(|_| rng.random_range(-3.0..3.0)).collect();
    PredictionMap::from_logits(&Tensor::new(&[h, w, c], data)?)
}

/// Sampled-pair loss with an unbounded budget against [`per_box_full`] on
/// random partitions of `size x size` images into `n_boxes` rectangles,
/// all active.
pub fn compare_partitions(
    first_seed: u64,
    seeds: u64,
    size: usize,
    classes: usize,
    n_boxes: usize,
) -> Result<OracleReport> {
    let mut worst: f64 = 0.0;
    for seed in first_seed..first_seed + seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let student = random_map(&mut rng, size, size, classes)?;
        let teacher = random_map(&mut rng, size, size, classes)?;
        let rects = guillotine_partition(&mut rng, size, size, n_boxes)?;
        let boxes = BoxSet::from_rects(size, size, &rects)?.with_active(n_boxes)?;
        let pairs = drop_pairs(&boxes, usize::MAX, PairMode::Ordered, &mut rng)?;
        let fast = structured_consistency_box(&student, &teacher, &boxes, &pairs)?;
        let slow = per_box_full(&student, &teacher, &rects)?;
        worst = worst.max((fast - slow).abs());
    }
    Ok(OracleReport {
        first_seed,
        seeds,
        max_abs_deviation: worst,
    })
}

/// Pair counts for a given image and box geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairBudget {
    pub height: usize,
    pub width: usize,
    pub n_boxes: usize,
    pub n_active: usize,
    pub n_pair: usize,
    /// `(H W)^2`: every ordered pixel pair of the image.
    pub full_image_pairs: f64,
    /// Active boxes times `|T|^2` when the boxes split half the image
    /// evenly.
    pub box_enumeration_pairs: f64,
    /// At most `n_active * n_pair`.
    pub sampled_pairs: f64,
}

impl PairBudget {
    pub fn new(height: usize, width: usize, n_boxes: usize, n_active: usize, n_pair: usize) -> Self {
        let pixels = (height * width) as f64;
        let region = pixels / 2.0 / n_boxes as f64;
        Self {
            height,
            width,
            n_boxes,
            n_active,
            n_pair,
            full_image_pairs: pixels * pixels,
            box_enumeration_pairs: n_active as f64 * region * region,
            sampled_pairs: (n_active * n_pair) as f64,
        }
    }

    pub fn reduction_vs_full(&self) -> f64 {
        self.full_image_pairs / self.sampled_pairs
    }

    pub fn reduction_vs_boxes(&self) -> f64 {
        self.box_enumeration_pairs / self.sampled_pairs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cutmix::generate_boxes;

    #[test]
    fn partitions_tile_the_image() {
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rects = guillotine_partition(&mut rng, 6, 6, 3).unwrap();
            assert_eq!(rects.len(), 3);
            let s = BoxSet::from_rects(6, 6, &rects).unwrap();
            assert_eq!(s.coverage(), 1.0);
            for (n, r) in rects.iter().enumerate() {
                assert_eq!(s.region(n).len(), r.2 * r.3);
            }
        }
    }

    #[test]
    fn sampled_loss_matches_partition_oracle() {
        let r = compare_partitions(0, 20, 6, 3, 3).unwrap();
        assert!(r.max_abs_deviation < 1e-10, "{r:?}");
    }

    #[test]
    fn sampled_loss_matches_region_enumeration_with_overlaps() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_map(&mut rng, 12, 12, 3).unwrap();
            let t = random_map(&mut rng, 12, 12, 3).unwrap();
            let boxes = generate_boxes(&mut rng, 12, 12, 6).unwrap().with_active(3).unwrap();
            let pairs = drop_pairs(&boxes, usize::MAX, PairMode::Ordered, &mut rng).unwrap();
            let fast = structured_consistency_box(&s, &t, &boxes, &pairs).unwrap();
            let slow = enumerate_regions(&s, &t, &boxes).unwrap();
            assert!((fast - slow).abs() < 1e-12, "seed {seed}: {fast} vs {slow}");
        }
    }

    #[test]
    fn single_pixel_image_gives_zero() {
        let m = PredictionMap::uniform(1, 1, 3);
        let boxes = BoxSet::from_rects(1, 1, &[(0, 0, 1, 1)]).unwrap();
        let pairs = drop_pairs(&boxes, usize::MAX, PairMode::Ordered, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(structured_consistency_box(&m, &m, &boxes, &pairs).unwrap(), 0.0);
        assert_eq!(per_box_full(&m, &m, &[(0, 0, 1, 1)]).unwrap(), 0.0);
    }

    #[test]
    fn default_geometry_budget() {
        let b = PairBudget::new(1024, 2048, 32, 16, 9000);
        assert_eq!(b.sampled_pairs, 144_000.0);
        assert_eq!(b.full_image_pairs, (2048.0 * 1024.0f64).powi(2));
        // Half of 2^21 pixels over 32 boxes: 2^15 pixels per region.
        assert_eq!(b.box_enumeration_pairs, 16.0 * 2f64.powi(30));
        assert!(b.reduction_vs_boxes() > 1e5);
    }
}
