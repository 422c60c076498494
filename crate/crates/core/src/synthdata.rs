//! Procedural toy scenes for segmentation and the augmentation used on the
//! unlabeled branch.
//!
//! Every sample is a pure function of `(seed, split, index)`, so splits can
//! be regenerated on demand or in any order.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::losses::LabelMap;
use crate::tensor::Tensor;
use crate::tensorfile::TensorFile;

/// Base colors for the first classes; later classes get derived colors.
const PALETTE: [[f64; 3]; 8] = [
    [0.45, 0.45, 0.45],
    [0.80, 0.30, 0.25],
    [0.30, 0.70, 0.35],
    [0.30, 0.40, 0.80],
    [0.85, 0.75, 0.25],
    [0.70, 0.35, 0.75],
    [0.25, 0.75, 0.75],
    [0.90, 0.55, 0.20],
];

pub fn class_color(class: usize) -> [f64; 3] {
    if class < PALETTE.len() {
        return PALETTE[class];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(class as u64);
    [0; 3].map(|_| rng.random_range(0.15..0.9))
}

/// Appearance knobs of the scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneStyle {
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shape extent as a fraction of the image side.
    pub min_size: f64,
    pub max_size: f64,
    /// Per-pixel Gaussian texture noise.
    pub pixel_noise: f64,
    /// Uniform per-instance shift of the base color, per channel.
    pub color_jitter: f64,
}

impl Default for SceneStyle {
    fn default() -> Self {
        Self {
            min_shapes: 2,
            max_shapes: 6,
            min_size: 0.15,
            max_size: 0.45,
            pixel_noise: 0.08,
            color_jitter: 0.15,
        }
    }
}

impl SceneStyle {
    pub fn validate(&self) -> Result<()> {
        if self.min_shapes > self.max_shapes {
            return Err(Error::Config(format!(
                "min_shapes {} exceeds max_shapes {}",
                self.min_shapes, self.max_shapes
            )));
        }
        if !(0.0 < self.min_size && self.min_size <= self.max_size && self.max_size <= 1.0) {
            return Err(Error::Config(format!(
                "shape sizes must satisfy 0 < min_size <= max_size <= 1, got {} and {}",
                self.min_size, self.max_size
            )));
        }
        if !(self.pixel_noise >= 0.0 && self.color_jitter >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl ShapeKind {
    /// Whether the pixel center `(x + 0.5, y + 0.5)` lies inside.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match *self {
            ShapeKind::Rect { x0, y0, x1, y1 } => px >= x0 && px < x1 && py >= y0 && py < y1,
            ShapeKind::Disc { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            ShapeKind::Triangle { pts } => {
                let edge = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (py - ay) - (by - ay) * (px - ax);
                let d = [edge(pts[0], pts[1]), edge(pts[1], pts[2]), edge(pts[2], pts[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub class: u8,
    pub kind: ShapeKind,
    pub color: [f64; 3],
}

/// Labeled scene. Shapes are listed in drawing order; later shapes are on
/// top.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: Tensor,
    pub labels: LabelMap,
    pub shapes: Vec<Shape>,
    pub seed: u64,
}

/// Scene whose labels were never kept.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledScene {
    image: Tensor,
    seed: u64,
}

impl UnlabeledScene {
    pub fn image(&self) -> &Tensor {
        &self.image
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Rasterizes `shapes` over a background of class 0.
pub fn rasterize(height: usize, width: usize, shapes: &[Shape]) -> LabelMap {
    let mut labels = LabelMap::filled(height, width, 0);
    for y in 0..height {
        for x in 0..width {
            if let Some(s) = shapes.iter().rev().find(|s| s.kind.covers(x, y)) {
                labels.labels_mut()[y * width + x] = s.class;
            }
        }
    }
    labels
}

fn random_shape<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    classes: usize,
    style: &SceneStyle,
) -> Shape {
    let (h, w) = (height as f64, width as f64);
    let side = h.min(w);
    let class = rng.random_range(1..classes) as u8;
    let size = rng.random_range(style.min_size..=style.max_size) * side;
    let cx = rng.random_range(0.0..w);
    let cy = rng.random_range(0.0..h);
    let kind = match rng.random_range(0..3) {
        0 => {
            let aspect: f64 = rng.random_range(0.5..2.0);
            let (sw, sh) = (size * aspect.sqrt(), size / aspect.sqrt());
            ShapeKind::Rect {
                x0: cx - sw / 2.0,
                y0: cy - sh / 2.0,
                x1: cx + sw / 2.0,
                y1: cy + sh / 2.0,
            }
        }
        1 => ShapeKind::Disc { cx, cy, r: size / 2.0 },
        _ => {
            let rot: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let pts = [0.0, 1.0, 2.0].map(|k| {
                let a = rot + k * std::f64::consts::TAU / 3.0;
                let r = size * rng.random_range(0.45..0.7);
                (cx + r * a.cos(), cy + r * a.sin())
            });
            ShapeKind::Triangle { pts }
        }
    };
    let base = class_color(class as usize);
    let color = base.map(|c| (c + rng.random_range(-1.0..=1.0) * style.color_jitter).clamp(0.0, 1.0));
    Shape { class, kind, color }
}

/// One scene with `shape_count` shapes, or a count drawn from the style's
/// range when `None`.
pub fn generate_scene<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    classes: usize,
    style: &SceneStyle,
    shape_count: Option<usize>,
) -> Result<SceneSample> {
    if classes < 2 || classes > u8::MAX as usize {
        return Err(invalid(format!("class count {classes} must be in 2..=254")));
    }
    if height == 0 || width == 0 {
        return Err(invalid("scene needs a non-empty image"));
    }
    style.validate()?;
    let n = shape_count.unwrap_or_else(|| rng.random_range(style.min_shapes..=style.max_shapes));
    let shapes: Vec<Shape> = (0..n)
        .map(|_| random_shape(rng, height, width, classes, style))
        .collect();
    let labels = rasterize(height, width, &shapes);
    let bg = class_color(0).map(|c| (c + rng.random_range(-1.0..=1.0) * style.color_jitter).clamp(0.0, 1.0));
    let noise = Normal::new(0.0, style.pixel_noise).map_err(|e| invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let color = shapes
                .iter()
                .rev()
                .find(|s| s.kind.covers(x, y))
                .map_or(bg, |s| s.color);
            data.extend(color.iter().map(|c| (c + noise.sample(rng)).clamp(0.0, 1.0)));
        }
    }
    Ok(SceneSample {
        image: Tensor::new(&[height, width, 3], data)?,
        labels,
        shapes,
        seed: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Labeled,
    Unlabeled,
    Validation,
}

impl Split {
    fn stream_tag(self) -> u64 {
        match self {
            Split::Labeled => 1,
            Split::Unlabeled => 2,
            Split::Validation => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub validation: usize,
    pub style: SceneStyle,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            classes: 4,
            labeled: 20,
            unlabeled: 200,
            validation: 50,
            style: SceneStyle::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "images must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if !(2..=254).contains(&self.classes) {
            return Err(Error::Config(format!(
                "classes must be in 2..=254, got {}",
                self.classes
            )));
        }
        if self.labeled == 0 {
            return Err(Error::Config("labeled split must be non-empty".into()));
        }
        self.style.validate()
    }

    /// The scene at `index` of `split`, drawn from its own RNG stream.
    pub fn scene(&self, seed: u64, split: Split, index: usize) -> Result<SceneSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stream = split.stream_tag() << 32 | index as u64;
        rng.set_stream(stream);
        let mut s = generate_scene(&mut rng, self.height, self.width, self.classes, &self.style, None)?;
        s.seed = stream;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    config: DatasetConfig,
    seed: u64,
    labeled: Vec<SceneSample>,
    unlabeled: Vec<UnlabeledScene>,
    validation: Vec<SceneSample>,
}

impl Dataset {
    pub fn generate(config: &DatasetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let split = |s: Split, n: usize| (0..n).map(|i| config.scene(seed, s, i)).collect::<Result<Vec<_>>>();
        Ok(Self {
            config: config.clone(),
            seed,
            labeled: split(Split::Labeled, config.labeled)?,
            unlabeled: split(Split::Unlabeled, config.unlabeled)?
                .into_iter()
                .map(|s| UnlabeledScene {
                    image: s.image,
                    seed: s.seed,
                })
                .collect(),
            validation: split(Split::Validation, config.validation)?,
        })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn labeled(&self) -> &[SceneSample] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &[UnlabeledScene] {
        &self.unlabeled
    }

    pub fn validation(&self) -> &[SceneSample] {
        &self.validation
    }

    /// Writes one tensor file per sample into `dir`.
    pub fn save_cache(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let write = |split: Split, i: usize, image: &Tensor, labels: Option<&LabelMap>| -> Result<()> {
            let mut f = TensorFile::new(serde_json::json!({
                "split": split,
                "index": i,
                "dataset_seed": self.seed,
                "config": self.config,
            }));
            f.push("image", image.clone());
            if let Some(l) = labels {
                f.push("labels", labels_to_tensor(l));
            }
            f.save(&dir.join(format!("{}_{i:04}.bin", split_name(split))))
        };
        for (i, s) in self.labeled.iter().enumerate() {
            write(Split::Labeled, i, &s.image, Some(&s.labels))?;
        }
        for (i, s) in self.unlabeled.iter().enumerate() {
            write(Split::Unlabeled, i, &s.image, None)?;
        }
        for (i, s) in self.validation.iter().enumerate() {
            write(Split::Validation, i, &s.image, Some(&s.labels))?;
        }
        Ok(())
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Labeled => "labeled",
        Split::Unlabeled => "unlabeled",
        Split::Validation => "validation",
    }
}

pub fn labels_to_tensor(l: &LabelMap) -> Tensor {
    let data = l.labels().iter().map(|&v| v as f64).collect();
    Tensor::new(&[l.height(), l.width()], data).expect("label map is non-empty")
}

/// One augmentation operation and its drawn parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    HorizontalFlip,
    Brightness { shift: f64 },
    Noise { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub brightness_prob: f64,
    pub brightness_range: f64,
    pub noise_prob: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            brightness_prob: 0.5,
            brightness_range: 0.1,
            noise_prob: 0.5,
            noise_sigma: 0.02,
        }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        Self {
            flip_prob: 0.0,
            brightness_prob: 0.0,
            noise_prob: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub image: Tensor,
    pub record: Vec<Transform>,
}

/// Both unlabeled images of a step after independent augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub ua: Augmented,
    pub ub: Augmented,
}

pub fn flip_image(image: &Tensor) -> Tensor {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = image.detached();
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + (w - 1 - x)) * c;
            let dst = (y * w + x) * c;
            out.data_mut()[dst..dst + c].copy_from_slice(&image.data()[src..src + c]);
        }
    }
    out
}

pub fn flip_labels(labels: &LabelMap) -> LabelMap {
    let (h, w) = (labels.height(), labels.width());
    let mut out = labels.clone();
    for y in 0..h {
        for x in 0..w {
            out.labels_mut()[y * w + x] = labels.labels()[y * w + (w - 1 - x)];
        }
    }
    out
}

/// Applies flip, brightness shift and pixel noise, each with its own
/// probability, then clamps to `[0, 1]`.
pub fn augment<R: Rng + ?Sized>(rng: &mut R, image: &Tensor, cfg: &AugmentConfig) -> Result<Augmented> {
    if image.shape().len() != 3 {
        return Err(invalid(format!(
            "augment expects an [H, W, C] image, got {:?}",
            image.shape()
        )));
    }
    let mut record = Vec::new();
    if rng.random_bool(cfg.flip_prob) {
        record.push(Transform::HorizontalFlip);
    }
    if rng.random_bool(cfg.brightness_prob) {
        let shift = rng.random_range(-cfg.brightness_range..=cfg.brightness_range);
        record.push(Transform::Brightness { shift });
    }
    if rng.random_bool(cfg.noise_prob) {
        record.push(Transform::Noise { sigma: cfg.noise_sigma });
    }
    let image = apply(rng, image, &record)?;
    Ok(Augmented { image, record })
}

/// Replays a transform record. Noise is redrawn from `rng`.
pub fn apply<R: Rng + ?Sized>(rng: &mut R, image: &Tensor, record: &[Transform]) -> Result<Tensor> {
    let mut out = image.detached();
    for t in record {
        match *t {
            Transform::HorizontalFlip => out = flip_image(&out),
            Transform::Brightness { shift } => out.data_mut().iter_mut().for_each(|v| *v += shift),
            Transform::Noise { sigma } => {
                let normal = Normal::new(0.0, sigma).map_err(|e| invalid(e.to_string()))?;
                out.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
            }
        }
    }
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

pub fn augment_pair<R: Rng + ?Sized>(
    rng: &mut R,
    ua: &Tensor,
    ub: &Tensor,
    cfg: &AugmentConfig,
) -> Result<AugmentedPair> {
    Ok(AugmentedPair {
        ua: augment(rng, ua, cfg)?,
        ub: augment(rng, ub, cfg)?,
    })
}

/// Binary PPM (P6) of an `[H, W, 3]` image with values in `[0, 1]`.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(invalid(format!("PPM needs an [H, W, 3] image, got {s:?}")));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", s[1], s[0])?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// Binary PGM (P5) of a label map, classes spread over the gray range.
/// Ignore pixels are white.
pub fn write_pgm(path: &Path, labels: &LabelMap, classes: usize) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", labels.width(), labels.height())?;
    let step = 255 / (classes.max(2) - 1);
    let bytes: Vec<u8> = labels
        .labels()
        .iter()
        .map(|&l| {
            if l == LabelMap::IGNORE {
                255
            } else {
                (l as usize * step).min(254) as u8
            }
        })
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            height: 16,
            width: 20,
            labeled: 3,
            unlabeled: 4,
            validation: 2,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn background_only_scene() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = generate_scene(&mut rng, 12, 12, 2, &SceneStyle::default(), Some(0)).unwrap();
        assert!(s.labels.labels().iter().all(|&l| l == 0));
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn scenes_are_pure_functions_of_seed_and_index() {
        let cfg = small();
        let a = Dataset::generate(&cfg, 5).unwrap();
        let b = Dataset::generate(&cfg, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(cfg.scene(5, Split::Validation, 1).unwrap(), a.validation()[1]);
        assert_ne!(a.labeled()[0].image, a.validation()[0].image);
        assert_ne!(Dataset::generate(&cfg, 6).unwrap().labeled()[0], a.labeled()[0]);
    }

    #[test]
    fn brightness_on_mid_gray() {
        let img = Tensor::full(&[4, 4, 3], 0.5);
        let out = apply(
            &mut ChaCha8Rng::seed_from_u64(0),
            &img,
            &[Transform::Brightness { shift: 0.1 }],
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.6).abs() < 1e-15));
    }

    #[test]
    fn augmentation_off_is_identity() {
        let s = small().scene(3, Split::Unlabeled, 0).unwrap();
        let a = augment(&mut ChaCha8Rng::seed_from_u64(0), &s.image, &AugmentConfig::off()).unwrap();
        assert!(a.record.is_empty());
        assert_eq!(a.image, s.image);
    }

    #[test]
    fn flip_twice_is_identity() {
        let s = small().scene(3, Split::Labeled, 1).unwrap();
        let rec = [Transform::HorizontalFlip, Transform::HorizontalFlip];
        assert_eq!(
            apply(&mut ChaCha8Rng::seed_from_u64(0), &s.image, &rec).unwrap(),
            s.image
        );
        assert_eq!(flip_labels(&flip_labels(&s.labels)), s.labels);
    }

    #[test]
    fn augmentation_records_what_it_did() {
        let img = Tensor::full(&[8, 8, 3], 0.5);
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            brightness_prob: 1.0,
            noise_prob: 0.0,
            ..AugmentConfig::default()
        };
        let a = augment(&mut ChaCha8Rng::seed_from_u64(4), &img, &cfg).unwrap();
        assert_eq!(a.record.len(), 2);
        let Transform::Brightness { shift } = a.record[1] else {
            panic!("{:?}", a.record)
        };
        assert!(shift.abs() <= 0.1);
        assert!(a.image.data().iter().all(|&v| (v - 0.5 - shift).abs() < 1e-15));
    }

    #[test]
    fn cache_and_dumps() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dataset::generate(&small(), 0).unwrap();
        d.save_cache(dir.path()).unwrap();
        let f = TensorFile::load(&dir.path().join("labeled_0002.bin")).unwrap();
        assert_eq!(f.get("image").unwrap(), &d.labeled()[2].image);
        assert_eq!(f.get("labels").unwrap(), &labels_to_tensor(&d.labeled()[2].labels));
        let u = TensorFile::load(&dir.path().join("unlabeled_0000.bin")).unwrap();
        assert!(u.get("labels").is_none());

        let ppm = dir.path().join("x.ppm");
        write_ppm(&ppm, &d.labeled()[0].image).unwrap();
        let bytes = fs::read(&ppm).unwrap();
        assert!(bytes.starts_with(b"P6\n20 16\n255\n"));
        assert_eq!(bytes.len(), b"P6\n20 16\n255\n".len() + 16 * 20 * 3);
        let pgm = dir.path().join("x.pgm");
        write_pgm(&pgm, &d.labeled()[0].labels, 4).unwrap();
        assert_eq!(fs::read(&pgm).unwrap().len(), b"P5\n20 16\n255\n".len() + 16 * 20);
    }

    #[test]
    fn style_validation() {
        let mut cfg = small();
        cfg.style.min_shapes = 7;
        assert!(Dataset::generate(&cfg, 0).is_err());
        let mut cfg = small();
        cfg.classes = 1;
        assert!(Dataset::generate(&cfg, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn labels_match_topmost_shape(seed in any::<u64>(), classes in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = generate_scene(&mut rng, 24, 20, classes, &SceneStyle::default(), None).unwrap();
            prop_assert!((2..=6).contains(&s.shapes.len()));
            for y in 0..24 {
                for x in 0..20 {
                    let top = s.shapes.iter().rev().find(|sh| sh.kind.covers(x, y)).map_or(0, |sh| sh.class);
                    prop_assert_eq!(s.labels.get(y, x), top);
                    prop_assert!((s.labels.get(y, x) as usize) < classes);
                }
            }
            prop_assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn flip_is_label_equivariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = generate_scene(&mut rng, 10, 14, 4, &SceneStyle::default(), None).unwrap();
            // An image that encodes its own label map in every channel.
            let coded = Tensor::new(&[10, 14, 3], s.labels.labels().iter().flat_map(|&l| [l as f64 / 8.0; 3]).collect()).unwrap();
            let aug = apply(&mut rng, &coded, &[Transform::HorizontalFlip]).unwrap();
            let flipped = flip_labels(&s.labels);
            for (p, &l) in flipped.labels().iter().enumerate() {
                prop_assert_eq!(aug.row(p), &[l as f64 / 8.0; 3]);
            }
        }
    }
}
