//! Deterministic synthetic shapes dataset with per-object masks and boxes.
//!
//! Class identity is the shape family (or, in the fine-grained preset, the
//! fill texture). Backgrounds carry random line strokes that belong to no
//! class.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::BBox;
use crate::maps::Mask;
use crate::par::{self, Execution};
use crate::tensor::io::{read_tns, write_tns};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    SingleLabel,
    MultiLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub image_size: usize,
    pub mode: LabelMode,
    /// Inclusive range of objects per image in multi-label mode.
    pub min_objects: usize,
    pub max_objects: usize,
    /// Number of distractor strokes per image.
    pub clutter: usize,
    /// Give every class its own fill pattern in addition to its shape.
    pub texture: bool,
    /// All classes share one shape and differ only in texture.
    pub fine_grained: bool,
    /// Allow objects to overlap in multi-label mode.
    pub occlusion: bool,
    pub min_area_fraction: f64,
    pub max_area_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            train_samples: 500,
            test_samples: 200,
            image_size: 64,
            mode: LabelMode::SingleLabel,
            min_objects: 1,
            max_objects: 3,
            clutter: 6,
            texture: true,
            fine_grained: false,
            occlusion: false,
            min_area_fraction: 0.02,
            max_area_fraction: 0.6,
            seed: 0,
        }
    }
}

/// Shape families, in class order.
pub const SHAPES: [Shape; 8] = [
    Shape::Circle,
    Shape::Square,
    Shape::Triangle,
    Shape::Cross,
    Shape::Ring,
    Shape::Diamond,
    Shape::Ellipse,
    Shape::Star,
];

/// Fill patterns, in class order for textured datasets.
pub const PATTERNS: [Pattern; 8] = [
    Pattern::Solid,
    Pattern::HorizontalStripes,
    Pattern::VerticalStripes,
    Pattern::Checker,
    Pattern::Diagonal,
    Pattern::Dots,
    Pattern::Grid,
    Pattern::Rings,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
    Ellipse,
    Star,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Solid,
    HorizontalStripes,
    VerticalStripes,
    Checker,
    Diagonal,
    Dots,
    Grid,
    Rings,
}

impl Shape {
    /// Whether the point `(dx, dy)` relative to the center lies inside a shape
    /// of radius `r`, rotated by `angle`.
    fn contains(self, dx: f64, dy: f64, r: f64, angle: f64) -> bool {
        let (s, c) = angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        let d = (u * u + v * v).sqrt();
        match self {
            Shape::Circle => d <= r,
            Shape::Square => u.abs() <= 0.8 * r && v.abs() <= 0.8 * r,
            Shape::Triangle => {
                // equilateral, apex up, inscribed in the circle of radius r
                let apothem = 0.5 * r;
                (0..3).all(|k| {
                    let a = PI / 2.0 + k as f64 * 2.0 * PI / 3.0;
                    -(u * a.cos() - v * a.sin()) <= apothem
                })
            }
            Shape::Cross => {
                let arm = 0.3 * r;
                (u.abs() <= arm && v.abs() <= r) || (v.abs() <= arm && u.abs() <= r)
            }
            Shape::Ring => d <= r && d >= 0.55 * r,
            Shape::Diamond => u.abs() + v.abs() <= r,
            Shape::Ellipse => (u / r).powi(2) + (v / (0.5 * r)).powi(2) <= 1.0,
            Shape::Star => {
                let phi = v.atan2(u);
                d <= r * (0.6 + 0.4 * (5.0 * phi).cos())
            }
        }
    }

    /// Shapes whose identity survives rotation get a random orientation.
    fn rotates(self) -> bool {
        matches!(self, Shape::Triangle | Shape::Cross | Shape::Star)
    }
}

impl Pattern {
    /// `true` where the secondary color is used.
    fn secondary(self, x: usize, y: usize, cx: f64, cy: f64) -> bool {
        match self {
            Pattern::Solid => false,
            Pattern::HorizontalStripes => (y / 2).is_multiple_of(2),
            Pattern::VerticalStripes => (x / 2).is_multiple_of(2),
            Pattern::Checker => (x / 3 + y / 3).is_multiple_of(2),
            Pattern::Diagonal => ((x + y) / 2).is_multiple_of(2),
            Pattern::Dots => x % 4 < 2 && y % 4 < 2,
            Pattern::Grid => x.is_multiple_of(5) || y.is_multiple_of(5),
            Pattern::Rings => {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                ((d / 2.5) as usize).is_multiple_of(2)
            }
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let families = if self.fine_grained {
            PATTERNS.len()
        } else {
            SHAPES.len()
        };
        if self.num_classes < 2 || self.num_classes > families {
            return bad(format!(
                "data.num_classes must be in 2..={families}, got {}",
                self.num_classes
            ));
        }
        if self.image_size < 16 {
            return bad(format!("data.image_size must be >= 16, got {}", self.image_size));
        }
        if self.mode == LabelMode::MultiLabel
            && (self.min_objects == 0
                || self.min_objects > self.max_objects
                || self.max_objects > self.num_classes)
        {
            return bad(format!(
                "data.min_objects/max_objects must satisfy 1 <= min <= max <= num_classes, got {}..={}",
                self.min_objects, self.max_objects
            ));
        }
        if !(0.0 < self.min_area_fraction && self.min_area_fraction < self.max_area_fraction
            && self.max_area_fraction <= 1.0)
        {
            return bad("data.min_area_fraction/max_area_fraction must satisfy 0 < min < max <= 1".into());
        }
        Ok(())
    }

    pub fn samples(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_samples,
            Split::Test => self.test_samples,
        }
    }

    /// Semantic label for pixel values: 0 is background, `c + 1` is class `c`.
    pub fn num_semantic_labels(&self) -> usize {
        self.num_classes + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`, values in [0, 1].
    pub image: Tensor<f32>,
    /// Positive classes, one per object.
    pub labels: Vec<usize>,
    pub masks: Vec<Mask>,
    pub boxes: Vec<BBox>,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.image.chw().expect("image is [3, H, W]");
        (h, w)
    }

    /// Index of `class` among this sample's objects.
    pub fn object_of(&self, class: usize) -> Option<usize> {
        self.labels.iter().position(|&l| l == class)
    }

    /// Per-pixel semantic labels (0 = background, `c + 1` = class `c`).
    /// Later objects win where masks overlap.
    pub fn semantic(&self) -> Vec<usize> {
        let (h, w) = self.size();
        let mut out = vec![0; h * w];
        for (mask, &l) in self.masks.iter().zip(&self.labels) {
            for (o, &m) in out.iter_mut().zip(&mask.data) {
                if m {
                    *o = l + 1;
                }
            }
        }
        out
    }
}

/// Deterministic per-split label assignment: each sample takes the least-used
/// classes, ties broken randomly, which keeps class counts within one of each
/// other.
fn assign_labels(spec: &DatasetSpec, split: Split) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1000 + split.stream());
    let mut counts = vec![0usize; spec.num_classes];
    (0..spec.samples(split))
        .map(|_| {
            let n = match spec.mode {
                LabelMode::SingleLabel => 1,
                LabelMode::MultiLabel => rng.random_range(spec.min_objects..=spec.max_objects),
            };
            let mut order: Vec<usize> = (0..spec.num_classes).collect();
            order.shuffle(&mut rng);
            order.sort_by_key(|&c| counts[c]);
            let labels: Vec<usize> = order[..n].to_vec();
            for &c in &labels {
                counts[c] += 1;
            }
            labels
        })
        .collect()
}

struct Placed {
    mask: Mask,
    color: [f64; 3],
    secondary: [f64; 3],
    pattern: Pattern,
    center: (f64, f64),
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // saturated, away from the mid-gray background
    let hue = rng.random_range(0.0..6.0);
    let (f, i) = (hue - (hue as u32) as f64, hue as u32);
    let v = rng.random_range(0.75..1.0);
    let s = rng.random_range(0.6..1.0);
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn render_object(
    spec: &DatasetSpec,
    class: usize,
    rng: &mut ChaCha8Rng,
    occupied: &Mask,
) -> Result<Placed> {
    let n = spec.image_size;
    let nf = n as f64;
    let (shape, pattern) = if spec.fine_grained {
        (Shape::Circle, PATTERNS[class])
    } else if spec.texture {
        (SHAPES[class], PATTERNS[class])
    } else {
        (SHAPES[class], Pattern::Solid)
    };
    let total = (n * n) as f64;
    for _ in 0..500 {
        let r = rng.random_range(0.13..0.3) * nf;
        let cx = rng.random_range(0.75 * r..nf - 0.75 * r);
        let cy = rng.random_range(0.75 * r..nf - 0.75 * r);
        let angle = if shape.rotates() {
            rng.random_range(-0.35..0.35)
        } else {
            0.0
        };
        let mut mask = Mask::empty(n, n);
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if shape.contains(dx, dy, r, angle) {
                    mask.set(y, x, true);
                }
            }
        }
        let frac = mask.area() as f64 / total;
        if frac < spec.min_area_fraction || frac > spec.max_area_fraction {
            continue;
        }
        if !spec.occlusion && mask.data.iter().zip(&occupied.data).any(|(&a, &b)| a && b) {
            continue;
        }
        let color = random_color(rng);
        let secondary = color.map(|c| c * 0.35);
        return Ok(Placed {
            mask,
            color,
            secondary,
            pattern,
            center: (cx, cy),
        });
    }
    Err(Error::InvalidArgument(format!(
        "could not place class {class} within the area bounds; relax data.min_area_fraction/max_area_fraction or data.max_objects"
    )))
}

/// Renders sample `index` of `split` with labels `labels`.
fn render_sample(spec: &DatasetSpec, split: Split, index: usize, labels: &[usize]) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream((split.stream() << 40) | index as u64);
    let n = spec.image_size;
    let nf = n as f64;

    // background: tinted gray with a gentle gradient
    let base = [
        rng.random_range(0.3..0.6),
        rng.random_range(0.3..0.6),
        rng.random_range(0.3..0.6),
    ];
    let grad = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let mut img = vec![[0f64; 3]; n * n];
    for y in 0..n {
        for x in 0..n {
            let t = grad.0 * (x as f64 / nf - 0.5) + grad.1 * (y as f64 / nf - 0.5);
            img[y * n + x] = base.map(|b| b + t);
        }
    }

    // class-irrelevant strokes
    for _ in 0..spec.clutter {
        let color = random_color(&mut rng).map(|c| c * rng.random_range(0.5..1.0));
        let (x0, y0) = (rng.random_range(0.0..nf), rng.random_range(0.0..nf));
        let len = rng.random_range(0.15..0.5) * nf;
        let a = rng.random_range(0.0..2.0 * PI);
        let (x1, y1) = (x0 + len * a.cos(), y0 + len * a.sin());
        let half_width = rng.random_range(0.4..1.1);
        draw_stroke(&mut img, n, (x0, y0), (x1, y1), half_width, color);
    }

    let mut occupied = Mask::empty(n, n);
    let mut masks = Vec::with_capacity(labels.len());
    for &class in labels {
        let obj = render_object(spec, class, &mut rng, &occupied)?;
        for y in 0..n {
            for x in 0..n {
                if obj.mask.get(y, x) {
                    let sec = obj.pattern.secondary(x, y, obj.center.0, obj.center.1);
                    img[y * n + x] = if sec { obj.secondary } else { obj.color };
                    occupied.set(y, x, true);
                }
            }
        }
        masks.push(obj.mask);
    }

    let mut data = vec![0f32; 3 * n * n];
    for (p, px) in img.iter().enumerate() {
        for c in 0..3 {
            let noise = rng.random_range(-0.04..0.04);
            data[c * n * n + p] = (px[c] + noise).clamp(0.0, 1.0) as f32;
        }
    }
    let boxes = masks
        .iter()
        .map(|m| BBox::tight(m).expect("placed objects are nonempty"))
        .collect();
    Ok(Sample {
        image: Tensor::new(vec![3, n, n], data)?,
        labels: labels.to_vec(),
        masks,
        boxes,
    })
}

fn draw_stroke(img: &mut [[f64; 3]], n: usize, a: (f64, f64), b: (f64, f64), half_width: f64, color: [f64; 3]) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0);
            let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
            if qx * qx + qy * qy <= half_width * half_width {
                img[y * n + x] = color;
            }
        }
    }
}

/// Generates one split in memory.
pub fn generate_split(spec: &DatasetSpec, split: Split, exec: Execution) -> Result<Vec<Sample>> {
    spec.validate()?;
    let labels = assign_labels(spec, split);
    par::try_map_range(exec, labels.len(), |i| render_sample(spec, split, i, &labels[i]))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub labels: Vec<usize>,
    pub boxes: Vec<BBox>,
    pub mask_paths: Vec<String>,
}

/// Writes `dataset.json` plus `train/` and `test/` splits, each with a
/// `manifest.json`, `.tns` images and PGM masks.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path, exec: Execution) -> Result<()> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let spec_path = out_dir.join("dataset.json");
    write_json(&spec_path, spec)?;
    for split in [Split::Train, Split::Test] {
        let samples = generate_split(spec, split, exec)?;
        write_split(&out_dir.join(split.name()), &samples)?;
    }
    Ok(())
}

pub fn write_split(dir: &Path, samples: &[Sample]) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image_path = format!("images/{i:06}.tns");
        write_tns(&dir.join(&image_path), &s.image)?;
        let mut mask_paths = Vec::new();
        for (j, m) in s.masks.iter().enumerate() {
            let p = format!("masks/{i:06}_{j}.pgm");
            write_pgm(&dir.join(&p), m)?;
            mask_paths.push(p);
        }
        manifest.push(ManifestEntry {
            image_path,
            labels: s.labels.clone(),
            boxes: s.boxes.clone(),
            mask_paths,
        });
    }
    write_json(&dir.join("manifest.json"), &manifest)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path, e.to_string()))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    read_json(&dir.join("manifest.json"))
}

pub fn read_dataset_spec(dataset_dir: &Path) -> Result<DatasetSpec> {
    read_json(&dataset_dir.join("dataset.json"))
}

/// Loads entry `index` of the manifest in `dir`.
pub fn load_sample(dir: &Path, manifest: &[ManifestEntry], index: usize) -> Result<Sample> {
    let entry = manifest.get(index).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "sample index {index} out of range for {} entries",
            manifest.len()
        ))
    })?;
    let image_path = dir.join(&entry.image_path);
    let image = read_tns(&image_path)?;
    let (h, w) = match image.chw() {
        Some((3, h, w)) => (h, w),
        _ => {
            return Err(Error::format(
                &image_path,
                format!("expected a [3, H, W] image, got {:?}", image.shape()),
            ))
        }
    };
    let manifest_path = dir.join("manifest.json");
    if entry.mask_paths.len() != entry.labels.len() || entry.boxes.len() != entry.labels.len() {
        return Err(Error::format(
            &manifest_path,
            format!("entry {index}: labels, boxes and mask_paths differ in length"),
        ));
    }
    let masks = entry
        .mask_paths
        .iter()
        .map(|p| {
            let path = dir.join(p);
            let m = read_pgm(&path)?;
            if (m.height, m.width) != (h, w) {
                return Err(Error::format(&path, "mask size differs from image size"));
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Sample {
        image,
        labels: entry.labels.clone(),
        masks,
        boxes: entry.boxes.clone(),
    })
}

/// Loads every sample of the split stored in `dir`.
pub fn load_split(dir: &Path, exec: Execution) -> Result<Vec<Sample>> {
    let manifest = read_manifest(dir)?;
    par::try_map_range(exec, manifest.len(), |i| load_sample(dir, &manifest, i))
}

pub fn split_dir(dataset_dir: &Path, split: Split) -> PathBuf {
    dataset_dir.join(split.name())
}

/// Binary P5 PGM with values 0 / 255.
pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    fs::write(path, encode_pgm(mask)).map_err(|e| Error::io(path, e))
}

/// Reads a P5 PGM; any nonzero value is foreground.
pub fn read_pgm(path: &Path) -> Result<Mask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

pub fn decode_pgm(bytes: &[u8], origin: &Path) -> Result<Mask> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(origin, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace after maxval
    if fields[0] != "P5" {
        return Err(Error::format(origin, "not a binary (P5) PGM"));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(origin, format!("bad PGM header field {s:?}")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(origin, "PGM maxval must be in 1..=255"));
    }
    if bytes.len() < pos || bytes.len() - pos != w * h {
        return Err(Error::format(
            origin,
            format!("PGM body should hold {} bytes", w * h),
        ));
    }
    Mask::new(h, w, bytes[pos..].iter().map(|&v| v != 0).collect())
}
