//! Synthetic multi-granularity scenes on a 4-pixel lattice, templated expressions, and a
//! loader for line-delimited JSON annotation files.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use base64::Engine as _;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rle_decode, BinaryMask, BoundingBox, RleMask};
use crate::mgfe::Vocabulary;
use crate::types::{Granularity, ImageTensor};

/// Lattice pitch in pixels; every rectangle edge lies on it.
pub const CELL: usize = 4;
pub const DEFAULT_CANVAS: usize = 64;
pub const BACKGROUND: [f64; 3] = [0.55, 0.55, 0.55];

pub const COLORS: [(&str, [f64; 3]); 5] = [
    ("red", [0.9, 0.15, 0.15]),
    ("green", [0.15, 0.75, 0.2]),
    ("blue", [0.2, 0.3, 0.9]),
    ("yellow", [0.95, 0.85, 0.1]),
    ("purple", [0.6, 0.2, 0.8]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    House,
    Car,
    Tree,
    Person,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::House, ShapeKind::Car, ShapeKind::Tree, ShapeKind::Person];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::House => "house",
            ShapeKind::Car => "car",
            ShapeKind::Tree => "tree",
            ShapeKind::Person => "person",
        }
    }

    pub fn plural(self) -> String {
        format!("{}s", self.name())
    }

    pub fn part_names(self) -> &'static [&'static str] {
        match self {
            ShapeKind::House => &["roof", "door", "window"],
            ShapeKind::Car => &["cabin", "hood"],
            ShapeKind::Tree => &["crown", "trunk"],
            ShapeKind::Person => &["head", "torso", "legs"],
        }
    }
}

/// Axis-aligned rectangle in lattice cells, `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CellRect {
    fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        debug_assert!(x0 < x1 && y0 < y1);
        Self { x0, y0, x1, y1 }
    }

    pub fn pixel_box(&self) -> BoundingBox {
        BoundingBox::pixel((self.x0 * CELL) as f64, (self.y0 * CELL) as f64, (self.x1 * CELL) as f64, (self.y1 * CELL) as f64)
            .expect("non-empty rect")
    }

    fn contains_px(&self, r: usize, c: usize) -> bool {
        let (r, c) = (r / CELL, c / CELL);
        (self.y0..self.y1).contains(&r) && (self.x0..self.x1).contains(&c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub name: String,
    pub rect: CellRect,
    /// Multiplier on the object color; values above 1 blend toward white.
    pub shade: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub kind: ShapeKind,
    pub color: String,
    pub rgb: [f64; 3],
    /// Base-colored rectangles that are not parts.
    pub body: Vec<CellRect>,
    pub parts: Vec<PartSpec>,
}

impl ObjectSpec {
    fn rects(&self) -> impl Iterator<Item = &CellRect> {
        self.body.iter().chain(self.parts.iter().map(|p| &p.rect))
    }

    pub fn mask(&self, canvas: usize) -> BinaryMask {
        BinaryMask::from_fn(canvas, canvas, |r, c| self.rects().any(|q| q.contains_px(r, c)))
    }

    pub fn part_mask(&self, idx: usize, canvas: usize) -> BinaryMask {
        let rect = self.parts[idx].rect;
        BinaryMask::from_fn(canvas, canvas, |r, c| rect.contains_px(r, c))
    }

    pub fn bbox(&self) -> BoundingBox {
        let mut it = self.rects();
        let first = *it.next().expect("objects have rects");
        let r = it.fold(first, |a, b| CellRect::new(a.x0.min(b.x0), a.y0.min(b.y0), a.x1.max(b.x1), a.y1.max(b.y1)));
        r.pixel_box()
    }

    pub fn label(&self) -> String {
        format!("{} {}", self.color, self.kind.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas: usize,
    pub objects: Vec<ObjectSpec>,
}

fn shade(rgb: [f64; 3], s: f64) -> [f64; 3] {
    if s <= 1.0 {
        rgb.map(|v| v * s)
    } else {
        let t = (s - 1.0).min(1.0);
        rgb.map(|v| v + (1.0 - v) * t)
    }
}

impl SceneSpec {
    pub fn render(&self) -> ImageTensor {
        let mut img = ImageTensor::filled(self.canvas, self.canvas, quantize(BACKGROUND));
        for o in &self.objects {
            for q in &o.body {
                paint(&mut img, q, o.rgb);
            }
            for p in &o.parts {
                paint(&mut img, &p.rect, shade(o.rgb, p.shade));
            }
        }
        img
    }

    pub fn find(&self, color: &str, kind: ShapeKind) -> Option<usize> {
        self.objects.iter().position(|o| o.color == color && o.kind == kind)
    }
}

/// Colors are snapped to 8-bit levels so scenes survive a PNG round trip bitwise.
fn quantize(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

fn paint(img: &mut ImageTensor, q: &CellRect, rgb: [f64; 3]) {
    let rgb = quantize(rgb);
    for r in q.y0 * CELL..q.y1 * CELL {
        for c in q.x0 * CELL..q.x1 * CELL {
            img.set_pixel(r, c, rgb);
        }
    }
}

/// Lays out one object of `kind` inside the footprint starting at cell `(x, y)`, `w × h` cells.
fn layout(kind: ShapeKind, x: usize, y: usize, w: usize, h: usize, rng: &mut impl Rng) -> (Vec<CellRect>, Vec<(&'static str, CellRect, f64)>) {
    let (x1, y1) = (x + w, y + h);
    match kind {
        ShapeKind::House => {
            let roof_h = h / 3;
            let by = y + roof_h;
            let door_x = rng.gen_range(x..=x1 - 2);
            let door_y = y1 - rng.gen_range(2..=3);
            let door = CellRect::new(door_x, door_y, door_x + 2, y1);
            // Window sits on the opposite side of the door, in the upper body.
            let win_x = if door_x + 1 - x < w / 2 {
                rng.gen_range((door_x + 2).max(x1 - 3)..=x1 - 2)
            } else {
                rng.gen_range(x..=(x + 1).min(door_x - 2))
            };
            let win = CellRect::new(win_x, by + 1, win_x + 2, by + 3);
            (
                vec![CellRect::new(x, by, x1, y1)],
                vec![("roof", CellRect::new(x, y, x1, by), 0.55), ("door", door, 0.3), ("window", win, 1.6)],
            )
        }
        ShapeKind::Car => {
            let body_y = y + h / 2;
            let cab_w = rng.gen_range(w / 2..=w - 2);
            let cab_x = rng.gen_range(x + 1..=x1 - 1 - cab_w);
            let cabin = CellRect::new(cab_x, y + h / 4, cab_x + cab_w, body_y);
            let hood = if rng.gen_bool(0.5) { CellRect::new(x, body_y, x + 2, y1) } else { CellRect::new(x1 - 2, body_y, x1, y1) };
            (vec![CellRect::new(x, body_y, x1, y1)], vec![("cabin", cabin, 1.6), ("hood", hood, 0.45)])
        }
        ShapeKind::Tree => {
            let crown_h = (2 * h) / 3;
            let trunk_x = rng.gen_range(x + 1..=x1 - 3);
            (
                Vec::new(),
                vec![("crown", CellRect::new(x, y, x1, y + crown_h), 1.0), ("trunk", CellRect::new(trunk_x, y + crown_h, trunk_x + 2, y1), 0.35)],
            )
        }
        ShapeKind::Person => {
            let cx = x + w / 2;
            let head = CellRect::new(cx - 1, y, cx + 1, y + 2);
            let torso_w = rng.gen_range(3..=4);
            let tx = cx - torso_w / 2;
            let torso_y1 = y + 2 + (h - 2) / 2;
            let torso = CellRect::new(tx, y + 2, tx + torso_w, torso_y1);
            let legs = CellRect::new(cx - 1, torso_y1, cx + 1, y1);
            (Vec::new(), vec![("head", head, 1.5), ("torso", torso, 1.0), ("legs", legs, 0.4)])
        }
    }
}

/// Places objects in distinct quadrants of the canvas.
fn place(kinds: &[ShapeKind], colors: &[usize], canvas: usize, rng: &mut impl Rng) -> SceneSpec {
    let cells = canvas / CELL;
    let q = cells / 2;
    let mut slots = [(0, 0), (q, 0), (0, q), (q, q)];
    slots.shuffle(rng);
    let objects = kinds
        .iter()
        .zip(colors)
        .zip(slots)
        .map(|((&kind, &ci), (sx, sy))| {
            let w = rng.gen_range(q - 2..=q);
            let h = rng.gen_range(q - 2..=q);
            let x = sx + rng.gen_range(0..=q - w);
            let y = sy + rng.gen_range(0..=q - h);
            let (body, parts) = layout(kind, x, y, w, h, rng);
            let (cname, rgb) = COLORS[ci];
            ObjectSpec {
                kind,
                color: cname.to_string(),
                rgb,
                body,
                parts: parts.into_iter().map(|(n, rect, s)| PartSpec { name: n.to_string(), rect, shade: s }).collect(),
            }
        })
        .collect();
    SceneSpec { canvas, objects }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    SingleObject,
    MultiObject,
    Part,
    NoTarget,
}

impl SampleKind {
    pub const ALL: [SampleKind; 4] = [SampleKind::SingleObject, SampleKind::MultiObject, SampleKind::Part, SampleKind::NoTarget];
}

/// Ratios over single-object, multi-object, part, and no-target samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mix(pub [f64; 4]);

impl Default for Mix {
    fn default() -> Self {
        Mix([0.4, 0.2, 0.3, 0.1])
    }
}

impl std::str::FromStr for Mix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Config(format!("mix entry `{t}`: {e}"))))
            .collect::<Result<_>>()?;
        let arr: [f64; 4] = v.try_into().map_err(|_| Error::Config("mix needs exactly four ratios".into()))?;
        Ok(Mix(arr))
    }
}

impl Mix {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&r| !(r >= 0.0) || !r.is_finite()) {
            return Err(Error::Config(format!("mix ratios must be non-negative: {:?}", self.0)));
        }
        let s: f64 = self.0.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mix ratios sum to {s}, not 1")));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `n` samples; ties go to the earlier class.
    pub fn apportion(&self, n: usize) -> [usize; 4] {
        let exact = self.0.map(|r| r * n as f64);
        let mut counts = exact.map(|e| e.floor() as usize);
        let mut left = n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub canvas: usize,
    pub kinds: Vec<ShapeKind>,
    pub with_parts: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { canvas: DEFAULT_CANVAS, kinds: ShapeKind::ALL.to_vec(), with_parts: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingSample {
    pub id: String,
    pub image: ImageTensor,
    pub expression: String,
    pub tokens: Vec<usize>,
    /// Union taken for multi-target references; empty for no-target.
    pub gt_masks: Vec<BinaryMask>,
    pub granularity: Granularity,
    pub no_target: bool,
    pub object_boxes: Vec<BoundingBox>,
    pub part_boxes: Vec<BoundingBox>,
    pub kind: Option<SampleKind>,
    pub scene: Option<SceneSpec>,
}

impl GroundingSample {
    pub fn target_mask(&self) -> BinaryMask {
        let (h, w) = (self.image.height(), self.image.width());
        self.gt_masks.iter().fold(BinaryMask::empty(h, w), |acc, m| acc.union(m).expect("masks share the canvas"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.expression.trim().is_empty() {
            return Err(Error::InvalidInput(format!("sample `{}` has an empty expression", self.id)));
        }
        if self.no_target && self.gt_masks.iter().any(|m| !m.is_empty()) {
            return Err(Error::InvalidInput(format!("no-target sample `{}` carries masks", self.id)));
        }
        if self.granularity == Granularity::Part && !self.no_target && self.gt_masks.len() != 1 {
            return Err(Error::InvalidInput(format!("part sample `{}` needs exactly one mask", self.id)));
        }
        Ok(())
    }
}

/// Closed word set of every template.
pub fn template_words() -> Vec<String> {
    let mut words = vec!["the".to_string(), "all".to_string(), "of".to_string()];
    words.extend(COLORS.iter().map(|(c, _)| c.to_string()));
    for k in ShapeKind::ALL {
        words.push(k.name().to_string());
        words.push(k.plural());
        words.extend(k.part_names().iter().map(|p| p.to_string()));
    }
    words
}

pub fn synth_vocabulary() -> Vocabulary {
    Vocabulary::new(template_words())
}

pub fn object_expression(color: &str, kind: ShapeKind) -> String {
    format!("the {color} {}", kind.name())
}

pub fn part_expression(part: &str, color: &str, kind: ShapeKind) -> String {
    format!("{part} of the {color} {}", kind.name())
}

pub fn multi_expression(kind: ShapeKind) -> String {
    format!("all {}", kind.plural())
}

fn distinct_pairs(n: usize, kinds: &[ShapeKind], rng: &mut impl Rng) -> Vec<(ShapeKind, usize)> {
    let mut out: Vec<(ShapeKind, usize)> = Vec::with_capacity(n);
    while out.len() < n {
        let pair = (*kinds.choose(rng).expect("kinds non-empty"), rng.gen_range(0..COLORS.len()));
        if !out.contains(&pair) {
            out.push(pair);
        }
    }
    out
}

fn scene_from(pairs: &[(ShapeKind, usize)], canvas: usize, rng: &mut impl Rng) -> SceneSpec {
    let kinds: Vec<ShapeKind> = pairs.iter().map(|p| p.0).collect();
    let colors: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    place(&kinds, &colors, canvas, rng)
}

fn boxes(scene: &SceneSpec) -> (Vec<BoundingBox>, Vec<BoundingBox>) {
    let objects = scene.objects.iter().map(ObjectSpec::bbox).collect();
    let parts = scene.objects.iter().flat_map(|o| o.parts.iter().map(|p| p.rect.pixel_box())).collect();
    (objects, parts)
}

fn make_sample(cfg: &SynthConfig, vocab: &Vocabulary, kind: SampleKind, id: String, rng: &mut ChaCha8Rng) -> GroundingSample {
    let canvas = cfg.canvas;
    let (scene, expression, gt_masks, granularity, no_target) = match kind {
        SampleKind::SingleObject | SampleKind::Part => {
            let n = rng.gen_range(1..=3);
            let pairs = distinct_pairs(n, &cfg.kinds, rng);
            let scene = scene_from(&pairs, canvas, rng);
            let t = rng.gen_range(0..n);
            let o = &scene.objects[t];
            if kind == SampleKind::Part {
                let pi = rng.gen_range(0..o.parts.len());
                let e = part_expression(&o.parts[pi].name, &o.color, o.kind);
                let m = o.part_mask(pi, canvas);
                (scene.clone(), e, vec![m], Granularity::Part, false)
            } else {
                let e = object_expression(&o.color, o.kind);
                let m = o.mask(canvas);
                (scene.clone(), e, vec![m], Granularity::Object, false)
            }
        }
        SampleKind::MultiObject => {
            let k = *cfg.kinds.choose(rng).expect("kinds non-empty");
            let same = rng.gen_range(2..=3);
            let mut colors: Vec<usize> = (0..COLORS.len()).collect();
            colors.shuffle(rng);
            let mut pairs: Vec<(ShapeKind, usize)> = colors[..same].iter().map(|&c| (k, c)).collect();
            if same == 2 && rng.gen_bool(0.5) {
                let others: Vec<ShapeKind> = cfg.kinds.iter().copied().filter(|&x| x != k).collect();
                if let Some(&o) = others.choose(rng) {
                    pairs.push((o, rng.gen_range(0..COLORS.len())));
                }
            }
            let scene = scene_from(&pairs, canvas, rng);
            let masks = scene.objects.iter().filter(|o| o.kind == k).map(|o| o.mask(canvas)).collect();
            (scene, multi_expression(k), masks, Granularity::Object, false)
        }
        SampleKind::NoTarget => {
            let n = rng.gen_range(1..=3);
            let pairs = distinct_pairs(n + 1, &cfg.kinds, rng);
            let (absent, present) = pairs.split_last().expect("n+1 pairs");
            let scene = scene_from(present, canvas, rng);
            (scene, object_expression(COLORS[absent.1].0, absent.0), Vec::new(), Granularity::Object, true)
        }
    };
    let (object_boxes, part_boxes) = boxes(&scene);
    GroundingSample {
        id,
        image: scene.render(),
        tokens: vocab.encode(&expression),
        expression,
        gt_masks,
        granularity,
        no_target,
        object_boxes,
        part_boxes,
        kind: Some(kind),
        scene: Some(scene),
    }
}

pub fn generate_dataset(seed: u64, n_samples: usize, mix: Mix) -> Result<Vec<GroundingSample>> {
    generate_dataset_with(&SynthConfig::default(), seed, n_samples, mix)
}

/// Deterministic given `seed`; each sample draws from its own ChaCha stream.
pub fn generate_dataset_with(cfg: &SynthConfig, seed: u64, n_samples: usize, mix: Mix) -> Result<Vec<GroundingSample>> {
    mix.validate()?;
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    if cfg.kinds.is_empty() {
        return Err(Error::Config("no shape kinds enabled".into()));
    }
    if mix.0[2] > 0.0 && !cfg.with_parts {
        return Err(Error::Config("part samples requested but part layouts are disabled".into()));
    }
    if cfg.canvas % (2 * CELL) != 0 || cfg.canvas < 48 {
        return Err(Error::Config(format!("canvas {} must be a multiple of {} and at least 48", cfg.canvas, 2 * CELL)));
    }
    let counts = mix.apportion(n_samples);
    let mut kinds: Vec<SampleKind> = SampleKind::ALL.iter().zip(counts).flat_map(|(&k, c)| std::iter::repeat(k).take(c)).collect();
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    kinds.shuffle(&mut master);
    let vocab = synth_vocabulary();
    let mut out = Vec::with_capacity(n_samples);
    for (i, kind) in kinds.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let mut s = make_sample(cfg, &vocab, kind, format!("s{seed}_{i:05}"), &mut rng);
        if !cfg.with_parts {
            s.part_boxes.clear();
        }
        out.push(s);
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct AnnotationRecord {
    id: String,
    image: String,
    expression: String,
    #[serde(default)]
    granularity: Option<Granularity>,
    #[serde(default)]
    no_target: bool,
    #[serde(default)]
    masks: Vec<RleMask>,
    #[serde(default)]
    boxes: Vec<[f64; 4]>,
    #[serde(default)]
    part_boxes: Vec<[f64; 4]>,
}

const DATA_URL_PREFIX: &str = "data:image/png;base64,";

fn load_image(source: &str, base: &Path) -> std::result::Result<ImageTensor, String> {
    let inline = source.strip_prefix(DATA_URL_PREFIX);
    let bytes = match inline {
        Some(b64) => base64::engine::general_purpose::STANDARD.decode(b64).map_err(|e| format!("bad base64 image: {e}"))?,
        None => {
            let p = base.join(source);
            if p.is_file() {
                std::fs::read(&p).map_err(|e| format!("reading {}: {e}", p.display()))?
            } else {
                base64::engine::general_purpose::STANDARD
                    .decode(source)
                    .map_err(|_| format!("image `{source}` is neither a file nor base64 PNG data"))?
            }
        }
    };
    ImageTensor::from_png_bytes(&bytes).map_err(|e| e.to_string())
}

fn to_boxes(raw: &[[f64; 4]]) -> std::result::Result<Vec<BoundingBox>, String> {
    raw.iter().map(|b| BoundingBox::pixel(b[0], b[1], b[2], b[3]).map_err(|e| e.to_string())).collect()
}

fn parse_record(line: &str, base: &Path, vocab: &Vocabulary) -> std::result::Result<GroundingSample, String> {
    let rec: AnnotationRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let image = load_image(&rec.image, base)?;
    let mut gt_masks = Vec::with_capacity(rec.masks.len());
    for m in &rec.masks {
        if m.counts.is_empty() {
            continue;
        }
        let mask = rle_decode(m).map_err(|e| e.to_string())?;
        if mask.shape() != (image.height(), image.width()) {
            return Err(format!("mask {:?} does not match image {}x{}", mask.shape(), image.height(), image.width()));
        }
        gt_masks.push(mask);
    }
    let sample = GroundingSample {
        id: rec.id,
        tokens: vocab.encode(&rec.expression),
        expression: rec.expression,
        gt_masks,
        granularity: rec.granularity.unwrap_or(Granularity::Object),
        no_target: rec.no_target,
        object_boxes: to_boxes(&rec.boxes)?,
        part_boxes: to_boxes(&rec.part_boxes)?,
        image,
        kind: None,
        scene: None,
    };
    sample.validate().map_err(|e| e.to_string())?;
    Ok(sample)
}

/// Reads a line-delimited annotation file; blank lines are skipped.
pub fn load_refcoco_style(path: &Path, vocab: &Vocabulary) -> Result<Vec<GroundingSample>> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, base, vocab).map_err(|msg| Error::Parse { line: i + 1, msg })?);
    }
    Ok(out)
}

/// One annotation line for `sample`, with the image inlined.
pub fn to_annotation_line(sample: &GroundingSample) -> Result<String> {
    let png = sample.image.to_png_bytes()?;
    let arr = |b: &BoundingBox| b.to_array();
    let v = serde_json::json!({
        "id": sample.id,
        "image": format!("{DATA_URL_PREFIX}{}", base64::engine::general_purpose::STANDARD.encode(png)),
        "expression": sample.expression,
        "granularity": sample.granularity,
        "no_target": sample.no_target,
        "masks": sample.gt_masks.iter().map(crate::geometry::rle_encode).collect::<Vec<_>>(),
        "boxes": sample.object_boxes.iter().map(arr).collect::<Vec<_>>(),
        "part_boxes": sample.part_boxes.iter().map(arr).collect::<Vec<_>>(),
    });
    Ok(serde_json::to_string(&v)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rle_encode;
    use std::io::Write;

    #[test]
    fn apportionment_matches_largest_remainder() {
        assert_eq!(Mix([0.4, 0.2, 0.3, 0.1]).apportion(64), [26, 13, 19, 6]);
        assert_eq!(Mix([1.0, 0.0, 0.0, 0.0]).apportion(7), [7, 0, 0, 0]);
        assert_eq!(Mix([0.25; 4]).apportion(5), [2, 1, 1, 1]);
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let a = generate_dataset(3, 64, Mix::default()).unwrap();
        let b = generate_dataset(3, 64, Mix::default()).unwrap();
        assert_eq!(a, b);
        let count = |k| a.iter().filter(|s| s.kind == Some(k)).count();
        assert_eq!(
            [count(SampleKind::SingleObject), count(SampleKind::MultiObject), count(SampleKind::Part), count(SampleKind::NoTarget)],
            [26, 13, 19, 6]
        );
        let single = generate_dataset(4, 10, Mix([1.0, 0.0, 0.0, 0.0])).unwrap();
        assert!(single.iter().all(|s| s.kind == Some(SampleKind::SingleObject)));
    }

    #[test]
    fn sample_invariants_hold() {
        let vocab = synth_vocabulary();
        assert!(vocab.len() < 64 + 6);
        for s in generate_dataset(11, 200, Mix::default()).unwrap() {
            s.validate().unwrap();
            assert!(!s.tokens.is_empty() && !s.tokens.contains(&vocab.id(crate::mgfe::UNK).unwrap()));
            let scene = s.scene.as_ref().unwrap();
            assert_eq!(scene.render(), s.image);
            let object_masks: Vec<BinaryMask> = scene.objects.iter().map(|o| o.mask(64)).collect();
            for (o, om) in scene.objects.iter().zip(&object_masks) {
                assert!(om.area() > 0);
                for i in 0..o.parts.len() {
                    let pm = o.part_mask(i, 64);
                    assert!(pm.is_subset_of(om));
                    assert!(pm.area() >= 64, "{} of {}", o.parts[i].name, o.kind.name());
                }
                for p in &o.parts {
                    assert!(o.bbox().contains(&p.rect.pixel_box()));
                }
            }
            for i in 0..object_masks.len() {
                for j in i + 1..object_masks.len() {
                    assert_eq!(object_masks[i].intersection_area(&object_masks[j]).unwrap(), 0);
                }
            }
            // Template determines granularity.
            let part_template = s.expression.contains(" of ");
            assert_eq!(part_template, s.granularity == Granularity::Part);
            match s.kind.unwrap() {
                SampleKind::NoTarget => assert!(s.no_target && s.gt_masks.is_empty()),
                SampleKind::MultiObject => assert!((2..=3).contains(&s.gt_masks.len())),
                _ => assert_eq!(s.gt_masks.len(), 1),
            }
            assert!(s.no_target || s.target_mask().area() >= 64);
        }
    }

    #[test]
    fn infeasible_mixes_are_config_errors() {
        assert!(matches!(generate_dataset(1, 4, Mix([0.5, 0.5, 0.5, 0.0])), Err(Error::Config(_))));
        assert!(matches!(generate_dataset(1, 0, Mix::default()), Err(Error::Config(_))));
        let cfg = SynthConfig { with_parts: false, ..SynthConfig::default() };
        assert!(matches!(generate_dataset_with(&cfg, 1, 4, Mix::default()), Err(Error::Config(_))));
        assert!(generate_dataset_with(&cfg, 1, 4, Mix([0.5, 0.5, 0.0, 0.0])).is_ok());
        assert!("0.4,0.2,0.3".parse::<Mix>().is_err());
        assert_eq!("0.4, 0.2,0.3,0.1".parse::<Mix>().unwrap(), Mix::default());
    }

    #[test]
    fn loader_round_trips_and_reports_line_numbers() {
        let vocab = synth_vocabulary();
        let data = generate_dataset(5, 12, Mix::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.jsonl");
        let mut f = File::create(&path).unwrap();
        for s in &data {
            writeln!(f, "{}", to_annotation_line(s).unwrap()).unwrap();
        }
        drop(f);
        let back = load_refcoco_style(&path, &vocab).unwrap();
        assert_eq!(back.len(), data.len());
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.granularity, b.granularity);
            assert_eq!(a.no_target, b.no_target);
            assert_eq!(a.target_mask(), b.target_mask());
            assert_eq!(a.object_boxes, b.object_boxes);
            for m in &b.gt_masks {
                assert_eq!(rle_decode(&rle_encode(m)).unwrap(), *m);
            }
        }

        let png = ImageTensor::filled(8, 8, [0.0; 3]).to_png_bytes().unwrap();
        std::fs::write(dir.path().join("img.png"), png).unwrap();
        let bad = dir.path().join("bad.jsonl");
        std::fs::write(
            &bad,
            concat!(
                r#"{"id":"a","image":"img.png","expression":"the red house","no_target":true,"masks":[{"size":[8,8],"counts":[]}]}"#,
                "\n",
                r#"{"id":"b","image":"img.png","expression":"roof of the red house","granularity":"part","masks":[{"size":[8,8],"counts":[10,4,50]}]}"#,
                "\n",
                r#"{"id":"c","image":"img.png"}"#,
                "\n"
            ),
        )
        .unwrap();
        match load_refcoco_style(&bad, &vocab) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let good: String = std::fs::read_to_string(&bad).unwrap().lines().take(2).map(|l| format!("{l}\n")).collect();
        std::fs::write(&bad, good).unwrap();
        let s = load_refcoco_style(&bad, &vocab).unwrap();
        assert!(s[0].no_target && s[0].gt_masks.is_empty() && s[0].granularity == Granularity::Object);
        assert_eq!(s[1].granularity, Granularity::Part);
        assert_eq!(s[1].target_mask().area(), 4);
    }
}
