//! Box-prompted data generation: caption and segment each box, decompose objects into parts,
//! score every pair, keep those above the similarity threshold, and stream the result to
//! line-delimited JSON with a resumable commit token.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{mask_iou, normalize_box, rle_decode, rle_encode, BinaryMask, BoundingBox, CoordSpace, RleMask};
use crate::synth::{SceneSpec, ShapeKind};
use crate::types::{Granularity, ImageTensor};

/// Pairs are kept iff their score is strictly above this.
pub const SIMILARITY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct EngineImage {
    pub id: String,
    pub image: ImageTensor,
    /// Labeled object boxes in pixel coordinates.
    pub objects: Vec<(String, BoundingBox)>,
    pub scene: Option<SceneSpec>,
}

impl EngineImage {
    pub fn from_scene(id: impl Into<String>, scene: SceneSpec) -> Self {
        let objects = scene.objects.iter().map(|o| (o.label(), o.bbox())).collect();
        Self { id: id.into(), image: scene.render(), objects, scene: Some(scene) }
    }

    pub fn full_box(&self) -> BoundingBox {
        BoundingBox::pixel(0.0, 0.0, self.image.width() as f64, self.image.height() as f64).expect("non-empty image")
    }
}

pub trait BackendClients {
    fn caption(&mut self, image: &EngineImage, norm_box: &BoundingBox) -> Result<String>;
    /// Mask for `pixel_box`; with `label`, the named part inside it.
    fn segment(&mut self, image: &EngineImage, pixel_box: &BoundingBox, label: Option<&str>) -> Result<BinaryMask>;
    fn part_vocab(&mut self, object_label: &str) -> Result<Vec<String>>;
    fn score(&mut self, image: &EngineImage, crop: &BoundingBox, caption: &str) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedPair {
    pub image_id: String,
    pub index: usize,
    pub level: Granularity,
    pub pixel_box: [f64; 4],
    pub norm_box: [f64; 4],
    pub mask: RleMask,
    pub caption: String,
    pub label: Option<String>,
    /// Index of the parent object pair within the same image.
    pub parent: Option<usize>,
    pub score: f64,
    /// Which crop the score was computed on.
    pub score_crop: String,
    pub kept: bool,
    /// Part box not contained in its parent object box.
    pub inconsistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFailure {
    pub image_id: String,
    pub index: usize,
    pub error: String,
}

pub fn part_caption(part: &str, object: &str) -> String {
    format!("{part} of {object}")
}

fn failure(image: &EngineImage, index: usize, e: &Error) -> PairFailure {
    log::warn!("image {} pair {index}: {e}", image.id);
    PairFailure { image_id: image.id.clone(), index, error: e.to_string() }
}

/// One pair per box; the captioner sees the normalized box, the segmenter the pixel box.
pub fn generate_object_pairs(
    image: &EngineImage,
    boxes: &[(Option<String>, BoundingBox)],
    clients: &mut dyn BackendClients,
) -> Result<(Vec<GeneratedPair>, Vec<PairFailure>)> {
    let (w, h) = (image.image.width() as u32, image.image.height() as u32);
    let mut pairs = Vec::new();
    let mut failures = Vec::new();
    for (index, (label, b)) in boxes.iter().enumerate() {
        if b.space != CoordSpace::Pixel {
            return Err(Error::InvalidInput("object boxes must be in pixel coordinates".into()));
        }
        let norm = normalize_box(b, w, h)?;
        let attempt = (|| -> Result<GeneratedPair> {
            let caption = clients.caption(image, &norm)?;
            let mask = clients.segment(image, b, None)?;
            let score = clients.score(image, b, &caption)?;
            Ok(GeneratedPair {
                image_id: image.id.clone(),
                index,
                level: Granularity::Object,
                pixel_box: b.to_array(),
                norm_box: norm.to_array(),
                mask: rle_encode(&mask),
                caption,
                label: label.clone(),
                parent: None,
                score,
                score_crop: "object".into(),
                kept: false,
                inconsistent: false,
            })
        })();
        match attempt {
            Ok(p) => pairs.push(p),
            Err(e) => failures.push(failure(image, index, &e)),
        }
    }
    Ok((pairs, failures))
}

/// Part pairs of one object pair, captioned with the part template and scored on the part crop.
pub fn generate_part_pairs(
    image: &EngineImage,
    object: &GeneratedPair,
    first_index: usize,
    clients: &mut dyn BackendClients,
) -> Result<(Vec<GeneratedPair>, Vec<PairFailure>)> {
    let label = object.label.clone().unwrap_or_else(|| object.caption.clone());
    let vocab = match clients.part_vocab(&label) {
        Ok(v) => v,
        Err(e) => return Ok((Vec::new(), vec![failure(image, first_index, &e)])),
    };
    if vocab.is_empty() {
        log::warn!("image {}: empty part vocabulary for `{label}`", image.id);
    }
    let ob = object.pixel_box;
    let object_box = BoundingBox::pixel(ob[0], ob[1], ob[2], ob[3])?;
    let (w, h) = (image.image.width() as u32, image.image.height() as u32);
    let mut pairs = Vec::new();
    let mut failures = Vec::new();
    for (k, part) in vocab.iter().enumerate() {
        let index = first_index + k;
        let attempt = (|| -> Result<GeneratedPair> {
            let mask = clients.segment(image, &object_box, Some(part))?;
            let pb = mask.bounding_box().ok_or_else(|| Error::Backend(format!("part `{part}` not found")))?;
            let norm = normalize_box(&pb, w, h)?;
            // The dense caption is requested for parity with object pairs; training uses the template.
            clients.caption(image, &norm)?;
            let caption = part_caption(part, &label);
            let score = clients.score(image, &pb, &caption)?;
            Ok(GeneratedPair {
                image_id: image.id.clone(),
                index,
                level: Granularity::Part,
                pixel_box: pb.to_array(),
                norm_box: norm.to_array(),
                mask: rle_encode(&mask),
                caption,
                label: Some(part.clone()),
                parent: Some(object.index),
                score,
                score_crop: "part".into(),
                kept: false,
                inconsistent: !object_box.contains(&pb),
            })
        })();
        match attempt {
            Ok(p) => pairs.push(p),
            Err(e) => failures.push(failure(image, index, &e)),
        }
    }
    Ok((pairs, failures))
}

pub fn is_kept(score: f64) -> bool {
    score > SIMILARITY_THRESHOLD
}

/// Sets `kept` on every pair and returns the kept ones.
pub fn filter_pairs(pairs: &mut [GeneratedPair]) -> Vec<GeneratedPair> {
    for p in pairs.iter_mut() {
        p.kept = is_kept(p.score);
    }
    pairs.iter().filter(|p| p.kept).cloned().collect()
}

/// All pairs of one image, in output order.
pub fn process_image(image: &EngineImage, clients: &mut dyn BackendClients, include_full_image: bool) -> Result<(Vec<GeneratedPair>, Vec<PairFailure>)> {
    let mut boxes: Vec<(Option<String>, BoundingBox)> = Vec::new();
    if include_full_image {
        boxes.push((None, image.full_box()));
    }
    boxes.extend(image.objects.iter().map(|(l, b)| (Some(l.clone()), *b)));
    let (mut objects, mut failures) = generate_object_pairs(image, &boxes, clients)?;
    filter_pairs(&mut objects);
    let mut next = boxes.len();
    let mut parts = Vec::new();
    for o in objects.iter().filter(|o| o.kept && o.label.is_some()) {
        let (mut p, f) = generate_part_pairs(image, o, next, clients)?;
        next += p.len() + f.len();
        filter_pairs(&mut p);
        parts.extend(p);
        failures.extend(f);
    }
    objects.extend(parts);
    Ok((objects, failures))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub processed: usize,
    pub kept: usize,
    pub dropped: usize,
    pub failed: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub workers: usize,
    pub include_full_image: bool,
    /// Only images with id greater than this are processed; output is appended.
    pub resume_after: Option<String>,
    /// Stops after committing this many images (simulated interruption).
    pub stop_after: Option<usize>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self { workers: 2, include_full_image: true, resume_after: None, stop_after: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeToken {
    pub last_image_id: String,
    /// Output length in bytes at the commit.
    pub offset: u64,
}

pub fn resume_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".resume");
    PathBuf::from(s)
}

pub fn read_resume_token(output: &Path) -> Result<Option<ResumeToken>> {
    match std::fs::read_to_string(resume_path(output)) {
        Ok(s) => Ok(Some(serde_json::from_str(&s)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn write_resume_token(output: &Path, token: &ResumeToken) -> Result<()> {
    let path = resume_path(output);
    let tmp = path.with_extension("resume.tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(serde_json::to_string(token)?.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

type ImageResult = (usize, Result<(Vec<GeneratedPair>, Vec<PairFailure>)>);

/// Processes `images` (sorted by id) with a bounded worker pool and a single writer. Each
/// image's records are flushed and synced before the resume token moves past it.
pub fn run_pipeline<F>(images: &[EngineImage], make_clients: F, output: &Path, opts: &PipelineOptions) -> Result<RunSummary>
where
    F: Fn() -> Result<Box<dyn BackendClients>> + Sync,
{
    let mut order: Vec<&EngineImage> = images.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(after) = &opts.resume_after {
        order.retain(|im| im.id.as_str() > after.as_str());
    }
    if let Some(limit) = opts.stop_after {
        order.truncate(limit);
    }

    let file = match (&opts.resume_after, read_resume_token(output)?) {
        (Some(after), Some(tok)) if &tok.last_image_id == after => {
            let f = OpenOptions::new().write(true).open(output)?;
            // Anything written after the last commit is discarded.
            f.set_len(tok.offset)?;
            f
        }
        (Some(after), _) => {
            return Err(Error::InvalidState(format!("no committed resume token for `{after}` next to {}", output.display())))
        }
        (None, _) => File::create(output)?,
    };
    let mut offset = file.metadata()?.len();
    let mut writer = BufWriter::new(file);
    use std::io::Seek;
    writer.seek(std::io::SeekFrom::End(0))?;

    let workers = opts.workers.max(1).min(order.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::sync_channel::<ImageResult>(workers * 2);
    let mut summary = RunSummary::default();
    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            let order = &order;
            let make_clients = &make_clients;
            scope.spawn(move || {
                let mut clients = match make_clients() {
                    Ok(c) => Some(c),
                    Err(e) => {
                        log::error!("backend start failed: {e}");
                        None
                    }
                };
                loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= order.len() {
                        break;
                    }
                    let res = match clients.as_mut() {
                        Some(c) => process_image(order[i], c.as_mut(), opts.include_full_image),
                        None => Err(Error::Backend("backend unavailable".into())),
                    };
                    if tx.send((i, res)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(tx);
        let mut pending: BTreeMap<usize, Result<(Vec<GeneratedPair>, Vec<PairFailure>)>> = BTreeMap::new();
        let mut cursor = 0;
        for (i, res) in rx {
            pending.insert(i, res);
            while let Some(res) = pending.remove(&cursor) {
                let image = order[cursor];
                match res {
                    Ok((pairs, failures)) => {
                        for p in &pairs {
                            let line = serde_json::to_string(p)?;
                            writer.write_all(line.as_bytes())?;
                            writer.write_all(b"\n")?;
                            offset += line.len() as u64 + 1;
                            if p.kept {
                                summary.kept += 1;
                            } else {
                                summary.dropped += 1;
                            }
                        }
                        summary.failed += failures.len();
                    }
                    Err(e) => {
                        log::warn!("image {} failed: {e}", image.id);
                        summary.failed += 1;
                    }
                }
                writer.flush()?;
                writer.get_ref().sync_data()?;
                write_resume_token(output, &ResumeToken { last_image_id: image.id.clone(), offset })?;
                summary.processed += 1;
                cursor += 1;
            }
        }
        Ok(())
    })?;
    Ok(summary)
}

pub fn read_pairs(path: &Path) -> Result<Vec<GeneratedPair>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?);
        }
    }
    Ok(out)
}

/// PNG images from `dir`, sorted by file stem. A sibling `<stem>.json` scene description,
/// when present, supplies labeled object boxes and the geometry used by the mock backends.
pub fn load_image_dir(dir: &Path) -> Result<Vec<EngineImage>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    entries.sort();
    let mut out = Vec::with_capacity(entries.len());
    for p in entries {
        let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let image = ImageTensor::from_png_bytes(&std::fs::read(&p)?)?;
        let sidecar = p.with_extension("json");
        let (objects, scene) = if sidecar.is_file() {
            let scene: SceneSpec = serde_json::from_str(&std::fs::read_to_string(&sidecar)?)?;
            (scene.objects.iter().map(|o| (o.label(), o.bbox())).collect(), Some(scene))
        } else {
            (Vec::new(), None)
        };
        out.push(EngineImage { id, image, objects, scene });
    }
    Ok(out)
}

/// In-repo stand-ins: template captioner, geometric segmenter over the scene, closed part
/// vocabulary, and a lexical-overlap scorer with seeded jitter.
#[derive(Debug, Clone)]
pub struct MockClients {
    pub seed: u64,
    /// Half-width of the deterministic score jitter.
    pub jitter: f64,
}

impl MockClients {
    pub fn new(seed: u64) -> Self {
        Self { seed, jitter: 0.3 }
    }

    fn jitter(&self, parts: &[&str]) -> f64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for p in parts {
            h.update(p.as_bytes());
            h.update([0]);
        }
        let d = h.finalize();
        let u = u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) as f64 / u64::MAX as f64;
        (2.0 * u - 1.0) * self.jitter
    }
}

fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Reference description of the best-matching object or part for `b`.
fn describe(scene: &SceneSpec, b: &BoundingBox) -> Option<String> {
    let mut best: Option<(f64, String)> = None;
    for o in &scene.objects {
        let cands = std::iter::once((o.bbox(), o.label()))
            .chain(o.parts.iter().map(|p| (p.rect.pixel_box(), part_caption(&p.name, &o.label()))));
        for (bb, text) in cands {
            let iou = box_iou(&bb, b);
            if iou >= 0.5 && best.as_ref().map_or(true, |(s, _)| iou > *s) {
                best = Some((iou, text));
            }
        }
    }
    best.map(|(_, t)| t)
}

fn denormalize(b: &BoundingBox, w: usize, h: usize) -> BoundingBox {
    if b.space == CoordSpace::Pixel {
        return *b;
    }
    let sx = w as f64 / crate::geometry::NORM_MAX;
    let sy = h as f64 / crate::geometry::NORM_MAX;
    BoundingBox::pixel(b.x0 * sx, b.y0 * sy, b.x1 * sx, b.y1 * sy).unwrap_or(*b)
}

fn fmt_box(b: &BoundingBox) -> String {
    let a = b.to_array();
    format!("[{},{},{},{}]", a[0], a[1], a[2], a[3])
}

impl BackendClients for MockClients {
    fn caption(&mut self, image: &EngineImage, norm_box: &BoundingBox) -> Result<String> {
        let px = denormalize(norm_box, image.image.width(), image.image.height());
        if let Some(scene) = &image.scene {
            if box_iou(&px, &image.full_box()) > 0.99 {
                return Ok(format!("a scene with {} objects", scene.objects.len()));
            }
            if let Some(d) = describe(scene, &px) {
                return Ok(d);
            }
        }
        Ok(format!("object at {}", fmt_box(norm_box)))
    }

    fn segment(&mut self, image: &EngineImage, pixel_box: &BoundingBox, label: Option<&str>) -> Result<BinaryMask> {
        let (h, w) = (image.image.height(), image.image.width());
        let rect = |b: &BoundingBox| {
            BinaryMask::from_fn(h, w, |r, c| {
                let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1
            })
        };
        let Some(scene) = &image.scene else {
            return match label {
                None => Ok(rect(pixel_box)),
                Some(l) => Err(Error::Backend(format!("cannot localize part `{l}` without scene geometry"))),
            };
        };
        let target = rect(pixel_box);
        let best = scene
            .objects
            .iter()
            .map(|o| (mask_iou(&o.mask(scene.canvas), &target).unwrap_or(0.0), o))
            .filter(|(iou, _)| *iou > 0.0)
            .max_by(|a, b| a.0.total_cmp(&b.0));
        match (best, label) {
            (Some((_, o)), None) => Ok(o.mask(scene.canvas)),
            (Some((_, o)), Some(l)) => match o.parts.iter().position(|p| p.name == l) {
                Some(i) => Ok(o.part_mask(i, scene.canvas)),
                None => Err(Error::Backend(format!("no part `{l}` on {}", o.label()))),
            },
            (None, None) => Ok(target),
            (None, Some(l)) => Err(Error::Backend(format!("no object under box for part `{l}`"))),
        }
    }

    fn part_vocab(&mut self, object_label: &str) -> Result<Vec<String>> {
        let noun = object_label.split_whitespace().last().unwrap_or_default();
        Ok(ShapeKind::ALL
            .iter()
            .find(|k| k.name() == noun)
            .map(|k| k.part_names().iter().map(|s| s.to_string()).collect())
            .unwrap_or_default())
    }

    fn score(&mut self, image: &EngineImage, crop: &BoundingBox, caption: &str) -> Result<f64> {
        let reference = image.scene.as_ref().and_then(|s| describe(s, crop)).unwrap_or_default();
        let words: Vec<&str> = caption.split_whitespace().collect();
        let base = if words.is_empty() {
            0.0
        } else {
            words.iter().filter(|w| reference.split_whitespace().any(|r| r == **w)).count() as f64 / words.len() as f64
        };
        let j = self.jitter(&[&image.id, &fmt_box(crop), caption]);
        Ok((base + j).clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub op: String,
    pub image: String,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Answers one wire request with `clients`, looking images up by id.
pub fn serve_request(clients: &mut dyn BackendClients, images: &BTreeMap<String, EngineImage>, req: &BackendRequest) -> BackendResponse {
    let mut run = || -> Result<serde_json::Value> {
        let image = || images.get(&req.image).ok_or_else(|| Error::Backend(format!("unknown image `{}`", req.image)));
        let bbox = || -> Result<BoundingBox> {
            let b = req.bbox.ok_or_else(|| Error::Backend("missing box".into()))?;
            BoundingBox::pixel(b[0], b[1], b[2], b[3])
        };
        Ok(match req.op.as_str() {
            "caption" => {
                let b = req.bbox.ok_or_else(|| Error::Backend("missing box".into()))?;
                let nb = BoundingBox::new(b[0], b[1], b[2], b[3], CoordSpace::Norm999)?;
                serde_json::Value::String(clients.caption(image()?, &nb)?)
            }
            "segment" => serde_json::to_value(rle_encode(&clients.segment(image()?, &bbox()?, req.label.as_deref())?))?,
            "part_vocab" => serde_json::to_value(clients.part_vocab(req.label.as_deref().unwrap_or_default())?)?,
            "score" => serde_json::json!(clients.score(image()?, &bbox()?, req.caption.as_deref().unwrap_or_default())?),
            other => return Err(Error::Backend(format!("unknown op `{other}`"))),
        })
    };
    match run() {
        Ok(v) => BackendResponse { ok: true, payload: Some(v), error: None },
        Err(e) => BackendResponse { ok: false, payload: None, error: Some(e.to_string()) },
    }
}

/// Backends in a child process speaking line-delimited JSON over stdio.
pub struct SubprocessClients {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl SubprocessClients {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program).args(args).stdin(Stdio::piped()).stdout(Stdio::piped()).spawn()?;
        let stdin = child.stdin.take().ok_or_else(|| Error::Backend("no stdin".into()))?;
        let stdout = BufReader::new(child.stdout.take().ok_or_else(|| Error::Backend("no stdout".into()))?);
        Ok(Self { child, stdin, stdout })
    }

    fn call(&mut self, req: BackendRequest) -> Result<serde_json::Value> {
        serde_json::to_writer(&mut self.stdin, &req)?;
        self.stdin.write_all(b"\n")?;
        self.stdin.flush()?;
        let mut line = String::new();
        if self.stdout.read_line(&mut line)? == 0 {
            return Err(Error::Backend("backend closed its output".into()));
        }
        let resp: BackendResponse = serde_json::from_str(&line)?;
        match (resp.ok, resp.payload) {
            (true, Some(p)) => Ok(p),
            _ => Err(Error::Backend(resp.error.unwrap_or_else(|| "backend returned no payload".into()))),
        }
    }

    fn request(op: &str, image: &EngineImage) -> BackendRequest {
        BackendRequest { op: op.into(), image: image.id.clone(), bbox: None, label: None, caption: None }
    }
}

impl Drop for SubprocessClients {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl BackendClients for SubprocessClients {
    fn caption(&mut self, image: &EngineImage, norm_box: &BoundingBox) -> Result<String> {
        let req = BackendRequest { bbox: Some(norm_box.to_array()), ..Self::request("caption", image) };
        match self.call(req)? {
            serde_json::Value::String(s) => Ok(s),
            other => Err(Error::Backend(format!("caption payload is not a string: {other}"))),
        }
    }

    fn segment(&mut self, image: &EngineImage, pixel_box: &BoundingBox, label: Option<&str>) -> Result<BinaryMask> {
        let req = BackendRequest { bbox: Some(pixel_box.to_array()), label: label.map(str::to_string), ..Self::request("segment", image) };
        let rle: RleMask = serde_json::from_value(self.call(req)?)?;
        rle_decode(&rle)
    }

    fn part_vocab(&mut self, object_label: &str) -> Result<Vec<String>> {
        let req = BackendRequest { op: "part_vocab".into(), image: String::new(), bbox: None, label: Some(object_label.into()), caption: None };
        Ok(serde_json::from_value(self.call(req)?)?)
    }

    fn score(&mut self, image: &EngineImage, crop: &BoundingBox, caption: &str) -> Result<f64> {
        let req = BackendRequest { bbox: Some(crop.to_array()), caption: Some(caption.into()), ..Self::request("score", image) };
        self.call(req)?.as_f64().ok_or_else(|| Error::Backend("score payload is not a number".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, Mix};

    fn images(n: usize) -> Vec<EngineImage> {
        generate_dataset(7, n, Mix([1.0, 0.0, 0.0, 0.0]))
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, s)| EngineImage::from_scene(format!("img{i:03}"), s.scene.unwrap()))
            .collect()
    }

    struct Fixed {
        inner: MockClients,
        score: f64,
        fail_segment_on: Option<usize>,
        calls: usize,
    }

    impl BackendClients for Fixed {
        fn caption(&mut self, image: &EngineImage, b: &BoundingBox) -> Result<String> {
            self.inner.caption(image, b)
        }
        fn segment(&mut self, image: &EngineImage, b: &BoundingBox, l: Option<&str>) -> Result<BinaryMask> {
            self.calls += 1;
            if Some(self.calls) == self.fail_segment_on {
                return Err(Error::Backend("segmenter down".into()));
            }
            self.inner.segment(image, b, l)
        }
        fn part_vocab(&mut self, l: &str) -> Result<Vec<String>> {
            self.inner.part_vocab(l)
        }
        fn score(&mut self, _: &EngineImage, _: &BoundingBox, _: &str) -> Result<f64> {
            Ok(self.score)
        }
    }

    #[test]
    fn full_image_box_normalizes_to_corners() {
        let im = &images(1)[0];
        let mut c = MockClients::new(0);
        let (pairs, fails) = generate_object_pairs(im, &[(None, im.full_box())], &mut c).unwrap();
        assert!(fails.is_empty());
        assert_eq!(pairs[0].norm_box, [0.0, 0.0, 999.0, 999.0]);
        let plain = EngineImage { scene: None, objects: vec![], ..im.clone() };
        let b = BoundingBox::pixel(0.0, 0.0, 32.0, 32.0).unwrap();
        let (p, _) = generate_object_pairs(&plain, &[(None, b)], &mut c).unwrap();
        assert_eq!(p[0].caption, format!("object at {}", fmt_box(&normalize_box(&b, 64, 64).unwrap())));
        let (q, _) = generate_object_pairs(&plain, &[(None, b)], &mut c).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn failing_segmenter_skips_one_pair() {
        let im = &images(1)[0];
        let b = |x: f64| (None, BoundingBox::pixel(x, 0.0, x + 10.0, 10.0).unwrap());
        let mut c = Fixed { inner: MockClients::new(0), score: 1.0, fail_segment_on: Some(2), calls: 0 };
        let (pairs, fails) = generate_object_pairs(im, &[b(0.0), b(10.0), b(20.0)], &mut c).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(fails.len(), 1);
        assert_eq!(fails[0].index, 1);
    }

    #[test]
    fn part_pairs_use_template_and_flag_containment() {
        let im = images(40).into_iter().find(|im| im.objects.iter().any(|(l, _)| l.ends_with("house"))).unwrap();
        let (label, b) = im.objects.iter().find(|(l, _)| l.ends_with("house")).unwrap().clone();
        let mut c = MockClients::new(1);
        let (objs, _) = generate_object_pairs(&im, &[(Some(label.clone()), b)], &mut c).unwrap();
        let (parts, fails) = generate_part_pairs(&im, &objs[0], 1, &mut c).unwrap();
        assert!(fails.is_empty());
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[0].caption, format!("roof of {label}"));
        assert_eq!(part_caption("roof", "house"), "roof of house");
        assert!(parts.iter().all(|p| !p.inconsistent && p.parent == Some(0) && p.score_crop == "part"));

        // A shrunken object box no longer contains its parts.
        let mut shrunk = objs[0].clone();
        let a = shrunk.pixel_box;
        shrunk.pixel_box = [a[0], a[1] + 8.0, a[2], a[3]];
        let (parts, _) = generate_part_pairs(&im, &shrunk, 1, &mut c).unwrap();
        assert!(parts.iter().any(|p| p.inconsistent));

        assert!(c.part_vocab("blue spaceship").unwrap().is_empty());
    }

    #[test]
    fn strict_threshold() {
        let mk = |s: f64| GeneratedPair {
            image_id: "a".into(),
            index: 0,
            level: Granularity::Object,
            pixel_box: [0.0, 0.0, 1.0, 1.0],
            norm_box: [0.0; 4],
            mask: rle_encode(&BinaryMask::empty(1, 1)),
            caption: String::new(),
            label: None,
            parent: None,
            score: s,
            score_crop: "object".into(),
            kept: false,
            inconsistent: false,
        };
        let mut v: Vec<_> = [0.51, 0.5, 0.49, f64::from_bits(0.5f64.to_bits() + 1)].map(mk).to_vec();
        let kept = filter_pairs(&mut v);
        assert_eq!(kept.len(), 2);
        assert_eq!(v.iter().map(|p| p.kept).collect::<Vec<_>>(), [true, false, false, true]);
    }

    #[test]
    fn pipeline_resume_is_byte_identical() {
        let ims = images(10);
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("full.jsonl");
        let mk = || -> Result<Box<dyn BackendClients>> { Ok(Box::new(MockClients::new(5))) };
        let s_full = run_pipeline(&ims, mk, &full, &PipelineOptions::default()).unwrap();
        assert_eq!(s_full.processed, 10);

        let part = dir.path().join("part.jsonl");
        let s1 = run_pipeline(&ims, mk, &part, &PipelineOptions { stop_after: Some(5), ..Default::default() }).unwrap();
        assert_eq!(s1.processed, 5);
        // Garbage after the last commit is discarded on resume.
        OpenOptions::new().append(true).open(&part).unwrap().write_all(b"{\"partial").unwrap();
        let tok = read_resume_token(&part).unwrap().unwrap();
        assert_eq!(tok.last_image_id, "img004");
        let opts = PipelineOptions { resume_after: Some(tok.last_image_id), workers: 3, ..Default::default() };
        let s2 = run_pipeline(&ims, mk, &part, &opts).unwrap();
        assert_eq!(s2.processed, 5);
        assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&part).unwrap());
        assert_eq!(s1.kept + s2.kept, s_full.kept);

        let pairs = read_pairs(&full).unwrap();
        assert_eq!(pairs.len(), s_full.kept + s_full.dropped);
        for p in &pairs {
            assert_eq!(p.kept, p.score > 0.5);
            if p.level == Granularity::Part {
                let parent = pairs.iter().find(|o| o.image_id == p.image_id && Some(o.index) == p.parent).unwrap();
                assert!(parent.kept);
            }
        }
        let ids: Vec<(&str, usize)> = pairs.iter().map(|p| (p.image_id.as_str(), p.index)).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn all_scores_one_keeps_everything() {
        let ims = images(10);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o.jsonl");
        let mk = || -> Result<Box<dyn BackendClients>> {
            Ok(Box::new(Fixed { inner: MockClients::new(0), score: 1.0, fail_segment_on: None, calls: 0 }))
        };
        let s = run_pipeline(&ims, mk, &out, &PipelineOptions::default()).unwrap();
        assert_eq!(s.dropped, 0);
        assert_eq!(s.failed, 0);
        assert_eq!(s.kept, read_pairs(&out).unwrap().len());
    }

    #[test]
    fn wire_round_trip_through_serve_request() {
        let ims = images(2);
        let map: BTreeMap<String, EngineImage> = ims.iter().map(|i| (i.id.clone(), i.clone())).collect();
        let mut c = MockClients::new(0);
        let req = BackendRequest { op: "part_vocab".into(), image: String::new(), bbox: None, label: Some("red tree".into()), caption: None };
        let resp = serve_request(&mut c, &map, &req);
        assert!(resp.ok);
        assert_eq!(resp.payload.unwrap(), serde_json::json!(["crown", "trunk"]));
        let bad = BackendRequest { op: "dance".into(), ..req };
        let resp = serve_request(&mut c, &map, &bad);
        assert!(!resp.ok && resp.error.unwrap().contains("unknown op"));
        let line = serde_json::to_string(&BackendRequest {
            op: "score".into(),
            image: "img000".into(),
            bbox: Some([0.0, 0.0, 8.0, 8.0]),
            label: None,
            caption: Some("x".into()),
        })
        .unwrap();
        assert!(line.contains("\"box\":[0.0,0.0,8.0,8.0]"));
    }
}
