//! Training loop, schedule, optimizer, checkpoints, and evaluation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::geometry::BinaryMask;
use crate::losses::{LossBundle, LossWeights};
use crate::metrics::{EvalRecord, MetricReport};
use crate::mgfe::{SeqConfig, Vocabulary};
use crate::mgvf::FlowConfig;
use crate::model::{fit_mask, EncodedImage, Model, ModelConfig};
use crate::params::{read_archive, write_archive, Params};
use crate::synth::{generate_dataset, load_refcoco_style, synth_vocabulary, GroundingSample, Mix};
use crate::tensor::Matrix;
use crate::types::{Granularity, ImageTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub data_seed: u64,
    pub n_samples: usize,
    pub mix: Mix,
    /// Annotation file; synthetic data when empty.
    pub data: String,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub lambda_lm: f64,
    pub lambda_mask: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub decouple_seg: bool,
    pub adjacent_interaction: bool,
    pub decoder_reweight: bool,
    pub use_object_feats: bool,
    pub use_part_feats: bool,
    pub high_res: usize,
    pub grounding_stride: usize,
    pub channels: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub freeze_encoders: bool,
    pub pretrain: bool,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_seed: 0,
            n_samples: 64,
            mix: Mix::default(),
            data: String::new(),
            batch_size: 16,
            steps_per_epoch: 2000,
            epochs: 1,
            base_lr: 5e-4,
            warmup_steps: 100,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            lambda_lm: 1.0,
            lambda_mask: 1.0,
            lambda_bce: 2.0,
            lambda_dice: 0.5,
            decouple_seg: true,
            adjacent_interaction: true,
            decoder_reweight: true,
            use_object_feats: true,
            use_part_feats: true,
            high_res: 128,
            grounding_stride: 4,
            channels: 64,
            d_model: 128,
            layers: 2,
            heads: 4,
            freeze_encoders: false,
            pretrain: false,
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

trait KvValue: Sized {
    fn parse_kv(s: &str) -> std::result::Result<Self, String>;
    fn to_kv(&self) -> String;
}

macro_rules! kv_from_str {
    ($($t:ty),*) => {$(
        impl KvValue for $t {
            fn parse_kv(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn to_kv(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
kv_from_str!(u64, usize, f64, bool, String);

impl KvValue for Mix {
    fn parse_kv(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: Error| e.to_string())
    }
    fn to_kv(&self) -> String {
        self.0.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
    }
}

macro_rules! kv_fields {
    ($($name:ident),* $(,)?) => {
        impl TrainConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => {
                        self.$name = KvValue::parse_kv(value)
                            .map_err(|e| Error::Config(format!("`{key}` = `{value}`: {e}")))?;
                    })*
                    _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($name), self.$name.to_kv())),*]
            }
        }
    };
}

kv_fields!(
    seed, data_seed, n_samples, mix, data, batch_size, steps_per_epoch, epochs, base_lr, warmup_steps,
    weight_decay, beta1, beta2, adam_eps, grad_clip, lambda_lm, lambda_mask, lambda_bce, lambda_dice,
    decouple_seg, adjacent_interaction, decoder_reweight, use_object_feats, use_part_feats, high_res,
    grounding_stride, channels, d_model, layers, heads, freeze_encoders, pretrain, log_every, checkpoint_every,
);

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected key = value, got `{line}`") })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.epochs
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_lm: self.lambda_lm,
            lambda_mask: self.lambda_mask,
            lambda_bce: self.lambda_bce,
            lambda_dice: self.lambda_dice,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_steps() == 0 {
            return Err(Error::Config("batch_size and total steps must be positive".into()));
        }
        if self.warmup_steps > self.total_steps() {
            return Err(Error::Config(format!("warmup {} exceeds total steps {}", self.warmup_steps, self.total_steps())));
        }
        if !(self.base_lr >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("base_lr must be non-negative and grad_clip positive".into()));
        }
        self.loss_weights().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.mix.validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        let c = self.channels;
        let mut cfg = ModelConfig {
            low: EncoderConfig { channels: c, ..EncoderConfig::low() },
            high: EncoderConfig { channels: c, input_res: self.high_res, ..EncoderConfig::high() },
            grounding: EncoderConfig { channels: c, patch_stride: self.grounding_stride, ..EncoderConfig::grounding() },
            flow: FlowConfig {
                adjacent_interaction: self.adjacent_interaction,
                use_object_feats: self.use_object_feats,
                use_part_feats: self.use_part_feats,
                ..FlowConfig::default()
            },
            seq: SeqConfig { d_model: self.d_model, layers: self.layers, heads: self.heads, ..SeqConfig::default() },
            decouple_seg: self.decouple_seg,
            decoder_reweight: self.decoder_reweight,
            freeze_encoders: self.freeze_encoders,
            ..ModelConfig::default()
        };
        cfg.canvas = crate::synth::DEFAULT_CANVAS;
        cfg
    }

    pub fn dataset(&self) -> Result<Vec<GroundingSample>> {
        if self.data.is_empty() {
            generate_dataset(self.data_seed, self.n_samples, self.mix)
        } else {
            load_refcoco_style(Path::new(&self.data), &synth_vocabulary())
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Linear warmup then cosine decay to zero at `total`.
pub fn lr_at(step: usize, base: f64, warmup: usize, total: usize) -> Result<f64> {
    if step > total || warmup > total {
        return Err(Error::InvalidInput(format!("step {step} outside schedule of {total} steps (warmup {warmup})")));
    }
    if warmup > 0 && step <= warmup {
        return Ok(base * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        lr_at(step, self.base_lr, self.warmup_steps, self.total_steps())
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Matrix>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.data().iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamW {
    pub t: u64,
    pub m: BTreeMap<String, Matrix>,
    pub v: BTreeMap<String, Matrix>,
}

impl AdamW {
    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Matrix>, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("gradient for a known parameter");
            let m = self.m.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let update = (*mv / c1) / ((*vv / c2).sqrt() + cfg.adam_eps);
                *pv -= lr * (update + cfg.weight_decay * *pv);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub l_lm: f64,
    pub l_bce: f64,
    pub l_dice: f64,
    pub l_mask: f64,
    pub total: f64,
}

/// Caption region for a sample: the bounding box of its target.
fn caption_region(s: &GroundingSample) -> Option<crate::geometry::BoundingBox> {
    s.target_mask().bounding_box()
}

/// One optimizer step on `batch`. Gradients are averaged over the batch.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[(&GroundingSample, Option<&EncodedImage>)],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<(LossBundle, f64)> {
    let weights = cfg.loss_weights();
    let scale = 1.0 / batch.len() as f64;
    let mut grads: BTreeMap<String, Matrix> = BTreeMap::new();
    let mut acc = [0.0; 3];
    for &(sample, cache) in batch {
        let mut tape = Tape::new();
        let (total, parts) = if cfg.pretrain {
            let region = caption_region(sample)
                .or_else(|| sample.object_boxes.first().copied())
                .ok_or_else(|| Error::InvalidInput(format!("sample `{}` has no region to caption", sample.id)))?;
            let l = model.caption_loss(&mut tape, sample, &region, cache)?;
            let lm = tape.value(l).item();
            (tape.scale(l, weights.lambda_lm), [lm, 0.0, 0.0])
        } else {
            let l = model.sample_loss(&mut tape, sample, cache, &weights)?;
            (l.total, [tape.value(l.l_lm).item(), tape.value(l.l_bce).item(), tape.value(l.l_dice).item()])
        };
        if !tape.value(total).item().is_finite() || parts.iter().any(|v| !v.is_finite()) {
            log::error!("non-finite loss on sample {}: lm={} bce={} dice={}", sample.id, parts[0], parts[1], parts[2]);
            return Err(Error::NonFinite { sample_id: sample.id.clone() });
        }
        for (a, p) in acc.iter_mut().zip(parts) {
            *a += p * scale;
        }
        let root = tape.scale(total, scale);
        tape.backward(root);
        for (name, g) in tape.param_grads() {
            if let Some(g) = g {
                match grads.get_mut(name) {
                    Some(sum) => sum.add_assign(g),
                    None => {
                        grads.insert(name.to_string(), g.clone());
                    }
                }
            }
        }
    }
    let norm = clip_grad_norm(&mut grads, cfg.grad_clip);
    if !norm.is_finite() {
        let id = batch.first().map(|b| b.0.id.clone()).unwrap_or_default();
        return Err(Error::NonFinite { sample_id: id });
    }
    opt.step(&mut model.params, &grads, lr, cfg);
    let bundle = if cfg.pretrain {
        LossBundle { l_lm: acc[0], l_bce: 0.0, l_dice: 0.0, l_mask: 0.0, total: weights.lambda_lm * acc[0] }
    } else {
        crate::losses::combine(acc[0], acc[1], acc[2], &weights)
    };
    Ok((bundle, norm))
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub opt: AdamW,
    pub step: usize,
    pub data: Vec<GroundingSample>,
    caches: Vec<Option<EncodedImage>>,
    epoch_order: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, mut data: Vec<GroundingSample>) -> Result<Self> {
        cfg.validate()?;
        if cfg.pretrain {
            data.retain(|s| !s.no_target);
        }
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let model = Model::new(cfg.model_config(), synth_vocabulary(), cfg.seed)?;
        Ok(Self::from_parts(cfg, model, AdamW::default(), 0, data))
    }

    pub fn from_parts(cfg: TrainConfig, model: Model, opt: AdamW, step: usize, data: Vec<GroundingSample>) -> Self {
        let caches = if model.cfg.freeze_encoders {
            data.iter().map(|s| model.encode_image(&s.image).ok()).collect()
        } else {
            vec![None; data.len()]
        };
        Self { cfg, model, opt, step, data, caches, epoch_order: None }
    }

    /// Sample indices of the batch at `step`: fixed per-epoch permutations derived from the seed.
    pub fn batch_indices(&mut self, step: usize) -> Vec<usize> {
        let n = self.data.len();
        let b = self.cfg.batch_size;
        (0..b)
            .map(|k| {
                let global = step * b + k;
                let epoch = global / n;
                if self.epoch_order.as_ref().map(|o| o.0) != Some(epoch) {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
                    rng.set_stream(epoch as u64 + 1);
                    let mut perm: Vec<usize> = (0..n).collect();
                    perm.shuffle(&mut rng);
                    self.epoch_order = Some((epoch, perm));
                }
                self.epoch_order.as_ref().expect("set above").1[global % n]
            })
            .collect()
    }

    pub fn step_once(&mut self) -> Result<StepLog> {
        let idx = self.batch_indices(self.step);
        let lr = self.cfg.lr_at(self.step + 1)?;
        let batch: Vec<(&GroundingSample, Option<&EncodedImage>)> =
            idx.iter().map(|&i| (&self.data[i], self.caches[i].as_ref())).collect();
        let (b, grad_norm) = train_step(&mut self.model, &mut self.opt, &batch, &self.cfg, lr)?;
        self.step += 1;
        Ok(StepLog { step: self.step, lr, grad_norm, l_lm: b.l_lm, l_bce: b.l_bce, l_dice: b.l_dice, l_mask: b.l_mask, total: b.total })
    }

    /// Runs until `until` (or the configured total), logging and checkpointing into `out`.
    pub fn run(&mut self, until: Option<usize>, out: Option<&Path>) -> Result<Vec<StepLog>> {
        let end = until.unwrap_or_else(|| self.cfg.total_steps()).min(self.cfg.total_steps());
        let mut log_file = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(BufWriter::new(std::fs::OpenOptions::new().create(true).append(true).open(dir.join("loss.jsonl"))?))
            }
            None => None,
        };
        let mut history = Vec::new();
        while self.step < end {
            let rec = match self.step_once() {
                Ok(r) => r,
                Err(e) => {
                    if let (Error::NonFinite { sample_id }, Some(dir)) = (&e, out) {
                        std::fs::write(dir.join("nonfinite_sample.txt"), format!("{sample_id}\n"))?;
                    }
                    return Err(e);
                }
            };
            if let Some(f) = log_file.as_mut() {
                serde_json::to_writer(&mut *f, &rec)?;
                f.write_all(b"\n")?;
            }
            if self.cfg.log_every > 0 && rec.step % self.cfg.log_every == 0 {
                log::info!(
                    "step {} lr {:.2e} total {:.4} lm {:.4} bce {:.4} dice {:.4}",
                    rec.step,
                    rec.lr,
                    rec.total,
                    rec.l_lm,
                    rec.l_bce,
                    rec.l_dice
                );
            }
            if let (Some(dir), true) = (out, self.cfg.checkpoint_every > 0 && rec.step % self.cfg.checkpoint_every == 0) {
                self.save(&dir.join(format!("step{:06}.ckpt", rec.step)))?;
            }
            history.push(rec);
        }
        if let Some(f) = log_file.as_mut() {
            f.flush()?;
        }
        if let Some(dir) = out {
            self.save(&dir.join("final.ckpt"))?;
        }
        Ok(history)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.cfg, &self.model, &self.opt, self.step)
    }
}

const CKPT_MAGIC: &[u8; 4] = b"MGCK";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub step: usize,
    pub config_hash: String,
    pub tokenizer_checksum: String,
    pub config: String,
    pub vocab: String,
    pub adam_t: u64,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub cfg: TrainConfig,
    pub model: Model,
    pub opt: AdamW,
}

pub fn save_checkpoint(path: &Path, cfg: &TrainConfig, model: &Model, opt: &AdamW, step: usize) -> Result<()> {
    let header = CheckpointHeader {
        step,
        config_hash: cfg.hash(),
        tokenizer_checksum: model.vocab.checksum(),
        config: cfg.to_text(),
        vocab: model.vocab.to_file_string(),
        adam_t: opt.t,
    };
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_u32::<LittleEndian>(CKPT_VERSION)?;
        let h = serde_json::to_vec(&header)?;
        w.write_u64::<LittleEndian>(h.len() as u64)?;
        w.write_all(&h)?;
        model.params.write_archive(&mut w)?;
        write_archive(&mut w, opt.m.iter().map(|(k, v)| (k.as_str(), v)), opt.m.len())?;
        write_archive(&mut w, opt.v.iter().map(|(k, v)| (k.as_str(), v)), opt.v.len())?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = std::io::BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::InvalidInput(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CKPT_VERSION {
        return Err(Error::InvalidInput(format!("unsupported checkpoint version {version}")));
    }
    let len = r.read_u64::<LittleEndian>()? as usize;
    let mut h = vec![0u8; len];
    r.read_exact(&mut h)?;
    let header: CheckpointHeader = serde_json::from_slice(&h)?;
    let cfg = TrainConfig::parse(&header.config)?;
    if cfg.hash() != header.config_hash {
        return Err(Error::InvalidState("checkpoint config hash mismatch".into()));
    }
    let vocab = Vocabulary::from_file_string(&header.vocab)?;
    if vocab.checksum() != header.tokenizer_checksum {
        return Err(Error::InvalidState("checkpoint tokenizer checksum mismatch".into()));
    }
    let mut model = Model::new(cfg.model_config(), vocab, cfg.seed)?;
    let stored = Params::read_archive(&mut r)?;
    if stored.len() != model.params.len() || stored.names().any(|n| !model.params.contains(n)) {
        return Err(Error::InvalidState("checkpoint parameters do not match the configured model".into()));
    }
    for (name, value) in stored.iter() {
        let slot = model.params.get_mut(name).expect("checked above");
        if slot.shape() != value.shape() {
            return Err(Error::InvalidState(format!("shape mismatch for `{name}`")));
        }
        *slot = value.clone();
    }
    let m = read_archive(&mut r)?;
    let v = read_archive(&mut r)?;
    let opt = AdamW { t: header.adam_t, m, v };
    Ok(Checkpoint { header, cfg, model, opt })
}

/// Predicted mask and SEG granularity for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePrediction {
    pub mask: BinaryMask,
    pub granularity: Option<Granularity>,
}

pub trait Predictor {
    fn predict(&self, sample: &GroundingSample) -> Result<SamplePrediction>;

    fn proposal_source(&self) -> &str {
        "ground_truth"
    }
}

impl Predictor for Model {
    fn predict(&self, sample: &GroundingSample) -> Result<SamplePrediction> {
        let p = self.predict_sample(sample, None)?;
        Ok(SamplePrediction { mask: p.mask, granularity: p.granularity })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub report: MetricReport,
    pub granularity_accuracy: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordLine {
    #[serde(flatten)]
    pub record: EvalRecord,
    #[serde(default)]
    pub pred_granularity: Option<Granularity>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOutputs {
    pub report: Option<PathBuf>,
    pub records: Option<PathBuf>,
    pub overlay_dir: Option<PathBuf>,
}

pub fn evaluate<P: Predictor + ?Sized>(predictor: &P, data: &[GroundingSample], out: &EvalOutputs) -> Result<(EvalSummary, Vec<RecordLine>)> {
    let mut lines = Vec::with_capacity(data.len());
    let mut correct = 0usize;
    for s in data {
        let pred = predictor.predict(s)?;
        let gt = s.target_mask();
        let mask = fit_mask(&pred.mask, gt.height());
        if pred.granularity == Some(s.granularity) {
            correct += 1;
        }
        if let Some(dir) = &out.overlay_dir {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(format!("{}.png", s.id)), overlay(&s.image, &gt, &mask).to_png_bytes()?)?;
        }
        lines.push(RecordLine {
            record: EvalRecord::from_masks(s.id.clone(), &mask, &gt, s.no_target, s.granularity),
            pred_granularity: pred.granularity,
        });
    }
    let records: Vec<EvalRecord> = lines.iter().map(|l| l.record.clone()).collect();
    let mut report = MetricReport::from_records(&records)?;
    report.proposals = Some(predictor.proposal_source().to_string());
    let summary = EvalSummary {
        report,
        granularity_accuracy: if data.is_empty() { 0.0 } else { correct as f64 / data.len() as f64 },
        samples: data.len(),
    };
    if let Some(p) = &out.report {
        std::fs::write(p, serde_json::to_string_pretty(&summary)?)?;
    }
    if let Some(p) = &out.records {
        write_records(p, &lines)?;
    }
    Ok((summary, lines))
}

pub fn write_records(path: &Path, lines: &[RecordLine]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for l in lines {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RecordLine>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?);
    }
    Ok(out)
}

/// Predicted mask as a red tint, ground-truth boundary in green.
pub fn overlay(img: &ImageTensor, gt: &BinaryMask, pred: &BinaryMask) -> ImageTensor {
    let mut out = img.clone();
    let (h, w) = (img.height().min(gt.height()), img.width().min(gt.width()));
    for r in 0..h {
        for c in 0..w {
            let mut px = out.pixel(r, c);
            if pred.height() > r && pred.width() > c && pred.get(r, c) {
                px = [0.5 * px[0] + 0.5, 0.5 * px[1], 0.5 * px[2]];
            }
            if gt.get(r, c) {
                let edge = r == 0 || c == 0 || r + 1 == h || c + 1 == w
                    || !gt.get(r - 1, c) || !gt.get(r + 1, c) || !gt.get(r, c - 1) || !gt.get(r, c + 1);
                if edge {
                    px = [0.0, 1.0, 0.0];
                }
            }
            out.set_pixel(r, c, px);
        }
    }
    out
}
