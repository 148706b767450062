//! End-to-end model: encoders → vision flow → sequence model → route → re-weight → decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoders::{encode_var, EncoderConfig};
use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, BoundingBox, FeatureLevel, FeatureMap, GridGeometry};
use crate::losses::{bce_var, combine_var, dice_var, text_ce_var, LossWeights, DICE_SMOOTH};
use crate::metrics::no_target_decision;
use crate::mgfe::{self, Generation, SeqConfig, Vocabulary, REWEIGHT_ATTN};
use crate::mgvf::{self, region_pooling_matrix, AttentionVars, FlowConfig, FlowInputs, ProposalSet, ProposalSource};
use crate::params::Params;
use crate::pixel_decoder::{binarize, decode_var, DecoderConfig, MaskLogits};
use crate::synth::GroundingSample;
use crate::tensor::Matrix;
use crate::types::{Granularity, ImageTensor};

pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub canvas: usize,
    pub low: EncoderConfig,
    pub high: EncoderConfig,
    pub grounding: EncoderConfig,
    pub flow: FlowConfig,
    pub seq: SeqConfig,
    pub decouple_seg: bool,
    pub decoder_reweight: bool,
    pub freeze_encoders: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            canvas: 64,
            low: EncoderConfig::low(),
            high: EncoderConfig::high(),
            grounding: EncoderConfig::grounding(),
            flow: FlowConfig::default(),
            seq: SeqConfig::default(),
            decouple_seg: true,
            decoder_reweight: true,
            freeze_encoders: false,
        }
    }
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        self.low.channels
    }

    pub fn grounding_grid(&self) -> usize {
        self.grounding.input_res / self.grounding.patch_stride
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            upsample_factor: self.canvas / self.grounding_grid(),
            channels: self.channels(),
            seg_dim: self.seq.d_model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for e in [&self.low, &self.high, &self.grounding] {
            e.validate().map_err(|err| Error::Config(err.to_string()))?;
        }
        let c = self.channels();
        if self.high.channels != c || self.grounding.channels != c {
            return Err(Error::Config("all encoders must share one channel width".into()));
        }
        if self.canvas % self.grounding_grid() != 0 {
            return Err(Error::Config(format!(
                "canvas {} is not a multiple of the grounding grid {}",
                self.canvas,
                self.grounding_grid()
            )));
        }
        if self.seq.heads == 0 || self.seq.d_model % self.seq.heads != 0 {
            return Err(Error::Config("d_model must be divisible by the head count".into()));
        }
        if self.flow.heads == 0 || c % self.flow.heads != 0 {
            return Err(Error::Config("channels must be divisible by the flow head count".into()));
        }
        Ok(())
    }

    /// Granularity index used for routing once the SEG token is known.
    pub fn routed(&self, g: Granularity) -> u8 {
        if self.decouple_seg {
            g.index()
        } else {
            0
        }
    }
}

/// Encoder outputs for one image. Cached when the encoders are frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage {
    pub f_l: Matrix,
    pub f_h: Matrix,
    pub high_grid: GridGeometry,
    pub f_g: Matrix,
}

#[derive(Debug, Clone, Copy)]
struct EncodedVars {
    f_l: Var,
    f_h: Var,
    high_grid: GridGeometry,
    f_g: Var,
}

/// Loss terms of one sample, all `1 × 1` tape variables.
#[derive(Debug, Clone, Copy)]
pub struct SampleLoss {
    pub total: Var,
    pub l_lm: Var,
    pub l_bce: Var,
    pub l_dice: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `None` when no SEG token was emitted within the length budget.
    pub generation: Option<Generation>,
    pub granularity: Option<Granularity>,
    pub logits: Option<MaskLogits>,
    pub mask: BinaryMask,
    pub no_target: bool,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Params,
    pub vocab: Vocabulary,
}

impl Model {
    pub fn new(cfg: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        for e in [&cfg.low, &cfg.high, &cfg.grounding] {
            e.init_params(&mut params, &mut rng);
        }
        let c = cfg.channels();
        mgvf::init_flow_params(&mut params, c, &mut rng);
        mgfe::init_params(&mut params, &cfg.seq, vocab.len(), c, &mut rng);
        cfg.decoder().init_params(&mut params, &mut rng);
        if cfg.freeze_encoders {
            for e in [&cfg.low, &cfg.high, &cfg.grounding] {
                params.freeze_prefix(&format!("{}.", e.kind.prefix()));
            }
        }
        Ok(Self { cfg, params, vocab })
    }

    fn inputs(&self, img: &ImageTensor) -> (ImageTensor, ImageTensor, ImageTensor) {
        let fit = |res: usize| if img.height() == res && img.width() == res { img.clone() } else { img.resize_nearest(res, res) };
        let high = self.cfg.high.input_res;
        (fit(self.cfg.low.input_res), img.resize_nearest(high, high), fit(self.cfg.grounding.input_res))
    }

    fn encode_vars(&self, tape: &mut Tape, img: &ImageTensor, cache: Option<&EncodedImage>) -> Result<EncodedVars> {
        if let Some(e) = cache {
            return Ok(EncodedVars {
                f_l: tape.constant(e.f_l.clone()),
                f_h: tape.constant(e.f_h.clone()),
                high_grid: e.high_grid,
                f_g: tape.constant(e.f_g.clone()),
            });
        }
        let (lo, hi, gr) = self.inputs(img);
        let (f_l, _, _) = encode_var(tape, &self.params, &self.cfg.low, &lo)?;
        let (f_h, gh, gw) = encode_var(tape, &self.params, &self.cfg.high, &hi)?;
        let (f_g, _, _) = encode_var(tape, &self.params, &self.cfg.grounding, &gr)?;
        // Boxes live in the caller's pixel frame, so the high-res grid spans the original image.
        let high_grid = GridGeometry { grid_h: gh, grid_w: gw, extent_h: img.height() as f64, extent_w: img.width() as f64 };
        Ok(EncodedVars { f_l, f_h, high_grid, f_g })
    }

    pub fn encode_image(&self, img: &ImageTensor) -> Result<EncodedImage> {
        let mut tape = Tape::new();
        let v = self.encode_vars(&mut tape, img, None)?;
        Ok(EncodedImage {
            f_l: tape.value(v.f_l).clone(),
            f_h: tape.value(v.f_h).clone(),
            high_grid: v.high_grid,
            f_g: tape.value(v.f_g).clone(),
        })
    }

    fn flow_vars(&self, tape: &mut Tape, enc: &EncodedVars, objects: &ProposalSet, parts: &ProposalSet) -> Result<mgvf::FlowVars> {
        let heads = self.cfg.flow.heads;
        let oa = AttentionVars::bind(tape, &self.params, mgvf::OBJECT_ATTN, heads);
        let pa = AttentionVars::bind(tape, &self.params, mgvf::PART_ATTN, heads);
        let inputs = FlowInputs { f_l: enc.f_l, f_h: enc.f_h, high_grid: enc.high_grid, objects, parts };
        mgvf::run_vision_flow_var(tape, &inputs, &oa, &pa, &self.cfg.flow)
    }

    pub fn proposals(sample: &GroundingSample) -> Result<(ProposalSet, ProposalSet)> {
        Ok((
            ProposalSet::new(sample.object_boxes.clone(), Granularity::Object, ProposalSource::GroundTruth)?,
            ProposalSet::new(sample.part_boxes.clone(), Granularity::Part, ProposalSource::GroundTruth)?,
        ))
    }

    /// SEG token the sample is supervised to emit.
    pub fn target_seg(&self, g: Granularity) -> usize {
        self.vocab.seg_token(if self.cfg.decouple_seg { g } else { Granularity::Object })
    }

    /// Grounding loss of one sample with teacher-forced SEG token and ground-truth routing.
    pub fn sample_loss(
        &self,
        tape: &mut Tape,
        sample: &GroundingSample,
        cache: Option<&EncodedImage>,
        weights: &LossWeights,
    ) -> Result<SampleLoss> {
        let (objects, parts) = Self::proposals(sample)?;
        let enc = self.encode_vars(tape, &sample.image, cache)?;
        let flow = self.flow_vars(tape, &enc, &objects, &parts)?;
        let visual = mgfe::project_tokens_var(tape, &self.params, &flow);

        let seg_tok = self.target_seg(sample.granularity);
        let mut ids = mgfe::prompt_ids(&self.vocab, &sample.tokens);
        let seg_pos = ids.len();
        ids.push(seg_tok);
        let lm = mgfe::lm_forward(tape, &self.params, &self.cfg.seq, visual, &ids)?;
        let mut targets: Vec<usize> = ids[1..].to_vec();
        targets.push(self.vocab.eos());
        let supervised: Vec<bool> = (0..ids.len()).map(|i| i + 1 >= seg_pos).collect();
        let l_lm = text_ce_var(tape, lm.logits, &targets, &supervised)?;

        let seg = tape.slice_rows(lm.hidden, seg_pos, 1);
        let selected = mgfe::route_var(tape, self.cfg.routed(sample.granularity), &flow)?;
        let rew = AttentionVars::bind(tape, &self.params, REWEIGHT_ATTN, self.cfg.flow.heads);
        let f_r = mgfe::reweight_var(tape, enc.f_g, selected, &rew, self.cfg.decoder_reweight)?;
        let g = self.cfg.grounding_grid();
        let logits = decode_var(tape, &self.params, &self.cfg.decoder(), f_r, g, g, seg)?;
        let probs = tape.sigmoid(logits);
        let gt = fit_mask(&sample.target_mask(), self.cfg.canvas);
        let l_bce = bce_var(tape, probs, &gt)?;
        let l_dice = dice_var(tape, probs, &gt, DICE_SMOOTH)?;
        let total = combine_var(tape, l_lm, l_bce, l_dice, weights);
        Ok(SampleLoss { total, l_lm, l_bce, l_dice })
    }

    /// Region-caption loss: the pooled region is appended to the visual prefix and the
    /// model emits the referring expression. Text loss only.
    pub fn caption_loss(&self, tape: &mut Tape, sample: &GroundingSample, region: &BoundingBox, cache: Option<&EncodedImage>) -> Result<Var> {
        let (objects, parts) = Self::proposals(sample)?;
        let enc = self.encode_vars(tape, &sample.image, cache)?;
        let flow = self.flow_vars(tape, &enc, &objects, &parts)?;
        let visual = mgfe::project_tokens_var(tape, &self.params, &flow);
        let one = ProposalSet::new(vec![*region], Granularity::Object, ProposalSource::GroundTruth)?;
        let pool = region_pooling_matrix(enc.high_grid, &one, self.cfg.flow.bins, self.cfg.flow.samples_per_bin)?;
        let pool = tape.constant(pool);
        let region_feat = tape.matmul(pool, enc.f_h);
        let w = tape.param(&self.params, &format!("{}.w", mgfe::PROJ));
        let b = tape.param(&self.params, &format!("{}.b", mgfe::PROJ));
        let region_tok = tape.linear(region_feat, w, b);
        let prefix = tape.concat_rows(&[visual, region_tok]);
        let mut ids = vec![self.vocab.bos()];
        ids.extend_from_slice(&sample.tokens);
        let mut targets = sample.tokens.clone();
        targets.push(self.vocab.eos());
        let supervised = vec![true; ids.len()];
        let lm = mgfe::lm_forward(tape, &self.params, &self.cfg.seq, prefix, &ids)?;
        text_ce_var(tape, lm.logits, &targets, &supervised)
    }

    /// Full inference: generate → route → re-weight → decode → binarize → no-target rule.
    pub fn predict(&self, image: &ImageTensor, objects: &ProposalSet, parts: &ProposalSet, tokens: &[usize], cache: Option<&EncodedImage>) -> Result<Prediction> {
        let mut tape = Tape::new();
        let enc = self.encode_vars(&mut tape, image, cache)?;
        let flow = self.flow_vars(&mut tape, &enc, objects, parts)?;
        let visual = mgfe::project_tokens_var(&mut tape, &self.params, &flow);
        let visual = tape.value(visual).clone();
        let canvas = self.cfg.canvas;
        let generation = match mgfe::generate(&self.params, &self.cfg.seq, &self.vocab, &visual, tokens) {
            Ok(g) => g,
            Err(Error::NoSeg { .. }) => {
                return Ok(Prediction {
                    generation: None,
                    granularity: None,
                    logits: None,
                    mask: BinaryMask::empty(canvas, canvas),
                    no_target: true,
                })
            }
            Err(e) => return Err(e),
        };
        let g = generation.decision.granularity();
        let selected = mgfe::route_var(&mut tape, self.cfg.routed(g), &flow)?;
        let rew = AttentionVars::bind(&mut tape, &self.params, REWEIGHT_ATTN, self.cfg.flow.heads);
        let f_r = mgfe::reweight_var(&mut tape, enc.f_g, selected, &rew, self.cfg.decoder_reweight)?;
        let seg = tape.constant(generation.decision.seg_embedding.clone());
        let grid = self.cfg.grounding_grid();
        let out = decode_var(&mut tape, &self.params, &self.cfg.decoder(), f_r, grid, grid, seg)?;
        let values = tape.value(out).clone();
        let logits = MaskLogits { height: values.rows(), width: values.cols(), values };
        let mask = binarize(&logits, MASK_THRESHOLD);
        let no_target = no_target_decision(&mask);
        Ok(Prediction { generation: Some(generation), granularity: Some(g), logits: Some(logits), mask, no_target })
    }

    pub fn predict_sample(&self, sample: &GroundingSample, cache: Option<&EncodedImage>) -> Result<Prediction> {
        let (objects, parts) = Self::proposals(sample)?;
        self.predict(&sample.image, &objects, &parts, &sample.tokens, cache)
    }

    /// Re-weighted grounding features for a fixed routing decision.
    pub fn reweighted_features(&self, enc: &EncodedImage, f_o_enh: &Matrix, f_p_enh: &Matrix, g_hat: u8) -> Result<FeatureMap> {
        let selected = mgfe::route(g_hat, f_o_enh, f_p_enh, &enc.f_l)?;
        let w = mgvf::AttentionWeights::from_params(&self.params, REWEIGHT_ATTN, self.cfg.flow.heads)?;
        let g = self.cfg.grounding_grid();
        let c = self.cfg.canvas as f64;
        let f_g = FeatureMap::new(g, g, c, c, enc.f_g.clone(), FeatureLevel::Grounding)?;
        mgfe::reweight(&f_g, &selected, &w, self.cfg.decoder_reweight)
    }
}

/// Nearest-neighbour resize of a mask to `size × size`; identity when already that size.
pub fn fit_mask(m: &BinaryMask, size: usize) -> BinaryMask {
    if m.shape() == (size, size) {
        return m.clone();
    }
    let (h, w) = m.shape();
    BinaryMask::from_fn(size, size, |r, c| m.get(r * h / size, c * w / size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, synth_vocabulary, Mix};

    fn small_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.seq = SeqConfig { d_model: 32, heads: 2, layers: 1, ..SeqConfig::default() };
        for e in [&mut cfg.low, &mut cfg.high, &mut cfg.grounding] {
            e.channels = 16;
        }
        cfg
    }

    #[test]
    fn every_trainable_parameter_receives_gradient() {
        let model = Model::new(small_cfg(), synth_vocabulary(), 1).unwrap();
        let data = generate_dataset(2, 8, Mix::default()).unwrap();
        let w = LossWeights::default();
        let mut seen: std::collections::BTreeSet<String> = Default::default();
        for s in &data {
            let mut tape = Tape::new();
            let loss = model.sample_loss(&mut tape, s, None, &w).unwrap();
            tape.backward(loss.total);
            for (name, g) in tape.param_grads() {
                if g.is_some_and(|g| g.data().iter().any(|&v| v != 0.0)) {
                    seen.insert(name.to_string());
                }
            }
            let region = s.object_boxes[0];
            let mut tape = Tape::new();
            let l = model.caption_loss(&mut tape, s, &region, None).unwrap();
            assert!(tape.value(l).item().is_finite());
        }
        let dead: Vec<&str> = model.params.names().filter(|n| !model.params.is_frozen(n) && !seen.contains(*n)).collect();
        assert!(dead.is_empty(), "dead parameters: {dead:?}");
    }

    #[test]
    fn frozen_encoders_get_no_leaves_and_cache_matches() {
        let cfg = ModelConfig { freeze_encoders: true, ..small_cfg() };
        let model = Model::new(cfg, synth_vocabulary(), 3).unwrap();
        let s = &generate_dataset(4, 1, Mix([0.0, 0.0, 1.0, 0.0])).unwrap()[0];
        let w = LossWeights::default();
        let enc = model.encode_image(&s.image).unwrap();
        let mut t1 = Tape::new();
        let a = model.sample_loss(&mut t1, s, None, &w).unwrap();
        let mut t2 = Tape::new();
        let b = model.sample_loss(&mut t2, s, Some(&enc), &w).unwrap();
        assert_eq!(t1.value(a.total).item(), t2.value(b.total).item());
        t1.backward(a.total);
        assert!(t1.param_grads().all(|(n, _)| !n.starts_with("ground.") && !n.starts_with("low.") && !n.starts_with("high.")));
        let p = model.predict_sample(s, Some(&enc)).unwrap();
        assert_eq!(p, model.predict_sample(s, None).unwrap());
        assert_eq!(p.mask.shape(), (64, 64));
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg();
        cfg.high.channels = 8;
        assert!(matches!(Model::new(cfg, synth_vocabulary(), 0), Err(Error::Config(_))));
        let mut cfg = small_cfg();
        cfg.canvas = 60;
        assert!(Model::new(cfg, synth_vocabulary(), 0).is_err());
        let stride8 = ModelConfig { grounding: EncoderConfig { patch_stride: 8, ..small_cfg().grounding }, ..small_cfg() };
        assert_eq!(stride8.decoder().upsample_factor, 8);
        assert!(Model::new(stride8, synth_vocabulary(), 0).is_ok());
    }
}
