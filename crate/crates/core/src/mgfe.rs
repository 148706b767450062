//! Multi-granularity feature exploitation: visual-token projection, the toy decoder-only
//! sequence model with decoupled `[SEG_OBJECT]` / `[SEG_PART]` tokens, routing between
//! the enhanced object and part features, and re-weighting of the grounding features.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::geometry::FeatureMap;
use crate::mgvf::{attend, AttentionVars, AttentionWeights, FlowVars, VisionFlowOutput};
use crate::params::Params;
use crate::tensor::Matrix;
use crate::types::Granularity;

pub const BOS: &str = "<bos>";
pub const SEP: &str = "<sep>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const SEG_OBJECT: &str = "[SEG_OBJECT]";
pub const SEG_PART: &str = "[SEG_PART]";

/// Word-level vocabulary; the two segmentation tokens are appended after the base range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    base_len: usize,
}

impl Vocabulary {
    /// Control tokens, then `words` (deduplicated, order kept), then the SEG tokens.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = [BOS, SEP, EOS, UNK].iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !tokens.contains(&w) && w != SEG_OBJECT.to_lowercase() && w != SEG_PART.to_lowercase() {
                tokens.push(w);
            }
        }
        let base_len = tokens.len();
        tokens.push(SEG_OBJECT.to_string());
        tokens.push(SEG_PART.to_string());
        Self::from_parts(tokens, base_len)
    }

    fn from_parts(tokens: Vec<String>, base_len: usize) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, ids, base_len }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn base_len(&self) -> usize {
        self.base_len
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn bos(&self) -> usize {
        self.ids[BOS]
    }

    pub fn sep(&self) -> usize {
        self.ids[SEP]
    }

    pub fn eos(&self) -> usize {
        self.ids[EOS]
    }

    pub fn seg_object(&self) -> usize {
        self.base_len
    }

    pub fn seg_part(&self) -> usize {
        self.base_len + 1
    }

    pub fn is_seg(&self, id: usize) -> bool {
        id == self.seg_object() || id == self.seg_part()
    }

    pub fn seg_token(&self, g: Granularity) -> usize {
        match g {
            Granularity::Object => self.seg_object(),
            Granularity::Part => self.seg_part(),
        }
    }

    /// `ĝ` for a SEG-family token; `None` for every other id.
    pub fn classify(&self, id: usize) -> Option<u8> {
        if id == self.seg_object() {
            Some(0)
        } else if id == self.seg_part() {
            Some(1)
        } else {
            None
        }
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let unk = self.ids[UNK];
        text.split_whitespace().map(|w| self.ids.get(&w.to_lowercase()).copied().unwrap_or(unk)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK)).collect::<Vec<_>>().join(" ")
    }

    /// One token per line, SEG tokens last.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_file_string(s: &str) -> Result<Self> {
        let tokens: Vec<String> = s.lines().map(str::to_string).collect();
        let n = tokens.len();
        if n < 6 || tokens[n - 2] != SEG_OBJECT || tokens[n - 1] != SEG_PART {
            return Err(Error::Parse { line: n, msg: "tokenizer file must end with the two SEG tokens".into() });
        }
        for (i, t) in [BOS, SEP, EOS, UNK].iter().enumerate() {
            if tokens[i] != *t {
                return Err(Error::Parse { line: i + 1, msg: format!("expected control token {t}") });
            }
        }
        let mut seen = std::collections::HashSet::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || !seen.insert(t) {
                return Err(Error::Parse { line: i + 1, msg: format!("empty or duplicate token `{t}`") });
            }
        }
        Ok(Self::from_parts(tokens, n - 2))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file_string(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the tokenizer file contents, hex encoded.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// Maximum generated text length.
    pub max_len: usize,
    /// Position-embedding table size (visual prefix + text).
    pub max_positions: usize,
    pub mlp_ratio: usize,
}

impl Default for SeqConfig {
    fn default() -> Self {
        Self { d_model: 128, heads: 4, layers: 2, max_len: 32, max_positions: 128, mlp_ratio: 2 }
    }
}

pub const PROJ: &str = "proj";
pub const REWEIGHT_ATTN: &str = "rew";

/// Visual tokens projected to the sequence-model width, with the three span lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedTokens {
    pub values: Matrix,
    pub n_image: usize,
    pub n_object: usize,
    pub n_part: usize,
}

impl ProjectedTokens {
    pub fn object_offset(&self) -> usize {
        self.n_image
    }

    pub fn part_offset(&self) -> usize {
        self.n_image + self.n_object
    }
}

pub fn init_params<R: rand::Rng + ?Sized>(params: &mut Params, cfg: &SeqConfig, vocab_len: usize, c: usize, rng: &mut R) {
    let d = cfg.d_model;
    params.init_weight(&format!("{PROJ}.w"), c, d, rng);
    params.init_zeros(&format!("{PROJ}.b"), 1, d);
    params.insert("lm.tok_emb", Matrix::randn(vocab_len, d, 0.02, rng));
    params.insert("lm.pos_emb", Matrix::randn(cfg.max_positions, d, 0.02, rng));
    let out_std = (1.0 / d as f64).sqrt() / (2.0 * cfg.layers as f64).sqrt();
    for l in 0..cfg.layers {
        let p = format!("lm.l{l}");
        params.init_ones(&format!("{p}.ln1_g"), 1, d);
        params.init_zeros(&format!("{p}.ln1_b"), 1, d);
        for k in ["wq", "wk", "wv"] {
            params.init_weight(&format!("{p}.{k}"), d, d, rng);
        }
        params.insert(format!("{p}.wo"), Matrix::randn(d, d, out_std, rng));
        params.init_ones(&format!("{p}.ln2_g"), 1, d);
        params.init_zeros(&format!("{p}.ln2_b"), 1, d);
        params.init_weight(&format!("{p}.fc1_w"), d, cfg.mlp_ratio * d, rng);
        params.init_zeros(&format!("{p}.fc1_b"), 1, cfg.mlp_ratio * d);
        params.insert(format!("{p}.fc2_w"), Matrix::randn(cfg.mlp_ratio * d, d, out_std, rng));
        params.init_zeros(&format!("{p}.fc2_b"), 1, d);
    }
    params.init_ones("lm.lnf_g", 1, d);
    params.init_zeros("lm.lnf_b", 1, d);
    params.init_weight("lm.head", d, vocab_len, rng);
    AttentionWeights::init_params(params, REWEIGHT_ATTN, c, rng);
}

/// `[F_l ‖ F̃_o ‖ F̃_p] · P + b` on the tape.
pub fn project_tokens_var(tape: &mut Tape, params: &Params, flow: &FlowVars) -> Var {
    let stacked = tape.concat_rows(&[flow.f_l, flow.f_o_enh, flow.f_p_enh]);
    let w = tape.param(params, &format!("{PROJ}.w"));
    let b = tape.param(params, &format!("{PROJ}.b"));
    tape.linear(stacked, w, b)
}

pub fn project_tokens(params: &Params, vf: &VisionFlowOutput) -> Result<ProjectedTokens> {
    let c = vf.f_l.channels();
    if vf.f_o_enh.cols() != c && vf.f_o_enh.rows() > 0 || vf.f_p_enh.cols() != c && vf.f_p_enh.rows() > 0 {
        return Err(invalid("flow outputs have inconsistent channel counts"));
    }
    let mut tape = Tape::new();
    let flow = FlowVars {
        f_l: tape.constant(vf.f_l.values.clone()),
        f_o_enh: tape.constant(vf.f_o_enh.clone()),
        f_p_enh: tape.constant(vf.f_p_enh.clone()),
    };
    let out = project_tokens_var(&mut tape, params, &flow);
    Ok(ProjectedTokens {
        values: tape.value(out).clone(),
        n_image: vf.f_l.values.rows(),
        n_object: vf.f_o_enh.rows(),
        n_part: vf.f_p_enh.rows(),
    })
}

/// Output of one sequence-model pass over `[visual ‖ text]`.
#[derive(Debug, Clone, Copy)]
pub struct LmOutput {
    /// Final-layer (post-norm) hidden states of the text positions, `T × D`.
    pub hidden: Var,
    /// Next-token logits of the text positions, `T × V`.
    pub logits: Var,
}

/// Causal transformer over the visual prefix followed by `text` token ids.
pub fn lm_forward(tape: &mut Tape, params: &Params, cfg: &SeqConfig, visual: Var, text: &[usize]) -> Result<LmOutput> {
    let n_vis = tape.shape(visual).0;
    let total = n_vis + text.len();
    if total > cfg.max_positions {
        return Err(invalid(format!("sequence of {total} exceeds {} positions", cfg.max_positions)));
    }
    let d = cfg.d_model;
    let emb = tape.param(params, "lm.tok_emb");
    let vocab = tape.shape(emb).0;
    if let Some(&bad) = text.iter().find(|&&t| t >= vocab) {
        return Err(invalid(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    let tok = tape.gather_rows(emb, text);
    let seq = tape.concat_rows(&[visual, tok]);
    let pos_table = tape.param(params, "lm.pos_emb");
    let positions: Vec<usize> = (0..total).collect();
    let pos = tape.gather_rows(pos_table, &positions);
    let mut x = tape.add(seq, pos);
    let dh = d / cfg.heads;
    for l in 0..cfg.layers {
        let p = format!("lm.l{l}");
        let g1 = tape.param(params, &format!("{p}.ln1_g"));
        let b1 = tape.param(params, &format!("{p}.ln1_b"));
        let h = tape.layer_norm(x, g1, b1);
        let wq = tape.param(params, &format!("{p}.wq"));
        let wk = tape.param(params, &format!("{p}.wk"));
        let wv = tape.param(params, &format!("{p}.wv"));
        let wo = tape.param(params, &format!("{p}.wo"));
        let q = tape.matmul(h, wq);
        let k = tape.matmul(h, wk);
        let v = tape.matmul(h, wv);
        let mut heads = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let qh = tape.slice_cols(q, hd * dh, dh);
            let kh = tape.slice_cols(k, hd * dh, dh);
            let vh = tape.slice_cols(v, hd * dh, dh);
            let s = tape.matmul_nt(qh, kh);
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
            let a = tape.causal_softmax_rows(s, 0);
            heads.push(tape.matmul(a, vh));
        }
        let ctx = tape.concat_cols(&heads);
        let att = tape.matmul(ctx, wo);
        x = tape.add(x, att);
        let g2 = tape.param(params, &format!("{p}.ln2_g"));
        let b2 = tape.param(params, &format!("{p}.ln2_b"));
        let h = tape.layer_norm(x, g2, b2);
        let w1 = tape.param(params, &format!("{p}.fc1_w"));
        let bb1 = tape.param(params, &format!("{p}.fc1_b"));
        let h = tape.linear(h, w1, bb1);
        let h = tape.gelu(h);
        let w2 = tape.param(params, &format!("{p}.fc2_w"));
        let bb2 = tape.param(params, &format!("{p}.fc2_b"));
        let h = tape.linear(h, w2, bb2);
        x = tape.add(x, h);
    }
    let text_x = tape.slice_rows(x, n_vis, text.len());
    let gf = tape.param(params, "lm.lnf_g");
    let bf = tape.param(params, "lm.lnf_b");
    let hidden = tape.layer_norm(text_x, gf, bf);
    let head = tape.param(params, "lm.head");
    let logits = tape.matmul(hidden, head);
    Ok(LmOutput { hidden, logits })
}

/// Prompt layout: `<bos> expression <sep>`.
pub fn prompt_ids(vocab: &Vocabulary, expression: &[usize]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(expression.len() + 2);
    ids.push(vocab.bos());
    ids.extend_from_slice(expression);
    ids.push(vocab.sep());
    ids
}

/// `ĝ` plus the SEG hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct SegDecision {
    pub g_hat: u8,
    pub seg_embedding: Matrix,
    pub emitted_token: usize,
}

impl SegDecision {
    pub fn granularity(&self) -> Granularity {
        Granularity::from_index(self.g_hat).expect("g_hat is 0 or 1 by construction")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub decision: SegDecision,
    /// Every emitted id, SEG token included, up to `<eos>` (exclusive).
    pub text: Vec<usize>,
}

/// Greedy decoding until `<eos>` or `max_len` emitted tokens.
pub fn generate(
    params: &Params,
    cfg: &SeqConfig,
    vocab: &Vocabulary,
    visual: &Matrix,
    expression: &[usize],
) -> Result<Generation> {
    if expression.is_empty() {
        return Err(invalid("expression must not be empty"));
    }
    let mut ids = prompt_ids(vocab, expression);
    let prompt_len = ids.len();
    let mut decision: Option<SegDecision> = None;
    let mut pending_seg: Option<(usize, usize)> = None; // (position, token)
    for _ in 0..=cfg.max_len {
        let mut tape = Tape::new();
        let vis = tape.constant(visual.clone());
        let out = lm_forward(&mut tape, params, cfg, vis, &ids)?;
        if let Some((pos, token)) = pending_seg.take() {
            let hidden = tape.value(out.hidden).slice_rows(pos, 1);
            let g_hat = vocab.classify(token).expect("pending token is a SEG token");
            decision = Some(SegDecision { g_hat, seg_embedding: hidden, emitted_token: token });
        }
        if ids.len() - prompt_len >= cfg.max_len {
            break;
        }
        let logits = tape.value(out.logits);
        let last = logits.row(logits.rows() - 1);
        let next = argmax(last);
        if next == vocab.eos() {
            break;
        }
        if decision.is_none() && vocab.is_seg(next) {
            pending_seg = Some((ids.len(), next));
        }
        ids.push(next);
    }
    // A SEG emitted as the very last allowed token still needs its hidden state.
    if let Some((pos, token)) = pending_seg {
        let mut tape = Tape::new();
        let vis = tape.constant(visual.clone());
        let out = lm_forward(&mut tape, params, cfg, vis, &ids)?;
        let hidden = tape.value(out.hidden).slice_rows(pos, 1);
        decision = Some(SegDecision { g_hat: vocab.classify(token).unwrap_or(0), seg_embedding: hidden, emitted_token: token });
    }
    let text = ids[prompt_len..].to_vec();
    match decision {
        Some(decision) => Ok(Generation { decision, text }),
        None => Err(Error::NoSeg { max_len: cfg.max_len }),
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `(1−ĝ)·F̃_o + ĝ·F̃_p` as exact branch selection; an empty branch falls back to `F_l`.
pub fn route_var(tape: &mut Tape, g_hat: u8, flow: &FlowVars) -> Result<Var> {
    let selected = match g_hat {
        0 => flow.f_o_enh,
        1 => flow.f_p_enh,
        other => return Err(Error::InvalidState(format!("granularity selector must be 0 or 1, got {other}"))),
    };
    Ok(if tape.shape(selected).0 == 0 { flow.f_l } else { selected })
}

pub fn route(g_hat: u8, f_o_enh: &Matrix, f_p_enh: &Matrix, f_l: &Matrix) -> Result<Matrix> {
    let selected = match g_hat {
        0 => f_o_enh,
        1 => f_p_enh,
        other => return Err(Error::InvalidState(format!("granularity selector must be 0 or 1, got {other}"))),
    };
    Ok(if selected.rows() == 0 { f_l.clone() } else { selected.clone() })
}

/// `F_r = CrossAttn(F_g, F̃, F̃)` with residual, or `F_g` unchanged when disabled.
pub fn reweight_var(tape: &mut Tape, f_g: Var, selected: Var, w: &AttentionVars, enabled: bool) -> Result<Var> {
    if !enabled {
        return Ok(f_g);
    }
    Ok(attend(tape, f_g, selected, w)?.0)
}

pub fn reweight(f_g: &FeatureMap, selected: &Matrix, w: &AttentionWeights, enabled: bool) -> Result<FeatureMap> {
    if !enabled {
        return Ok(f_g.clone());
    }
    let out = crate::mgvf::cross_attention(&f_g.values, selected, w)?;
    FeatureMap::new(f_g.grid_h, f_g.grid_w, f_g.extent_h, f_g.extent_w, out.output, f_g.level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["the", "red", "house", "roof", "of"])
    }

    #[test]
    fn vocabulary_layout_and_file_round_trip() {
        let v = vocab();
        assert_eq!(v.base_len(), 9);
        assert_ne!(v.seg_object(), v.seg_part());
        assert!(v.seg_object() >= v.base_len() && v.seg_part() >= v.base_len());
        assert_eq!(v.encode("the RED house"), vec![4, 5, 6]);
        assert_eq!(v.encode("blue"), vec![v.id(UNK).unwrap()]);
        let back = Vocabulary::from_file_string(&v.to_file_string()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.checksum(), v.checksum());
        assert!(Vocabulary::from_file_string("<bos>\n<sep>\n").is_err());
        let dup = v.to_file_string().replacen("roof", "red", 1);
        assert!(matches!(Vocabulary::from_file_string(&dup), Err(Error::Parse { .. })));
    }

    #[test]
    fn classify_is_a_function_of_the_token() {
        let v = vocab();
        assert_eq!(v.classify(v.seg_object()), Some(0));
        assert_eq!(v.classify(v.seg_part()), Some(1));
        for id in 0..v.base_len() {
            assert_eq!(v.classify(id), None);
        }
    }

    #[test]
    fn routing_examples() {
        let o = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let p = Matrix::from_rows(&[vec![9.0, 9.0]]);
        let l = Matrix::from_rows(&[vec![0.0, 0.0]]);
        assert_eq!(route(0, &o, &p, &l).unwrap(), o);
        assert_eq!(route(1, &o, &p, &l).unwrap(), p);
        assert!(matches!(route(2, &o, &p, &l), Err(Error::InvalidState(_))));
        assert_eq!(route(1, &o, &Matrix::zeros(0, 2), &l).unwrap(), l);
    }

    #[test]
    fn reweight_disabled_is_identity_and_shape_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fg = FeatureMap::new(4, 4, 16.0, 16.0, Matrix::randn(16, 6, 1.0, &mut rng), crate::geometry::FeatureLevel::Grounding).unwrap();
        let w = AttentionWeights::random(6, 2, &mut rng);
        let sel = Matrix::randn(3, 6, 1.0, &mut rng);
        assert_eq!(reweight(&fg, &sel, &w, false).unwrap(), fg);
        let r = reweight(&fg, &sel, &w, true).unwrap();
        assert_eq!(r.values.shape(), fg.values.shape());
        // one selected row: closed form q + v·Wv·Wo
        let one = sel.slice_rows(0, 1);
        let r = reweight(&fg, &one, &w, true).unwrap();
        let ctx = one.matmul(&w.wv).matmul(&w.wo);
        for i in 0..16 {
            for c in 0..6 {
                assert!((r.values[(i, c)] - fg.values[(i, c)] - ctx[(0, c)]).abs() < 1e-12);
            }
        }
    }

    fn tiny_model() -> (Params, SeqConfig, Vocabulary) {
        let v = vocab();
        let cfg = SeqConfig { d_model: 16, heads: 2, layers: 1, max_len: 6, max_positions: 40, mlp_ratio: 2 };
        let mut p = Params::new();
        init_params(&mut p, &cfg, v.len(), 8, &mut ChaCha8Rng::seed_from_u64(3));
        (p, cfg, v)
    }

    #[test]
    fn project_tokens_row_arithmetic() {
        let (p, _, _) = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fl = FeatureMap::new(4, 4, 64.0, 64.0, Matrix::randn(16, 8, 1.0, &mut rng), crate::geometry::FeatureLevel::Image).unwrap();
        let vf = VisionFlowOutput { f_l: fl.clone(), f_o_enh: Matrix::randn(4, 8, 1.0, &mut rng), f_p_enh: Matrix::randn(8, 8, 1.0, &mut rng) };
        let t = project_tokens(&p, &vf).unwrap();
        assert_eq!(t.values.shape(), (28, 16));
        assert_eq!((t.object_offset(), t.part_offset()), (16, 20));
        let vf0 = VisionFlowOutput { f_l: fl, f_o_enh: Matrix::zeros(0, 8), f_p_enh: Matrix::zeros(0, 8) };
        assert_eq!(project_tokens(&p, &vf0).unwrap().values.rows(), 16);
        let zero = VisionFlowOutput {
            f_l: FeatureMap::new(1, 1, 1.0, 1.0, Matrix::zeros(1, 8), crate::geometry::FeatureLevel::Image).unwrap(),
            f_o_enh: Matrix::zeros(0, 8),
            f_p_enh: Matrix::zeros(0, 8),
        };
        let z = project_tokens(&p, &zero).unwrap();
        assert_eq!(z.values.data(), p.get("proj.b").unwrap().data());
    }

    #[test]
    fn greedy_generation_is_deterministic_or_reports_no_seg() {
        let (mut p, cfg, v) = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let visual = Matrix::randn(3, 16, 1.0, &mut rng);
        let expr = v.encode("the red house");
        let a = generate(&p, &cfg, &v, &visual, &expr);
        let b = generate(&p, &cfg, &v, &visual, &expr);
        match (a, b) {
            (Ok(a), Ok(b)) => assert_eq!(a, b),
            (Err(Error::NoSeg { .. }), Err(Error::NoSeg { .. })) => {}
            other => panic!("nondeterministic generation: {other:?}"),
        }
        // A large final-norm bias on dimension 0 routed only to [SEG_PART] forces that token.
        let lnf_b = p.get_mut("lm.lnf_b").unwrap();
        lnf_b.data_mut().iter_mut().for_each(|x| *x = 0.0);
        lnf_b[(0, 0)] = 50.0;
        let head = p.get_mut("lm.head").unwrap();
        head.row_mut(0).iter_mut().for_each(|x| *x = 0.0);
        head[(0, v.seg_part())] = 1.0;
        let g = generate(&p, &cfg, &v, &visual, &expr).unwrap();
        assert_eq!(g.decision.emitted_token, v.seg_part());
        assert_eq!(g.decision.g_hat, 1);
        assert_eq!(g.decision.seg_embedding.shape(), (1, 16));
        assert!(generate(&p, &cfg, &v, &visual, &[]).is_err());
    }
}
