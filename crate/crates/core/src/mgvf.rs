//! Multi-granularity vision flow: region features pooled from the high-resolution map and
//! enhanced coarse→fine by cross-attention (image → object → part).

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::geometry::{region_mean_weights, BoundingBox, FeatureMap, GridGeometry};
use crate::params::Params;
use crate::tensor::Matrix;
use crate::types::{Granularity, ImageTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalSource {
    GroundTruth,
    Grid,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub boxes: Vec<BoundingBox>,
    pub level: Granularity,
    pub source: ProposalSource,
}

impl ProposalSet {
    pub fn new(boxes: Vec<BoundingBox>, level: Granularity, source: ProposalSource) -> Result<Self> {
        if let Some(b) = boxes.iter().find(|b| b.width() <= 0.0 || b.height() <= 0.0) {
            return Err(invalid(format!("proposal {:?} has no area", b.to_array())));
        }
        Ok(Self { boxes, level, source })
    }

    pub fn empty(level: Granularity, source: ProposalSource) -> Self {
        Self { boxes: Vec::new(), level, source }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Source of object/part boxes for an image.
pub trait ProposalProvider {
    fn propose(&mut self, image_id: &str, img: &ImageTensor, level: Granularity) -> Result<ProposalSet>;
}

/// Regular grid: `object_cells²` boxes at object level, `part_cells²` at part level.
#[derive(Debug, Clone, Copy)]
pub struct GridProposals {
    pub object_cells: usize,
    pub part_cells: usize,
}

impl Default for GridProposals {
    fn default() -> Self {
        Self { object_cells: 2, part_cells: 4 }
    }
}

impl GridProposals {
    pub fn boxes(&self, img_h: usize, img_w: usize, level: Granularity) -> Vec<BoundingBox> {
        let n = match level {
            Granularity::Object => self.object_cells,
            Granularity::Part => self.part_cells,
        };
        let (ch, cw) = (img_h as f64 / n as f64, img_w as f64 / n as f64);
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(BoundingBox::pixel(j as f64 * cw, i as f64 * ch, (j + 1) as f64 * cw, (i + 1) as f64 * ch).expect("ordered"));
            }
        }
        out
    }
}

impl ProposalProvider for GridProposals {
    fn propose(&mut self, _id: &str, img: &ImageTensor, level: Granularity) -> Result<ProposalSet> {
        ProposalSet::new(self.boxes(img.height(), img.width(), level), level, ProposalSource::Grid)
    }
}

/// Pass-through of annotated boxes.
#[derive(Debug, Clone, Default)]
pub struct GroundTruthProposals {
    pub objects: Vec<BoundingBox>,
    pub parts: Vec<BoundingBox>,
}

impl ProposalProvider for GroundTruthProposals {
    fn propose(&mut self, _id: &str, _img: &ImageTensor, level: Granularity) -> Result<ProposalSet> {
        let boxes = match level {
            Granularity::Object => self.objects.clone(),
            Granularity::Part => self.parts.clone(),
        };
        ProposalSet::new(boxes, level, ProposalSource::GroundTruth)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProposalRequest {
    pub image_id: String,
    pub level: Granularity,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProposalResponse {
    pub boxes: Vec<ScoredBox>,
}

impl ProposalResponse {
    fn into_set(self, level: Granularity) -> Result<ProposalSet> {
        let boxes = self
            .boxes
            .iter()
            .map(|b| BoundingBox::pixel(b.bbox[0], b.bbox[1], b.bbox[2], b.bbox[3]))
            .collect::<Result<Vec<_>>>()?;
        ProposalSet::new(boxes, level, ProposalSource::External)
    }
}

/// External detector reached through an in-process callback.
pub struct CallbackProposals<F>(pub F);

impl<F> ProposalProvider for CallbackProposals<F>
where
    F: FnMut(&ProposalRequest) -> Result<ProposalResponse>,
{
    fn propose(&mut self, image_id: &str, _img: &ImageTensor, level: Granularity) -> Result<ProposalSet> {
        (self.0)(&ProposalRequest { image_id: image_id.to_string(), level })?.into_set(level)
    }
}

/// External detector speaking line-delimited JSON over a child process's stdio.
pub struct SubprocessProposals {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl SubprocessProposals {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program).args(args).stdin(Stdio::piped()).stdout(Stdio::piped()).spawn()?;
        let stdin = child.stdin.take().ok_or_else(|| Error::Backend("no stdin".into()))?;
        let stdout = BufReader::new(child.stdout.take().ok_or_else(|| Error::Backend("no stdout".into()))?);
        Ok(Self { child, stdin, stdout })
    }
}

impl ProposalProvider for SubprocessProposals {
    fn propose(&mut self, image_id: &str, _img: &ImageTensor, level: Granularity) -> Result<ProposalSet> {
        let req = ProposalRequest { image_id: image_id.to_string(), level };
        serde_json::to_writer(&mut self.stdin, &req)?;
        self.stdin.write_all(b"\n")?;
        self.stdin.flush()?;
        let mut line = String::new();
        if self.stdout.read_line(&mut line)? == 0 {
            return Err(Error::Backend("proposal process closed its output".into()));
        }
        let resp: ProposalResponse = serde_json::from_str(&line)?;
        resp.into_set(level)
    }
}

impl Drop for SubprocessProposals {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// `N × (grid cells)` pooling operator: ROI Align over a `bins × bins` grid, mean-reduced.
pub fn region_pooling_matrix(grid: GridGeometry, props: &ProposalSet, bins: usize, samples: usize) -> Result<Matrix> {
    let n = grid.grid_h * grid.grid_w;
    let mut out = Matrix::zeros(props.len(), n);
    for (i, b) in props.boxes.iter().enumerate() {
        let w = region_mean_weights(grid, b, bins, samples)?;
        out.row_mut(i).copy_from_slice(w.data());
    }
    Ok(out)
}

pub const DEFAULT_BINS: usize = 7;
pub const DEFAULT_SAMPLES: usize = 2;

/// One C-vector per proposal, stacked in proposal order.
pub fn extract_region_features(f_h: &FeatureMap, props: &ProposalSet) -> Result<Matrix> {
    let p = region_pooling_matrix(f_h.into(), props, DEFAULT_BINS, DEFAULT_SAMPLES)?;
    Ok(p.matmul(&f_h.values))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn random<R: rand::Rng + ?Sized>(c: usize, heads: usize, rng: &mut R) -> Self {
        let std = (1.0 / c as f64).sqrt();
        Self {
            wq: Matrix::randn(c, c, std, rng),
            wk: Matrix::randn(c, c, std, rng),
            wv: Matrix::randn(c, c, std, rng),
            wo: Matrix::randn(c, c, std, rng),
            heads,
        }
    }

    pub fn from_params(params: &Params, prefix: &str, heads: usize) -> Result<Self> {
        let get = |k: &str| {
            params.get(&format!("{prefix}.{k}")).cloned().ok_or_else(|| invalid(format!("missing parameter {prefix}.{k}")))
        };
        Ok(Self { wq: get("wq")?, wk: get("wk")?, wv: get("wv")?, wo: get("wo")?, heads })
    }

    pub fn init_params<R: rand::Rng + ?Sized>(params: &mut Params, prefix: &str, c: usize, rng: &mut R) {
        let std = (1.0 / c as f64).sqrt();
        for k in ["wq", "wk", "wv"] {
            params.insert(format!("{prefix}.{k}"), Matrix::randn(c, c, std, rng));
        }
        // Small output projection: each step starts close to the identity.
        params.insert(format!("{prefix}.wo"), Matrix::randn(c, c, 0.1 * std, rng));
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.wq.rows();
        for m in [&self.wq, &self.wk, &self.wv, &self.wo] {
            if m.shape() != (c, c) {
                return Err(invalid("attention projections must be square and equal-sized"));
            }
        }
        if self.heads == 0 || c % self.heads != 0 {
            return Err(invalid(format!("head count {} must divide {c}", self.heads)));
        }
        Ok(())
    }
}

/// Projection variables of one attention block on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
}

impl AttentionVars {
    pub fn bind(tape: &mut Tape, params: &Params, prefix: &str, heads: usize) -> Self {
        Self {
            wq: tape.param(params, &format!("{prefix}.wq")),
            wk: tape.param(params, &format!("{prefix}.wk")),
            wv: tape.param(params, &format!("{prefix}.wv")),
            wo: tape.param(params, &format!("{prefix}.wo")),
            heads,
        }
    }

    pub fn leaves(tape: &mut Tape, w: &AttentionWeights) -> Self {
        Self {
            wq: tape.leaf(w.wq.clone()),
            wk: tape.leaf(w.wk.clone()),
            wv: tape.leaf(w.wv.clone()),
            wo: tape.leaf(w.wo.clone()),
            heads: w.heads,
        }
    }
}

/// `q + softmax((q Wq)(kv Wk)ᵀ/√d) (kv Wv) Wo`, per head. Returns the output and the
/// attention matrix of every head.
pub fn attend(tape: &mut Tape, q: Var, kv: Var, w: &AttentionVars) -> Result<(Var, Vec<Var>)> {
    let (nq, c) = tape.shape(q);
    let (nkv, ckv) = tape.shape(kv);
    if nkv == 0 {
        return Err(Error::EmptyContext);
    }
    if c != ckv || tape.shape(w.wq) != (c, c) {
        return Err(invalid(format!("attention dims: query {c}, key/value {ckv}, projection {:?}", tape.shape(w.wq))));
    }
    if w.heads == 0 || c % w.heads != 0 {
        return Err(invalid(format!("head count {} must divide {c}", w.heads)));
    }
    let qp = tape.matmul(q, w.wq);
    let kp = tape.matmul(kv, w.wk);
    let vp = tape.matmul(kv, w.wv);
    let dh = c / w.heads;
    let mut heads = Vec::with_capacity(w.heads);
    let mut attns = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let (qh, kh, vh) = if w.heads == 1 {
            (qp, kp, vp)
        } else {
            (tape.slice_cols(qp, h * dh, dh), tape.slice_cols(kp, h * dh, dh), tape.slice_cols(vp, h * dh, dh))
        };
        let scores = tape.matmul_nt(qh, kh);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let a = tape.softmax_rows(scores);
        heads.push(tape.matmul(a, vh));
        attns.push(a);
    }
    let ctx = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
    let out = tape.matmul(ctx, w.wo);
    debug_assert_eq!(tape.shape(out), (nq, c));
    Ok((tape.add(q, out), attns))
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Matrix,
    /// One `N_q × N_kv` row-stochastic matrix per head.
    pub attention: Vec<Matrix>,
}

pub fn cross_attention(q: &Matrix, kv: &Matrix, w: &AttentionWeights) -> Result<AttentionOutput> {
    w.validate()?;
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let kvv = tape.constant(kv.clone());
    let wv = AttentionVars {
        wq: tape.constant(w.wq.clone()),
        wk: tape.constant(w.wk.clone()),
        wv: tape.constant(w.wv.clone()),
        wo: tape.constant(w.wo.clone()),
        heads: w.heads,
    };
    let (out, attns) = attend(&mut tape, qv, kvv, &wv)?;
    Ok(AttentionOutput { output: tape.value(out).clone(), attention: attns.iter().map(|&a| tape.value(a).clone()).collect() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub bins: usize,
    pub samples_per_bin: usize,
    pub heads: usize,
    /// Cascade cross-attention; when off, pooled region features pass through unchanged.
    pub adjacent_interaction: bool,
    pub use_object_feats: bool,
    pub use_part_feats: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            samples_per_bin: DEFAULT_SAMPLES,
            heads: 1,
            adjacent_interaction: true,
            use_object_feats: true,
            use_part_feats: true,
        }
    }
}

pub const OBJECT_ATTN: &str = "flow.obj";
pub const PART_ATTN: &str = "flow.part";

pub fn init_flow_params<R: rand::Rng + ?Sized>(params: &mut Params, c: usize, rng: &mut R) {
    AttentionWeights::init_params(params, OBJECT_ATTN, c, rng);
    AttentionWeights::init_params(params, PART_ATTN, c, rng);
}

/// Tape-side outputs of the vision flow. Empty spans are `0 × C`.
#[derive(Debug, Clone, Copy)]
pub struct FlowVars {
    pub f_l: Var,
    pub f_o_enh: Var,
    pub f_p_enh: Var,
}

/// Inputs to the flow: image-level features, the high-res grid, and the proposal sets.
pub struct FlowInputs<'a> {
    pub f_l: Var,
    pub f_h: Var,
    pub high_grid: GridGeometry,
    pub objects: &'a ProposalSet,
    pub parts: &'a ProposalSet,
}

pub fn run_vision_flow_var(
    tape: &mut Tape,
    inputs: &FlowInputs<'_>,
    obj_attn: &AttentionVars,
    part_attn: &AttentionVars,
    cfg: &FlowConfig,
) -> Result<FlowVars> {
    let c = tape.shape(inputs.f_l).1;
    let pool = |tape: &mut Tape, set: &ProposalSet, enabled: bool| -> Result<Var> {
        if !enabled || set.is_empty() {
            return Ok(tape.constant(Matrix::zeros(0, c)));
        }
        let p = region_pooling_matrix(inputs.high_grid, set, cfg.bins, cfg.samples_per_bin)?;
        let p = tape.constant(p);
        Ok(tape.matmul(p, inputs.f_h))
    };
    let f_o = pool(tape, inputs.objects, cfg.use_object_feats)?;
    let f_p = pool(tape, inputs.parts, cfg.use_part_feats)?;
    if !cfg.adjacent_interaction {
        return Ok(FlowVars { f_l: inputs.f_l, f_o_enh: f_o, f_p_enh: f_p });
    }
    let n_o = tape.shape(f_o).0;
    let n_p = tape.shape(f_p).0;
    let f_o_enh = if n_o > 0 { attend(tape, f_o, inputs.f_l, obj_attn)?.0 } else { f_o };
    let f_p_enh = if n_p > 0 {
        let context = if n_o > 0 { f_o_enh } else { inputs.f_l };
        attend(tape, f_p, context, part_attn)?.0
    } else {
        f_p
    };
    Ok(FlowVars { f_l: inputs.f_l, f_o_enh, f_p_enh })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionFlowOutput {
    pub f_l: FeatureMap,
    pub f_o_enh: Matrix,
    pub f_p_enh: Matrix,
}

/// Pure forward of the vision flow with weights taken from `params`.
pub fn run_vision_flow(
    params: &Params,
    f_l: &FeatureMap,
    f_h: &FeatureMap,
    s_o: &ProposalSet,
    s_p: &ProposalSet,
    cfg: &FlowConfig,
) -> Result<VisionFlowOutput> {
    if f_l.channels() != f_h.channels() {
        return Err(invalid("image and high-res channel counts differ"));
    }
    let mut tape = Tape::new();
    let fl = tape.constant(f_l.values.clone());
    let fh = tape.constant(f_h.values.clone());
    let oa = AttentionVars::bind(&mut tape, params, OBJECT_ATTN, cfg.heads);
    let pa = AttentionVars::bind(&mut tape, params, PART_ATTN, cfg.heads);
    let inputs = FlowInputs { f_l: fl, f_h: fh, high_grid: f_h.into(), objects: s_o, parts: s_p };
    let out = run_vision_flow_var(&mut tape, &inputs, &oa, &pa, cfg)?;
    Ok(VisionFlowOutput {
        f_l: f_l.clone(),
        f_o_enh: tape.value(out.f_o_enh).clone(),
        f_p_enh: tape.value(out.f_p_enh).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::FeatureLevel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn pb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::pixel(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn grid_proposals() {
        let img = ImageTensor::filled(64, 64, [0.0; 3]);
        let mut g = GridProposals::default();
        let o = g.propose("x", &img, Granularity::Object).unwrap();
        assert_eq!(o.len(), 4);
        assert_eq!(o.boxes[3].to_array(), [32.0, 32.0, 64.0, 64.0]);
        assert_eq!(g.propose("x", &img, Granularity::Part).unwrap().len(), 16);
        let mut gt = GroundTruthProposals { objects: vec![pb(1.0, 2.0, 10.0, 12.0)], parts: vec![] };
        let s = gt.propose("x", &img, Granularity::Object).unwrap();
        assert_eq!(s.boxes, vec![pb(1.0, 2.0, 10.0, 12.0)]);
        assert_eq!(s.source, ProposalSource::GroundTruth);
    }

    #[test]
    fn callback_provider_uses_wire_types() {
        let img = ImageTensor::filled(8, 8, [0.0; 3]);
        let mut cb = CallbackProposals(|req: &ProposalRequest| {
            assert_eq!(req.image_id, "img7");
            Ok(ProposalResponse { boxes: vec![ScoredBox { bbox: [0.0, 0.0, 4.0, 4.0], score: 0.9 }] })
        });
        let s = cb.propose("img7", &img, Granularity::Part).unwrap();
        assert_eq!(s.source, ProposalSource::External);
        assert_eq!(s.len(), 1);
        let wire = serde_json::to_string(&ProposalResponse { boxes: vec![ScoredBox { bbox: [1.0, 2.0, 3.0, 4.0], score: 0.5 }] }).unwrap();
        assert_eq!(wire, r#"{"boxes":[{"box":[1.0,2.0,3.0,4.0],"score":0.5}]}"#);
    }

    #[test]
    fn region_features_of_constant_map_and_empty_set() {
        let fm = FeatureMap::new(4, 4, 64.0, 64.0, Matrix::filled(16, 5, -1.25), FeatureLevel::HighRes).unwrap();
        let props = ProposalSet::new(vec![pb(0.0, 0.0, 30.0, 10.0), pb(5.0, 5.0, 60.0, 61.0)], Granularity::Object, ProposalSource::Grid).unwrap();
        let f = extract_region_features(&fm, &props).unwrap();
        assert_eq!(f.shape(), (2, 5));
        assert!(f.data().iter().all(|v| (v + 1.25).abs() < 1e-12));
        let e = extract_region_features(&fm, &ProposalSet::empty(Granularity::Part, ProposalSource::Grid)).unwrap();
        assert_eq!(e.shape(), (0, 5));
    }

    #[test]
    fn region_features_match_brute_force_bilinear() {
        // 2x2 grid over an 8x8 extent; single bin/sample at the box center would be the
        // bilinear value there, and the 7x7x(2x2) mean equals the mean of bilinear samples.
        let v = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![5.0]]);
        let fm = FeatureMap::new(2, 2, 8.0, 8.0, v, FeatureLevel::HighRes).unwrap();
        let b = pb(1.0, 2.0, 7.0, 6.5);
        let props = ProposalSet::new(vec![b], Granularity::Object, ProposalSource::GroundTruth).unwrap();
        let got = extract_region_features(&fm, &props).unwrap().item();
        let bil = |x: f64, y: f64| {
            let fx = (x / 4.0 - 0.5).clamp(0.0, 1.0);
            let fy = (y / 4.0 - 0.5).clamp(0.0, 1.0);
            1.0 * (1.0 - fy) * (1.0 - fx) + 2.0 * (1.0 - fy) * fx + 3.0 * fy * (1.0 - fx) + 5.0 * fy * fx
        };
        let n = 7 * 2;
        let mut acc = 0.0;
        for iy in 0..n {
            for ix in 0..n {
                let y = b.y0 + b.height() * (iy as f64 + 0.5) / n as f64;
                let x = b.x0 + b.width() * (ix as f64 + 0.5) / n as f64;
                acc += bil(x, y);
            }
        }
        assert!((got - acc / (n * n) as f64).abs() < 1e-12);
    }

    #[test]
    fn single_key_attention_ignores_scores() {
        let mut r = rng(1);
        let w = AttentionWeights::random(4, 1, &mut r);
        let q = Matrix::randn(3, 4, 1.0, &mut r);
        let kv = Matrix::randn(1, 4, 1.0, &mut r);
        let out = cross_attention(&q, &kv, &w).unwrap();
        let value_path = kv.matmul(&w.wv).matmul(&w.wo);
        for i in 0..3 {
            for c in 0..4 {
                assert!((out.output[(i, c)] - q[(i, c)] - value_path[(0, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tied_scores_average_the_values() {
        let mut r = rng(2);
        let mut w = AttentionWeights::random(3, 1, &mut r);
        w.wk = Matrix::zeros(3, 3);
        w.wv = Matrix::identity(3);
        w.wo = Matrix::identity(3);
        let q = Matrix::row_vector(&[0.3, -0.2, 0.9]);
        let kv = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![3.0, 0.0, -1.0]]);
        let out = cross_attention(&q, &kv, &w).unwrap();
        let expect = [0.3 + 2.0, -0.2 + 1.0, 0.9 + 1.0];
        for c in 0..3 {
            assert!((out.output[(0, c)] - expect[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_stochastic_and_empty_context_errors() {
        let mut r = rng(3);
        let w = AttentionWeights::random(8, 2, &mut r);
        let q = Matrix::randn(5, 8, 2.0, &mut r);
        let kv = Matrix::randn(7, 8, 2.0, &mut r);
        let out = cross_attention(&q, &kv, &w).unwrap();
        assert_eq!(out.attention.len(), 2);
        for a in &out.attention {
            for i in 0..a.rows() {
                assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(a.row(i).iter().all(|&x| x >= 0.0));
            }
        }
        assert!(matches!(cross_attention(&q, &Matrix::zeros(0, 8), &w), Err(Error::EmptyContext)));
        let bad = AttentionWeights { heads: 3, ..w };
        assert!(cross_attention(&q, &kv, &bad).is_err());
    }

    fn flow_fixture(seed: u64) -> (Params, FeatureMap, FeatureMap, ProposalSet, ProposalSet) {
        let mut r = rng(seed);
        let c = 6;
        let mut params = Params::new();
        for p in [OBJECT_ATTN, PART_ATTN] {
            let w = AttentionWeights::random(c, 1, &mut r);
            params.insert(format!("{p}.wq"), w.wq);
            params.insert(format!("{p}.wk"), w.wk);
            params.insert(format!("{p}.wv"), w.wv);
            params.insert(format!("{p}.wo"), w.wo);
        }
        let f_l = FeatureMap::new(2, 2, 32.0, 32.0, Matrix::randn(4, c, 1.0, &mut r), FeatureLevel::Image).unwrap();
        let f_h = FeatureMap::new(4, 4, 32.0, 32.0, Matrix::randn(16, c, 1.0, &mut r), FeatureLevel::HighRes).unwrap();
        let so = ProposalSet::new(vec![pb(0.0, 0.0, 16.0, 20.0), pb(10.0, 4.0, 30.0, 30.0)], Granularity::Object, ProposalSource::GroundTruth).unwrap();
        let sp = ProposalSet::new(
            vec![pb(0.0, 0.0, 8.0, 8.0), pb(12.0, 4.0, 20.0, 12.0), pb(20.0, 20.0, 30.0, 28.0)],
            Granularity::Part,
            ProposalSource::GroundTruth,
        )
        .unwrap();
        (params, f_l, f_h, so, sp)
    }

    #[test]
    fn flow_empty_sets_and_bypass() {
        let (params, f_l, f_h, so, sp) = flow_fixture(4);
        let cfg = FlowConfig::default();
        let empty_o = ProposalSet::empty(Granularity::Object, ProposalSource::Grid);
        let empty_p = ProposalSet::empty(Granularity::Part, ProposalSource::Grid);
        let out = run_vision_flow(&params, &f_l, &f_h, &empty_o, &empty_p, &cfg).unwrap();
        assert_eq!(out.f_o_enh.rows(), 0);
        assert_eq!(out.f_p_enh.rows(), 0);
        assert_eq!(out.f_l, f_l);

        let off = FlowConfig { adjacent_interaction: false, ..cfg };
        let out = run_vision_flow(&params, &f_l, &f_h, &so, &sp, &off).unwrap();
        assert_eq!(out.f_o_enh, extract_region_features(&f_h, &so).unwrap());
        assert_eq!(out.f_p_enh, extract_region_features(&f_h, &sp).unwrap());

        // empty objects: parts attend to the image-level features instead
        let out = run_vision_flow(&params, &f_l, &f_h, &empty_o, &sp, &cfg).unwrap();
        let w = AttentionWeights::from_params(&params, PART_ATTN, 1).unwrap();
        let expect = cross_attention(&extract_region_features(&f_h, &sp).unwrap(), &f_l.values, &w).unwrap().output;
        assert!(out.f_p_enh.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn one_object_over_constant_image_features_has_closed_form() {
        let (params, _, f_h, so, _) = flow_fixture(5);
        let c = f_h.channels();
        let k: Vec<f64> = (0..c).map(|i| 0.1 * i as f64 - 0.2).collect();
        let const_rows: Vec<Vec<f64>> = (0..4).map(|_| k.clone()).collect();
        let f_l = FeatureMap::new(2, 2, 32.0, 32.0, Matrix::from_rows(&const_rows), FeatureLevel::Image).unwrap();
        let one = ProposalSet::new(vec![so.boxes[0]], Granularity::Object, ProposalSource::GroundTruth).unwrap();
        let empty_p = ProposalSet::empty(Granularity::Part, ProposalSource::Grid);
        let out = run_vision_flow(&params, &f_l, &f_h, &one, &empty_p, &FlowConfig::default()).unwrap();
        // identical keys ⇒ uniform attention ⇒ context is k·Wv·Wo regardless of the query
        let w = AttentionWeights::from_params(&params, OBJECT_ATTN, 1).unwrap();
        let ctx = Matrix::row_vector(&k).matmul(&w.wv).matmul(&w.wo);
        let f_o = extract_region_features(&f_h, &one).unwrap();
        for j in 0..c {
            assert!((out.f_o_enh[(0, j)] - f_o[(0, j)] - ctx[(0, j)]).abs() < 1e-12);
        }
    }

    #[test]
    fn parts_never_influence_objects_and_rows_are_equivariant() {
        let (params, f_l, f_h, so, sp) = flow_fixture(6);
        let cfg = FlowConfig::default();
        let a = run_vision_flow(&params, &f_l, &f_h, &so, &sp, &cfg).unwrap();
        let mut sp2 = sp.clone();
        sp2.boxes[1] = pb(1.0, 1.0, 31.0, 9.0);
        let b = run_vision_flow(&params, &f_l, &f_h, &so, &sp2, &cfg).unwrap();
        assert_eq!(a.f_o_enh.data(), b.f_o_enh.data());
        assert_ne!(a.f_p_enh.data(), b.f_p_enh.data());

        let mut sp_rev = sp.clone();
        sp_rev.boxes.reverse();
        let c = run_vision_flow(&params, &f_l, &f_h, &so, &sp_rev, &cfg).unwrap();
        let n = sp.len();
        for i in 0..n {
            let (x, y) = (a.f_p_enh.row(i), c.f_p_enh.row(n - 1 - i));
            assert!(x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-12));
        }
    }
}
