//! Dot-product mask head: the projected SEG embedding acts as a dynamic 1×1 kernel over the
//! re-weighted grounding features, followed by a learned single-channel transposed
//! convolution (kernel = stride = upsample factor) to pixel resolution.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, FeatureMap};
use crate::mgfe::SegDecision;
use crate::params::Params;
use crate::tensor::Matrix;

pub const SEG_PROJ_W: &str = "dec.seg_w";
pub const SEG_PROJ_B: &str = "dec.seg_b";
pub const UP_W: &str = "dec.up_w";
pub const UP_B: &str = "dec.up_b";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub upsample_factor: usize,
    /// Grounding feature width `C`.
    pub channels: usize,
    /// Sequence-model width `D` of the SEG embedding.
    pub seg_dim: usize,
}

impl DecoderConfig {
    pub fn output_size(&self, grid_h: usize, grid_w: usize) -> (usize, usize) {
        (grid_h * self.upsample_factor, grid_w * self.upsample_factor)
    }

    pub fn init_params<R: rand::Rng + ?Sized>(&self, params: &mut Params, rng: &mut R) {
        params.init_weight(SEG_PROJ_W, self.seg_dim, self.channels, rng);
        params.init_zeros(SEG_PROJ_B, 1, self.channels);
        let k = self.upsample_factor * self.upsample_factor;
        params.insert(UP_W, Matrix::filled(1, k, 1.0));
        params.init_zeros(UP_B, 1, 1);
    }
}

/// Per-pixel logits; `sigmoid(values)` is the foreground probability.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLogits {
    pub height: usize,
    pub width: usize,
    pub values: Matrix,
}

impl MaskLogits {
    pub fn probabilities(&self) -> Matrix {
        self.values.map(sigmoid)
    }
}

/// Transposed convolution with one input and one output channel, kernel = stride = `f`.
/// `patch` is `(gh·gw) × 1`, `kernel` is `1 × f²`, `bias` is `1 × 1`; output is `(gh·f) × (gw·f)`.
pub fn upsample_var(tape: &mut Tape, patch: Var, kernel: Var, bias: Var, gh: usize, gw: usize, f: usize) -> Var {
    let out = {
        let p = tape.value(patch);
        let k = tape.value(kernel);
        let b = tape.value(bias).item();
        let mut out = Matrix::zeros(gh * f, gw * f);
        for i in 0..gh {
            for j in 0..gw {
                let v = p.data()[i * gw + j];
                for dy in 0..f {
                    let row = out.row_mut(i * f + dy);
                    for dx in 0..f {
                        row[j * f + dx] = v * k.data()[dy * f + dx] + b;
                    }
                }
            }
        }
        out
    };
    tape.custom(
        &[patch, kernel, bias],
        out,
        Box::new(move |g, _, parents| {
            let (p, k) = (parents[0], parents[1]);
            let mut dp = Matrix::zeros(gh * gw, 1);
            let mut dk = Matrix::zeros(1, f * f);
            let mut db = 0.0;
            for i in 0..gh {
                for j in 0..gw {
                    let v = p.data()[i * gw + j];
                    let mut acc = 0.0;
                    for dy in 0..f {
                        let row = g.row(i * f + dy);
                        for dx in 0..f {
                            let gv = row[j * f + dx];
                            acc += gv * k.data()[dy * f + dx];
                            dk.data_mut()[dy * f + dx] += gv * v;
                            db += gv;
                        }
                    }
                    dp.data_mut()[i * gw + j] = acc;
                }
            }
            vec![Some(dp), Some(dk), Some(Matrix::scalar(db))]
        }),
    )
}

/// Mask logits on the tape from `F_r` (`gh·gw × C`) and a `1 × D` SEG embedding.
pub fn decode_var(
    tape: &mut Tape,
    params: &Params,
    cfg: &DecoderConfig,
    f_r: Var,
    grid_h: usize,
    grid_w: usize,
    seg: Var,
) -> Result<Var> {
    let (n, c) = tape.shape(f_r);
    if n != grid_h * grid_w || c != cfg.channels {
        return Err(Error::InvalidState(format!(
            "decoder expects {}x{} patches of width {}, got {n}x{c}",
            grid_h, grid_w, cfg.channels
        )));
    }
    let (sr, sd) = tape.shape(seg);
    if sr != 1 || sd != cfg.seg_dim {
        return Err(Error::InvalidState(format!("seg embedding must be 1x{}, got {sr}x{sd}", cfg.seg_dim)));
    }
    let w = tape.param(params, SEG_PROJ_W);
    let b = tape.param(params, SEG_PROJ_B);
    let kernel = tape.linear(seg, w, b);
    let logits = tape.matmul_nt(f_r, kernel);
    let logits = tape.scale(logits, 1.0 / (c as f64).sqrt());
    let up_w = tape.param(params, UP_W);
    let up_b = tape.param(params, UP_B);
    Ok(upsample_var(tape, logits, up_w, up_b, grid_h, grid_w, cfg.upsample_factor))
}

pub fn decode(params: &Params, cfg: &DecoderConfig, f_r: &FeatureMap, seg: &SegDecision) -> Result<MaskLogits> {
    let mut tape = Tape::new();
    let fr = tape.constant(f_r.values.clone());
    let s = tape.constant(seg.seg_embedding.clone());
    let out = decode_var(&mut tape, params, cfg, fr, f_r.grid_h, f_r.grid_w, s)?;
    let values = tape.value(out).clone();
    Ok(MaskLogits { height: values.rows(), width: values.cols(), values })
}

/// Foreground iff `sigmoid(logit) > threshold`.
pub fn binarize(logits: &MaskLogits, threshold: f64) -> BinaryMask {
    BinaryMask::from_fn(logits.height, logits.width, |r, c| sigmoid(logits.values[(r, c)]) > threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::FeatureLevel;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (Params, DecoderConfig, ChaCha8Rng) {
        let cfg = DecoderConfig { upsample_factor: 4, channels: 6, seg_dim: 5 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        cfg.init_params(&mut p, &mut rng);
        p.insert(UP_W, Matrix::randn(1, 16, 1.0, &mut rng));
        p.insert(SEG_PROJ_B, Matrix::randn(1, 6, 0.3, &mut rng));
        (p, cfg, rng)
    }

    fn fmap(values: Matrix) -> FeatureMap {
        FeatureMap::new(3, 2, 12.0, 8.0, values, FeatureLevel::Grounding).unwrap()
    }

    fn seg(e: Matrix) -> SegDecision {
        SegDecision { g_hat: 0, seg_embedding: e, emitted_token: 0 }
    }

    #[test]
    fn output_resolution_and_zero_embedding() {
        let (mut p, cfg, mut rng) = setup(1);
        p.insert(SEG_PROJ_B, Matrix::zeros(1, 6));
        p.insert(UP_B, Matrix::scalar(0.0));
        let f = fmap(Matrix::randn(6, 6, 1.0, &mut rng));
        let out = decode(&p, &cfg, &f, &seg(Matrix::zeros(1, 5))).unwrap();
        assert_eq!((out.height, out.width), cfg.output_size(3, 2));
        assert_eq!((out.height, out.width), (12, 8));
        assert!(out.values.data().iter().all(|&v| v == 0.0));
        assert!(out.probabilities().data().iter().all(|&v| v == 0.5));
        assert!(binarize(&out, 0.5).is_empty());
    }

    #[test]
    fn dimension_mismatch_is_invalid_state() {
        let (p, cfg, mut rng) = setup(2);
        let f = fmap(Matrix::randn(6, 6, 1.0, &mut rng));
        let err = decode(&p, &cfg, &f, &seg(Matrix::zeros(1, 4))).unwrap_err();
        assert!(matches!(err, Error::InvalidState(_)));
        let bad = FeatureMap::new(2, 2, 8.0, 8.0, Matrix::zeros(4, 6), FeatureLevel::Grounding).unwrap();
        let wide = DecoderConfig { channels: 7, ..cfg };
        assert!(decode(&p, &wide, &bad, &seg(Matrix::zeros(1, 5))).is_err());
    }

    #[test]
    fn deterministic() {
        let (p, cfg, mut rng) = setup(3);
        let f = fmap(Matrix::randn(6, 6, 1.0, &mut rng));
        let s = seg(Matrix::randn(1, 5, 1.0, &mut rng));
        assert_eq!(decode(&p, &cfg, &f, &s).unwrap(), decode(&p, &cfg, &f, &s).unwrap());
    }

    #[test]
    fn superposition_in_features_with_biases_zeroed() {
        let (mut p, cfg, mut rng) = setup(4);
        p.insert(UP_B, Matrix::scalar(0.0));
        let s = seg(Matrix::randn(1, 5, 1.0, &mut rng));
        let a = Matrix::randn(6, 6, 1.0, &mut rng);
        let b = Matrix::randn(6, 6, 1.0, &mut rng);
        let sum = a.zip_map(&b, |x, y| 2.0 * x - 0.5 * y);
        let da = decode(&p, &cfg, &fmap(a), &s).unwrap().values;
        let db = decode(&p, &cfg, &fmap(b), &s).unwrap().values;
        let ds = decode(&p, &cfg, &fmap(sum), &s).unwrap().values;
        let expect = da.zip_map(&db, |x, y| 2.0 * x - 0.5 * y);
        assert!(ds.max_abs_diff(&expect) < 1e-9);
    }

    #[test]
    fn binarize_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values = Matrix::randn(7, 9, 3.0, &mut rng);
        let logits = MaskLogits { height: 7, width: 9, values: values.clone() };
        for t in [0.1, 0.5, 0.9] {
            let m = binarize(&logits, t);
            for r in 0..7 {
                for c in 0..9 {
                    let p = 1.0 / (1.0 + (-values[(r, c)]).exp());
                    assert_eq!(m.get(r, c), p > t);
                }
            }
        }
        let plus = MaskLogits { height: 1, width: 1, values: Matrix::scalar(10.0) };
        assert!(binarize(&plus, 0.5).get(0, 0));
    }

    #[test]
    fn decode_gradients_match_finite_differences() {
        for seed in 0..5 {
            let (p, cfg, mut rng) = setup(10 + seed);
            let inputs = [Matrix::randn(6, 6, 1.0, &mut rng), Matrix::randn(1, 5, 1.0, &mut rng)];
            let report = check_gradients(&inputs, |tape, v| decode_var(tape, &p, &cfg, v[0], 3, 2, v[1]).unwrap());
            assert!(report.passes(1e-4), "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn upsample_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(20 + seed);
            let inputs = [
                Matrix::randn(6, 1, 1.0, &mut rng),
                Matrix::randn(1, 9, 1.0, &mut rng),
                Matrix::randn(1, 1, 1.0, &mut rng),
            ];
            let report = check_gradients(&inputs, |tape, v| upsample_var(tape, v[0], v[1], v[2], 2, 3, 3));
            assert!(report.passes(1e-4), "seed {seed}: {report:?}");
        }
    }
}
