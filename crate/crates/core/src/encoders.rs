//! Toy stand-ins for the frozen foundation encoders: patchify, linear projection, and a
//! stack of residual per-patch MLP blocks (1×1 convolutions). Patch centers enter as
//! Fourier position features, so one weight set handles any grid size.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::geometry::{FeatureLevel, FeatureMap};
use crate::params::Params;
use crate::tensor::Matrix;
use crate::types::ImageTensor;

/// Fourier frequencies per axis for the position features.
const POS_FREQS: usize = 4;
/// `u, v` plus `sin/cos` per frequency per axis.
pub const POS_FEATURES: usize = 2 + 4 * POS_FREQS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    /// Fixed-resolution image encoder.
    Low,
    /// Variable-resolution encoder.
    High,
    /// Fixed-resolution grounding encoder.
    Grounding,
}

impl EncoderKind {
    pub fn prefix(self) -> &'static str {
        match self {
            EncoderKind::Low => "low",
            EncoderKind::High => "high",
            EncoderKind::Grounding => "ground",
        }
    }

    pub fn level(self) -> FeatureLevel {
        match self {
            EncoderKind::Low => FeatureLevel::Image,
            EncoderKind::High => FeatureLevel::HighRes,
            EncoderKind::Grounding => FeatureLevel::Grounding,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Fixed resolution for `Low`/`Grounding`; the resize target for `High`.
    pub input_res: usize,
    pub patch_stride: usize,
    pub channels: usize,
    pub depth: usize,
}

impl EncoderConfig {
    pub fn low() -> Self {
        Self { kind: EncoderKind::Low, input_res: 64, patch_stride: 16, channels: 64, depth: 1 }
    }

    pub fn high() -> Self {
        Self { kind: EncoderKind::High, input_res: 128, patch_stride: 16, channels: 64, depth: 1 }
    }

    pub fn grounding() -> Self {
        Self { kind: EncoderKind::Grounding, input_res: 64, patch_stride: 4, channels: 64, depth: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.patch_stride == 0 {
            return Err(invalid("encoder channels and stride must be positive"));
        }
        if self.input_res % self.patch_stride != 0 {
            return Err(invalid(format!("input_res {} not divisible by stride {}", self.input_res, self.patch_stride)));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_stride * self.patch_stride * 3 + POS_FEATURES
    }

    pub fn init_params<R: rand::Rng + ?Sized>(&self, params: &mut Params, rng: &mut R) {
        let p = self.kind.prefix();
        let c = self.channels;
        params.init_weight(&format!("{p}.patch_w"), self.patch_dim(), c, rng);
        params.init_zeros(&format!("{p}.patch_b"), 1, c);
        for i in 0..self.depth {
            params.init_ones(&format!("{p}.blk{i}.ln_g"), 1, c);
            params.init_zeros(&format!("{p}.blk{i}.ln_b"), 1, c);
            params.init_weight(&format!("{p}.blk{i}.fc1_w"), c, 2 * c, rng);
            params.init_zeros(&format!("{p}.blk{i}.fc1_b"), 1, 2 * c);
            params.init_weight(&format!("{p}.blk{i}.fc2_w"), 2 * c, c, rng);
            params.init_zeros(&format!("{p}.blk{i}.fc2_b"), 1, c);
        }
    }
}

/// Grid produced by an encoder: `(grid_h, grid_w)`.
pub fn check_resolution(cfg: &EncoderConfig, img: &ImageTensor) -> Result<(usize, usize)> {
    let (h, w) = (img.height(), img.width());
    let s = cfg.patch_stride;
    match cfg.kind {
        EncoderKind::Low | EncoderKind::Grounding => {
            if h != cfg.input_res || w != cfg.input_res {
                return Err(invalid(format!(
                    "{} encoder expects {r}x{r} input, got {h}x{w}",
                    cfg.kind.prefix(),
                    r = cfg.input_res
                )));
            }
        }
        EncoderKind::High => {
            if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
                return Err(invalid(format!("high-res input {h}x{w} not divisible by stride {s}")));
            }
        }
    }
    Ok((h / s, w / s))
}

/// Patch pixels (centered to `[-1,1]`) followed by position features, one row per patch.
pub fn patchify(img: &ImageTensor, stride: usize) -> Matrix {
    let (gh, gw) = (img.height() / stride, img.width() / stride);
    let dim = stride * stride * 3 + POS_FEATURES;
    let mut out = Matrix::zeros(gh * gw, dim);
    for i in 0..gh {
        for j in 0..gw {
            let row = out.row_mut(i * gw + j);
            let mut k = 0;
            for dy in 0..stride {
                for dx in 0..stride {
                    for c in img.pixel(i * stride + dy, j * stride + dx) {
                        row[k] = 2.0 * c - 1.0;
                        k += 1;
                    }
                }
            }
            let u = (j as f64 + 0.5) / gw as f64;
            let v = (i as f64 + 0.5) / gh as f64;
            position_features(u, v, &mut row[k..]);
        }
    }
    out
}

pub fn position_features(u: f64, v: f64, out: &mut [f64]) {
    out[0] = u;
    out[1] = v;
    let mut k = 2;
    for f in 1..=POS_FREQS {
        let w = std::f64::consts::PI * f as f64;
        out[k] = (w * u).sin();
        out[k + 1] = (w * u).cos();
        out[k + 2] = (w * v).sin();
        out[k + 3] = (w * v).cos();
        k += 4;
    }
}

/// Runs the encoder on the tape. The image is a constant.
pub fn encode_var(tape: &mut Tape, params: &Params, cfg: &EncoderConfig, img: &ImageTensor) -> Result<(Var, usize, usize)> {
    cfg.validate()?;
    let (gh, gw) = check_resolution(cfg, img)?;
    let p = cfg.kind.prefix();
    let patches = tape.constant(patchify(img, cfg.patch_stride));
    let w = tape.param(params, &format!("{p}.patch_w"));
    let b = tape.param(params, &format!("{p}.patch_b"));
    let mut x = tape.linear(patches, w, b);
    for i in 0..cfg.depth {
        let g = tape.param(params, &format!("{p}.blk{i}.ln_g"));
        let bb = tape.param(params, &format!("{p}.blk{i}.ln_b"));
        let h = tape.layer_norm(x, g, bb);
        let w1 = tape.param(params, &format!("{p}.blk{i}.fc1_w"));
        let b1 = tape.param(params, &format!("{p}.blk{i}.fc1_b"));
        let h = tape.linear(h, w1, b1);
        let h = tape.gelu(h);
        let w2 = tape.param(params, &format!("{p}.blk{i}.fc2_w"));
        let b2 = tape.param(params, &format!("{p}.blk{i}.fc2_b"));
        let h = tape.linear(h, w2, b2);
        x = tape.add(x, h);
    }
    Ok((x, gh, gw))
}

/// Pure forward pass to a [`FeatureMap`] whose extent is the image's own pixel size.
pub fn encode(params: &Params, cfg: &EncoderConfig, img: &ImageTensor) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let (x, gh, gw) = encode_var(&mut tape, params, cfg, img)?;
    FeatureMap::new(gh, gw, img.height() as f64, img.width() as f64, tape.value(x).clone(), cfg.kind.level())
}

pub fn encode_low(params: &Params, cfg: &EncoderConfig, img: &ImageTensor) -> Result<FeatureMap> {
    debug_assert_eq!(cfg.kind, EncoderKind::Low);
    encode(params, cfg, img)
}

pub fn encode_high(params: &Params, cfg: &EncoderConfig, img: &ImageTensor) -> Result<FeatureMap> {
    debug_assert_eq!(cfg.kind, EncoderKind::High);
    encode(params, cfg, img)
}

pub fn encode_grounding(params: &Params, cfg: &EncoderConfig, img: &ImageTensor) -> Result<FeatureMap> {
    debug_assert_eq!(cfg.kind, EncoderKind::Grounding);
    encode(params, cfg, img)
}
