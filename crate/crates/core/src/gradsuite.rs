//! Named finite-difference checks over the differentiable building blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, BoundingBox, GridGeometry};
use crate::gradcheck::{check_gradients, GradCheckReport};
use crate::losses::{bce_var, dice_var, DICE_SMOOTH};
use crate::mgfe::{project_tokens_var, reweight_var, route_var, PROJ};
use crate::mgvf::{attend, run_vision_flow_var, AttentionVars, AttentionWeights, FlowConfig, FlowInputs, FlowVars, ProposalSet, ProposalSource};
use crate::params::Params;
use crate::pixel_decoder::{decode_var, DecoderConfig, SEG_PROJ_B, UP_W};
use crate::tensor::Matrix;
use crate::types::Granularity;

pub const MODULES: [&str; 8] = ["cross_attention", "run_vision_flow", "project_tokens", "route", "reweight", "decode", "bce", "dice"];

/// Default pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCase {
    pub module: String,
    /// Sub-case, e.g. the routing branch.
    pub case: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

impl GradCase {
    pub fn passes(&self) -> bool {
        self.report.passes(TOLERANCE)
    }
}

const C: usize = 4;

fn attn_inputs(rng: &mut ChaCha8Rng) -> Vec<Matrix> {
    let w = AttentionWeights::random(C, 2, rng);
    vec![w.wq, w.wk, w.wv, w.wo]
}

fn attn_vars(v: &[Var]) -> AttentionVars {
    AttentionVars { wq: v[0], wk: v[1], wv: v[2], wo: v[3], heads: 2 }
}

fn boxes(v: &[[f64; 4]], level: Granularity) -> ProposalSet {
    let b = v.iter().map(|a| BoundingBox::pixel(a[0], a[1], a[2], a[3]).expect("valid box")).collect();
    ProposalSet::new(b, level, ProposalSource::GroundTruth).expect("non-degenerate")
}

fn flow_vars(v: &[Var]) -> FlowVars {
    FlowVars { f_l: v[0], f_o_enh: v[1], f_p_enh: v[2] }
}

/// Runs every check of `module` at `seed`.
pub fn run(module: &str, seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case = |name: &str, report: GradCheckReport| GradCase { module: module.into(), case: name.into(), seed, report };
    let cases = match module {
        "cross_attention" => {
            let mut inputs = vec![Matrix::randn(3, C, 1.0, &mut rng), Matrix::randn(5, C, 1.0, &mut rng)];
            inputs.extend(attn_inputs(&mut rng));
            vec![case("", check_gradients(&inputs, |t, v| attend(t, v[0], v[1], &attn_vars(&v[2..])).expect("shapes").0))]
        }
        "run_vision_flow" => {
            let grid = GridGeometry { grid_h: 4, grid_w: 4, extent_h: 16.0, extent_w: 16.0 };
            let objects = boxes(&[[0.0, 0.0, 9.0, 10.0], [6.0, 5.0, 16.0, 16.0]], Granularity::Object);
            let parts = boxes(&[[1.0, 1.0, 5.0, 4.0], [7.0, 8.0, 12.0, 15.0], [2.0, 6.0, 8.0, 9.5]], Granularity::Part);
            let mut inputs = vec![Matrix::randn(4, C, 1.0, &mut rng), Matrix::randn(16, C, 1.0, &mut rng)];
            inputs.extend(attn_inputs(&mut rng));
            inputs.extend(attn_inputs(&mut rng));
            let cfg = FlowConfig { heads: 2, ..FlowConfig::default() };
            let report = check_gradients(&inputs, |t, v| {
                let fi = FlowInputs { f_l: v[0], f_h: v[1], high_grid: grid, objects: &objects, parts: &parts };
                let out = run_vision_flow_var(t, &fi, &attn_vars(&v[2..6]), &attn_vars(&v[6..10]), &cfg).expect("flow");
                t.concat_rows(&[out.f_o_enh, out.f_p_enh])
            });
            vec![case("", report)]
        }
        "project_tokens" => {
            let mut params = Params::new();
            params.init_weight(&format!("{PROJ}.w"), C, 6, &mut rng);
            params.insert(format!("{PROJ}.b"), Matrix::randn(1, 6, 0.5, &mut rng));
            let inputs = [Matrix::randn(4, C, 1.0, &mut rng), Matrix::randn(2, C, 1.0, &mut rng), Matrix::randn(3, C, 1.0, &mut rng)];
            vec![case("", check_gradients(&inputs, |t, v| {
                let f = flow_vars(v);
                project_tokens_var(t, &params, &f)
            }))]
        }
        "route" => {
            let inputs = [Matrix::randn(4, C, 1.0, &mut rng), Matrix::randn(2, C, 1.0, &mut rng), Matrix::randn(3, C, 1.0, &mut rng)];
            let scale = Matrix::randn(1, C, 1.0, &mut rng);
            (0u8..=1)
                .map(|g| {
                    let r = check_gradients(&inputs, |t, v| {
                        let f = flow_vars(v);
                        let sel = route_var(t, g, &f).expect("g in {0,1}");
                        let s = t.constant(scale.clone());
                        let y = t.mul_row(sel, s);
                        t.tanh(y)
                    });
                    case(if g == 0 { "object" } else { "part" }, r)
                })
                .collect()
        }
        "reweight" => {
            let mut inputs = vec![Matrix::randn(6, C, 1.0, &mut rng), Matrix::randn(3, C, 1.0, &mut rng)];
            inputs.extend(attn_inputs(&mut rng));
            vec![case("", check_gradients(&inputs, |t, v| reweight_var(t, v[0], v[1], &attn_vars(&v[2..]), true).expect("shapes")))]
        }
        "decode" => {
            let cfg = DecoderConfig { upsample_factor: 4, channels: C, seg_dim: 5 };
            let mut params = Params::new();
            cfg.init_params(&mut params, &mut rng);
            params.insert(UP_W, Matrix::randn(1, 16, 1.0, &mut rng));
            params.insert(SEG_PROJ_B, Matrix::randn(1, C, 0.3, &mut rng));
            let inputs = [Matrix::randn(6, C, 1.0, &mut rng), Matrix::randn(1, 5, 1.0, &mut rng)];
            vec![case("", check_gradients(&inputs, |t, v| decode_var(t, &params, &cfg, v[0], 3, 2, v[1]).expect("shapes")))]
        }
        "bce" | "dice" => {
            let (h, w) = (rng.gen_range(2..7), rng.gen_range(2..7));
            let pred = Matrix::uniform(h, w, 0.05, 0.95, &mut rng);
            let gt = BinaryMask::from_bits(h, w, (0..h * w).map(|_| rng.gen_bool(0.5)).collect())?;
            let r = if module == "bce" {
                check_gradients(&[pred], |t, v| bce_var(t, v[0], &gt).expect("shapes"))
            } else {
                check_gradients(&[pred], |t, v| dice_var(t, v[0], &gt, DICE_SMOOTH).expect("shapes"))
            };
            vec![case("", r)]
        }
        other => return Err(Error::InvalidInput(format!("unknown module `{other}`; expected one of {}", MODULES.join(", ")))),
    };
    Ok(cases)
}

/// All modules (or one) over `seeds`.
pub fn run_all(module: Option<&str>, seeds: impl IntoIterator<Item = u64> + Clone) -> Result<Vec<GradCase>> {
    let modules: Vec<&str> = match module {
        Some(m) => vec![m],
        None => MODULES.to_vec(),
    };
    let mut out = Vec::new();
    for m in modules {
        for s in seeds.clone() {
            out.extend(run(m, s)?);
        }
    }
    Ok(out)
}
