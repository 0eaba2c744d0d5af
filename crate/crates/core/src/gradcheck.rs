//! Analytic-vs-finite-difference gradient verification.
//!
//! Each check builds a scalar loss on a fresh [`Graph`]. After `backward`, every
//! coordinate of every tracked input is compared against central differences
//! of the same loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dfc::{FeatureMatrices, Label};
use crate::error::Result;
use crate::model::{model_forward, FeatureDims, Model, ModelConfig, ModelParams, Variant};
use crate::numerics::{finite_diff_grad, relative_error, Graph, Tensor, Var, FD_STEP};
use crate::objective::{total_loss_graph, LossWeights, WeightMode, WeightVars};
use crate::seed::mix;

/// Pass threshold on the relative error.
pub const MAX_RELATIVE_ERROR: f64 = 1e-5;

/// Denominator floor of the relative error. Central differences at h = 1e-5
/// carry roughly 1e-11 of absolute roundoff on an O(1) loss, so smaller
/// gradient entries are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupReport {
    pub group: String,
    pub coordinates: usize,
    pub worst_relative_error: f64,
    pub worst_coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GroupReport {
    pub fn passed(&self) -> bool {
        self.worst_relative_error < MAX_RELATIVE_ERROR
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub threshold: f64,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(GroupReport::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupReport> {
        self.groups.iter().filter(|g| !g.passed())
    }
}

/// Optional fault injection: perturbs the analytic gradient of the named group.
#[derive(Clone, Debug, Default)]
pub struct Corruption {
    pub group: Option<String>,
}

pub fn compare(group: impl Into<String>, analytic: &[f64], numeric: &[f64]) -> GroupReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut report = GroupReport {
        group: group.into(),
        coordinates: analytic.len(),
        worst_relative_error: 0.0,
        worst_coordinate: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(a, n, RELATIVE_ERROR_FLOOR);
        if e > report.worst_relative_error {
            report.worst_relative_error = e;
            report.worst_coordinate = i;
            report.analytic = a;
            report.numeric = n;
        }
    }
    report
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let values = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, values).expect("shape")
}

/// Checks a loss built from `inputs` by `build`, for every input.
fn check_op<F>(name: &str, inputs: &[Tensor], build: F, corrupt: &Corruption) -> Result<Vec<GroupReport>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect::<Result<_>>()?;
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;

    let mut reports = Vec::new();
    for (idx, (&v, t)) in vars.iter().zip(inputs).enumerate() {
        let group = format!("{name}[{idx}]");
        let mut analytic = g.grad_or_zero(v).into_values();
        if corrupt.group.as_deref() == Some(group.as_str()) {
            analytic[0] = analytic[0] * 1.01 + 1e-3;
        }
        let eval = |theta: &[f64]| -> f64 {
            let mut h = Graph::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, x)| {
                    let value = if j == idx { Tensor::from_vec(t.rows(), t.cols(), theta.to_vec()).expect("shape") } else { x.clone() };
                    h.constant(value).expect("finite input")
                })
                .collect();
            let l = build(&mut h, &vs).expect("loss evaluates at perturbed point");
            h.value(l).values()[0]
        };
        let numeric = finite_diff_grad(eval, t.values(), FD_STEP);
        reports.push(compare(group, &analytic, &numeric));
    }
    Ok(reports)
}

/// Weighted sum `Σ w ⊙ y` so every output coordinate gets a distinct adjoint.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random_tensor(&mut rng, r, c))?;
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

/// Gradient checks for every primitive on the tape.
pub fn check_primitives(seed: u64, corrupt: &Corruption) -> Result<Vec<GroupReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 1));
    let mut r = |rows, cols| random_tensor(&mut rng, rows, cols);
    let ps = mix(seed, 2);
    let mut out = Vec::new();
    out.extend(check_op("matmul", &[r(3, 4), r(4, 2)], |g, v| { let y = g.matmul(v[0], v[1])?; probe(g, y, ps) }, corrupt)?);
    out.extend(check_op("transpose", &[r(3, 2)], |g, v| { let y = g.transpose(v[0])?; probe(g, y, ps) }, corrupt)?);
    out.extend(check_op("add_row", &[r(3, 4), r(1, 4)], |g, v| { let y = g.add_row(v[0], v[1])?; probe(g, y, ps) }, corrupt)?);
    out.extend(check_op("mul", &[r(2, 3), r(2, 3)], |g, v| { let y = g.mul(v[0], v[1])?; probe(g, y, ps) }, corrupt)?);
    out.extend(check_op("relu", &[r(3, 3)], |g, v| { let y = g.relu(v[0])?; probe(g, y, ps) }, corrupt)?);
    out.extend(check_op("tanh", &[r(3, 3)], |g, v| { let y = g.tanh(v[0])?; probe(g, y, ps) }, corrupt)?);
    out.extend(check_op("softplus", &[r(2, 3)], |g, v| { let y = g.softplus(v[0])?; probe(g, y, ps) }, corrupt)?);
    out.extend(check_op("softmax_rows", &[r(3, 5)], |g, v| { let y = g.softmax_rows(v[0], 1.7)?; probe(g, y, ps) }, corrupt)?);
    out.extend(check_op(
        "layer_norm",
        &[r(3, 5), r(1, 5), r(1, 5)],
        |g, v| { let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?; probe(g, y, ps) },
        corrupt,
    )?);
    out.extend(check_op(
        "conv1d",
        &[r(7, 3), r(3 * 3, 2), r(1, 2)],
        |g, v| { let y = g.conv1d(v[0], v[1], v[2], 3, 2)?; probe(g, y, ps) },
        corrupt,
    )?);
    out.extend(check_op(
        "slice_concat",
        &[r(3, 4), r(3, 2)],
        |g, v| {
            let a = g.slice_cols(v[0], 1, 2)?;
            let c = g.concat_cols(&[a, v[1]])?;
            let d = g.concat_rows(&[c, c])?;
            probe(g, d, ps)
        },
        corrupt,
    )?);
    out.extend(check_op("row_l2_normalize", &[r(3, 4)], |g, v| { let y = g.row_l2_normalize(v[0])?; probe(g, y, ps) }, corrupt)?);
    out.extend(check_op("mean_scale", &[r(2, 3)], |g, v| { let y = g.scale(v[0], -2.5)?; g.mean(y) }, corrupt)?);
    Ok(out)
}

/// Gradient of the joint loss with respect to embeddings and logits, in both
/// fixed and learnable weight modes.
pub fn check_objective(seed: u64, corrupt: &Corruption) -> Result<Vec<GroupReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 3));
    let labels = [Label::Nc, Label::Mci, Label::Nc, Label::Mci, Label::Mci];
    let emb = random_tensor(&mut rng, labels.len(), 4);
    let logits = random_tensor(&mut rng, labels.len(), 1).map(|v| 3.0 * v);
    let mut out = check_op(
        "objective.fixed",
        &[emb.clone(), logits.clone()],
        |g, v| Ok(total_loss_graph(g, v[0], v[1], &labels, 0.5, WeightVars::Fixed { alpha: 0.5, beta: 2.0 })?.total),
        corrupt,
    )?;
    let weights = LossWeights { alpha: 0.7, beta: 1.3, mode: WeightMode::Learnable, tau: 0.3 };
    let (ax, by) = weights.raw();
    out.extend(check_op(
        "objective.learnable",
        &[emb, logits, Tensor::scalar(ax), Tensor::scalar(by)],
        |g, v| {
            let w = WeightVars::Learnable { alpha_raw: v[2], beta_raw: v[3] };
            Ok(total_loss_graph(g, v[0], v[1], &labels, weights.tau, w)?.total)
        },
        corrupt,
    )?);
    Ok(out)
}

/// Random batch of dynamic inputs with values in [−1, 1], two of each class.
pub fn random_batch(seed: u64, dims: FeatureDims, size: usize) -> Vec<(FeatureMatrices, Label)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size)
        .map(|i| {
            let temporal = random_tensor(&mut rng, dims.n_windows, dims.n_rois);
            let spatial = temporal.transpose();
            (FeatureMatrices { temporal, spatial }, Label::from_bit(i % 2 == 1))
        })
        .collect()
}

/// Joint loss of a batch, with parameters bound by `bind`.
pub fn batch_loss(
    g: &mut Graph,
    vars: &crate::model::Params<Var>,
    cfg: &ModelConfig,
    batch: &[(FeatureMatrices, Label)],
    weights: &LossWeights,
) -> Result<Var> {
    let mut embeddings = Vec::new();
    let mut logits = Vec::new();
    for (feat, _) in batch {
        let out = model_forward(g, vars, cfg, crate::model::ModelInput::Dynamic(feat))?;
        embeddings.push(out.embedding);
        logits.push(out.logit);
    }
    let labels: Vec<Label> = batch.iter().map(|(_, l)| *l).collect();
    let e = g.concat_rows(&embeddings)?;
    let z = g.concat_rows(&logits)?;
    let w = WeightVars::Fixed { alpha: weights.alpha, beta: weights.beta };
    Ok(total_loss_graph(g, e, z, &labels, weights.tau, w)?.total)
}

/// Every parameter of a randomly initialised (and randomly shifted) model
/// against finite differences of the joint loss.
pub fn check_model(seed: u64, variant: Variant, dims: FeatureDims, corrupt: &Corruption) -> Result<Vec<GroupReport>> {
    let cfg = ModelConfig::default().with_variant(variant);
    let mut model = Model::init(mix(seed, 4), cfg.clone(), dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 5));
    for (_, t) in model.params.named_mut() {
        for v in t.values_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let batch = random_batch(mix(seed, 6), dims, 4);
    let weights = LossWeights::default();

    let mut g = Graph::new();
    let vars = model.bind(&mut g)?;
    let loss = batch_loss(&mut g, &vars, &cfg, &batch, &weights)?;
    g.backward(loss)?;

    let flat = model.params.flatten();
    let mut scratch: ModelParams = model.params.clone();
    let eval = |theta: &[f64]| -> f64 {
        scratch.assign_flat(theta).expect("length");
        let mut h = Graph::new();
        let vs = scratch.try_map(|_, t| h.constant(t.clone())).expect("finite");
        let l = batch_loss(&mut h, &vs, &cfg, &batch, &weights).expect("loss");
        h.value(l).values()[0]
    };
    let numeric = finite_diff_grad(eval, &flat, FD_STEP);

    let mut reports = Vec::new();
    let mut offset = 0;
    for (name, &v) in vars.named() {
        let group = format!("model.{name}");
        let mut analytic = g.grad_or_zero(v).into_values();
        if corrupt.group.as_deref() == Some(group.as_str()) {
            analytic[0] = analytic[0] * 1.01 + 1e-3;
        }
        let n = analytic.len();
        reports.push(compare(group, &analytic, &numeric[offset..offset + n]));
        offset += n;
    }
    Ok(reports)
}

/// Full suite: every primitive and the objective, then the full-variant model on 6 ROIs × 8 windows.
pub fn run(seed: u64, corrupt: &Corruption) -> Result<GradcheckReport> {
    let mut groups = check_primitives(seed, corrupt)?;
    groups.extend(check_objective(seed, corrupt)?);
    groups.extend(check_model(seed, Variant::Full, FeatureDims { n_rois: 6, n_windows: 8 }, corrupt)?);
    Ok(GradcheckReport { seed, threshold: MAX_RELATIVE_ERROR, groups })
}
