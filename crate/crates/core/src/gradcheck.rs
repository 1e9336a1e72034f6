//! Central finite-difference checks of the reverse-mode gradients.
//!
//! Each check draws inputs from a seed, reduces the op output to a scalar
//! with a fixed random projection, and compares the backward pass against
//! `(f(x + h) - f(x - h)) / 2h` for every input element. Inputs of
//! non-smooth ops are drawn away from their kinks so the difference quotient
//! is well defined.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{assign, training_loss, AssignmentError, LossWeights};
use crate::composition::{attention, make_prior, ActivationMap, CompositionError};
use crate::decoder::{forward_graph, read_predictions, ModelConfig, ModelInput, ModelState};
use crate::geometry::{giou_columns, l1_sum, BoxColumns, CropBox, ScoredCrop};
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so that two gradients that are
/// both essentially zero compare as equal.
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum GradcheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Assignment(#[from] AssignmentError),
    #[error(transparent)]
    Composition(#[from] CompositionError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            floor: DEFAULT_FLOOR,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    /// Number of scalar inputs compared.
    pub elements: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    /// Worst relative error per check name, in first-seen order.
    pub fn worst_by_name(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for r in &self.results {
            match out.iter_mut().find(|(n, _)| *n == r.name) {
                Some((_, e)) => *e = e.max(r.max_rel_error),
                None => out.push((r.name.clone(), r.max_rel_error)),
            }
        }
        out
    }

    pub fn max_rel_error(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

type OpFn = dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>;

/// Compares analytic and numeric gradients of `f` with respect to every
/// element of every tensor in `inputs`.
pub fn check_fn(
    name: &str,
    seed: u64,
    inputs: &[Tensor],
    f: &OpFn,
    cfg: &GradcheckConfig,
) -> Result<CheckResult, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let projection = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let n = g.value(out).numel();
        Tensor::new(g.dims(out).to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?
    };
    let reduce = |g: &mut Graph, out: Var| -> Result<Var, TensorError> {
        let p = g.constant(projection.clone());
        let y = g.mul(out, p)?;
        g.sum(y)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(&t.clone().requires_grad())).collect();
    let out = f(&mut g, &vars)?;
    let loss = reduce(&mut g, out)?;
    g.backward(loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let l = reduce(&mut g, out)?;
        Ok(g.item(l))
    };

    let mut worst = 0.0f64;
    let mut elements = 0;
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).expect("inputs are trainable").to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + cfg.step;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = x0 - cfg.step;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * cfg.step);
            worst = worst.max(rel_error(a, numeric, cfg.floor));
            elements += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        seed,
        elements,
        max_rel_error: worst,
        passed: worst < cfg.tolerance,
    })
}

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sizes agree")
}

/// Uniform on `[lo, hi]` with a band of half-width `margin` around each kink
/// removed.
fn away(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64, kinks: &[f64], margin: f64) -> Tensor {
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > margin) {
                break v;
            }
        })
        .collect();
    Tensor::new(dims.to_vec(), data).expect("sizes agree")
}

/// `b` offset from `a` by at least `gap` in a random direction, elementwise.
fn separated(rng: &mut ChaCha8Rng, a: &Tensor, gap: f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .map(|&v| {
            let d = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) { v + d } else { v - d }
        })
        .collect();
    Tensor::new(a.dims().to_vec(), data).expect("sizes agree")
}

/// Valid center-format boxes, `[n×4]`, kept inside the unit square.
fn boxes(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut data = Vec::with_capacity(4 * n);
    for _ in 0..n {
        let w = rng.random_range(0.1..0.6);
        let h = rng.random_range(0.1..0.6);
        data.extend([
            rng.random_range(w / 2.0..1.0 - w / 2.0),
            rng.random_range(h / 2.0..1.0 - h / 2.0),
            w,
            h,
        ]);
    }
    Tensor::new(vec![n, 4], data).expect("sizes agree")
}

/// Inputs and closure for one op check.
struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    f: Box<OpFn>,
}

fn case(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var, TensorError> + 'static) -> OpCase {
    OpCase {
        name,
        inputs,
        f: Box::new(f),
    }
}

fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let a34 = uniform(r, &[3, 4], -1.0, 1.0);
    let b34 = uniform(r, &[3, 4], -1.0, 1.0);
    let sep = separated(r, &a34, 0.05);
    let mut cases = vec![
        case("matmul", vec![a34.clone(), uniform(r, &[4, 2], -1.0, 1.0)], |g, v| g.matmul(v[0], v[1])),
        case("transpose", vec![a34.clone()], |g, v| g.transpose(v[0])),
        case("add", vec![a34.clone(), b34.clone()], |g, v| g.add(v[0], v[1])),
        case("add_broadcast", vec![a34.clone(), uniform(r, &[1], -1.0, 1.0)], |g, v| g.add(v[0], v[1])),
        case("sub", vec![a34.clone(), b34.clone()], |g, v| g.sub(v[0], v[1])),
        case("mul", vec![a34.clone(), b34.clone()], |g, v| g.mul(v[0], v[1])),
        case("mul_broadcast", vec![uniform(r, &[1], -1.0, 1.0), a34.clone()], |g, v| g.mul(v[0], v[1])),
        case("div", vec![a34.clone(), away(r, &[3, 4], -2.0, 2.0, &[0.0], 0.5)], |g, v| g.div(v[0], v[1])),
        case("minimum", vec![a34.clone(), sep.clone()], |g, v| g.minimum(v[0], v[1])),
        case("maximum", vec![a34.clone(), sep], |g, v| g.maximum(v[0], v[1])),
        case("add_row", vec![a34.clone(), uniform(r, &[4], -1.0, 1.0)], |g, v| g.add_row(v[0], v[1])),
        case("scale", vec![a34.clone()], |g, v| g.scale(v[0], -1.7)),
        case("add_scalar", vec![a34.clone()], |g, v| g.add_scalar(v[0], 0.3)),
        case("neg", vec![a34.clone()], |g, v| g.neg(v[0])),
        case("relu", vec![away(r, &[3, 4], -1.0, 1.0, &[0.0], 0.01)], |g, v| g.relu(v[0])),
        case("sigmoid", vec![uniform(r, &[3, 4], -4.0, 4.0)], |g, v| g.sigmoid(v[0])),
        case("log", vec![uniform(r, &[3, 4], 0.2, 3.0)], |g, v| g.log(v[0])),
        case("exp", vec![uniform(r, &[3, 4], -2.0, 2.0)], |g, v| g.exp(v[0])),
        case("abs", vec![away(r, &[3, 4], -1.0, 1.0, &[0.0], 0.01)], |g, v| g.abs(v[0])),
        case("pow_abs", vec![away(r, &[3, 4], -1.5, 1.5, &[0.0], 0.05)], |g, v| g.pow_abs(v[0], 2.5)),
        case("clamp", vec![away(r, &[3, 4], -1.0, 1.0, &[-0.5, 0.5], 0.01)], |g, v| g.clamp(v[0], -0.5, 0.5)),
        case("softmax_rows", vec![uniform(r, &[3, 5], -3.0, 3.0)], |g, v| g.softmax_rows(v[0])),
        case(
            "layer_norm",
            vec![
                uniform(r, &[3, 5], -2.0, 2.0),
                uniform(r, &[5], 0.5, 1.5),
                uniform(r, &[5], -0.5, 0.5),
            ],
            |g, v| g.layer_norm(v[0], v[1], v[2]),
        ),
        case("sum", vec![a34.clone()], |g, v| g.sum(v[0])),
        case("mean", vec![a34.clone()], |g, v| g.mean(v[0])),
        case("slice_cols", vec![a34.clone()], |g, v| g.slice_cols(v[0], 1, 2)),
        case("concat_cols", vec![a34.clone(), uniform(r, &[3, 2], -1.0, 1.0)], |g, v| g.concat_cols(&[v[0], v[1], v[0]])),
        case("gather_rows", vec![a34.clone()], |g, v| g.gather_rows(v[0], &[2, 0, 2])),
        case("reshape", vec![a34.clone()], |g, v| g.reshape(v[0], vec![2, 6])),
        case("column", vec![a34], |g, v| g.column(v[0], 3)),
        case(
            "attention",
            vec![
                uniform(r, &[3, 4], -1.0, 1.0),
                uniform(r, &[5, 4], -1.0, 1.0),
                uniform(r, &[5, 4], -1.0, 1.0),
                uniform(r, &[5], -3.0, 0.0),
            ],
            |g, v| Ok(attention(g, v[0], v[1], v[2], Some(v[3]))?.0),
        ),
    ];
    let (pa, pb) = (boxes(r, 4), boxes(r, 4));
    cases.push(case("giou", vec![pa.clone(), pb.clone()], |g, v| {
        let a = BoxColumns::split(g, v[0])?;
        let b = BoxColumns::split(g, v[1])?;
        giou_columns(g, &a, &b)
    }));
    // l1 kinks where coordinates coincide; independent draws avoid them
    cases.push(case("l1", vec![pa, pb], |g, v| l1_sum(g, v[0], v[1])));
    let targets: Vec<f64> = (0..4).map(|_| r.random_range(0.0..1.0)).collect();
    cases.push(case("focal", vec![uniform(r, &[4], 0.05, 0.95)], move |g, v| {
        crate::assignment::focal_graph(g, v[0], &targets, 2.0)
    }));
    cases
}

/// Names of the per-op checks, in the order they run.
pub fn op_names() -> Vec<&'static str> {
    op_cases(0).into_iter().map(|c| c.name).collect()
}

pub fn check_ops(seed: u64, cfg: &GradcheckConfig) -> Result<Vec<CheckResult>, TensorError> {
    op_cases(seed)
        .into_iter()
        .map(|c| check_fn(c.name, seed, &c.inputs, c.f.as_ref(), cfg))
        .collect()
}

/// A decoder small enough for exhaustive differencing: 1×4×4 image on a 2×2
/// grid, 3 queries, one layer of width 4 with two heads.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        n_queries: 3,
        n_layers: 1,
        model_dim: 4,
        n_heads: 2,
        ffn_dim: 4,
        grid_h: 2,
        grid_w: 2,
        image_channels: 1,
        image_h: 4,
        image_w: 4,
        ..ModelConfig::desk()
    }
}

/// Gradient of the full training loss with respect to every model parameter.
/// The assignment is computed once at the unperturbed parameters and held
/// fixed, since matching is piecewise constant.
pub fn check_training_loss(seed: u64, cfg: &GradcheckConfig) -> Result<CheckResult, GradcheckError> {
    let mcfg = toy_model_config();
    let mut state = ModelState::init(mcfg.clone(), seed).map_err(AssignmentError::from)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x7f4a_7c15));
    // Zero biases put a dead ReLU row exactly on the next layer's kink, so
    // the check runs at a jittered point instead of the raw init.
    for t in state.params_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    let image = uniform(&mut rng, &[1, 4, 4], 0.0, 1.0);
    let cam = ActivationMap::normalized(2, 2, (0..4).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let prior = make_prior(&cam, mcfg.epsilon_b);
    let gts: Vec<ScoredCrop> = boxes(&mut rng, 4)
        .data()
        .chunks(4)
        .enumerate()
        .map(|(i, b)| {
            let mos = if i < 2 { rng.random_range(4.0..5.0) } else { rng.random_range(1.0..4.0) };
            ScoredCrop::new(CropBox::new(b[0], b[1], b[2], b[3]).expect("valid box"), mos).expect("valid mos")
        })
        .collect();
    let w = LossWeights::default();

    let loss_at = |state: &ModelState, a: Option<&crate::assignment::Assignment>| -> Result<(Graph, Var, crate::assignment::Assignment), GradcheckError> {
        let mut g = Graph::new();
        let f = forward_graph(&mut g, state, ModelInput::Image(&image), Some(&prior)).map_err(AssignmentError::from)?;
        let assignment = match a {
            Some(a) => a.clone(),
            None => assign(&read_predictions(&g, f.boxes, f.scores), &gts, &w)?,
        };
        let l = training_loss(&mut g, f.boxes, f.scores, &assignment, &gts, &w)?;
        Ok((g, l, assignment))
    };

    let (mut g, loss, assignment) = loss_at(&state, None)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = {
        let mut per = vec![Vec::new(); state.params().len()];
        for (id, grad) in g.param_grads() {
            per[id.index()] = grad.to_vec();
        }
        per
    };

    let mut worst = 0.0f64;
    let mut elements = 0;
    for (p, grads) in analytic.iter().enumerate() {
        let n = state.params().tensors()[p].numel();
        for j in 0..n {
            let a = grads.get(j).copied().unwrap_or(0.0);
            let x0 = state.params().tensors()[p].data()[j];
            state.params_mut().tensors_mut()[p].data_mut()[j] = x0 + cfg.step;
            let (g, l, _) = loss_at(&state, Some(&assignment))?;
            let up = g.item(l);
            state.params_mut().tensors_mut()[p].data_mut()[j] = x0 - cfg.step;
            let (g, l, _) = loss_at(&state, Some(&assignment))?;
            let down = g.item(l);
            state.params_mut().tensors_mut()[p].data_mut()[j] = x0;
            worst = worst.max(rel_error(a, (up - down) / (2.0 * cfg.step), cfg.floor));
            elements += 1;
        }
    }
    Ok(CheckResult {
        name: "training_loss".into(),
        seed,
        elements,
        max_rel_error: worst,
        passed: worst < cfg.tolerance,
    })
}

/// Every op check and the training-loss check for each seed.
pub fn run(seeds: impl IntoIterator<Item = u64>, cfg: &GradcheckConfig) -> Result<GradcheckReport, GradcheckError> {
    let mut results = Vec::new();
    for seed in seeds {
        results.extend(check_ops(seed, cfg)?);
        results.push(check_training_loss(seed, cfg)?);
    }
    Ok(GradcheckReport { config: *cfg, results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_model_is_small() {
        let s = ModelState::init(toy_model_config(), 0).unwrap();
        assert!(s.params().scalar_count() <= 500, "{}", s.params().scalar_count());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // x · stop_grad(x) reports half the true derivative of x²
        let x = uniform(&mut ChaCha8Rng::seed_from_u64(3), &[2, 2], -1.0, 1.0);
        let honest = check_fn("square", 0, std::slice::from_ref(&x), &|g, v| g.mul(v[0], v[0]), &GradcheckConfig::default()).unwrap();
        assert!(honest.passed);
        let broken = check_fn(
            "square_half",
            0,
            &[x],
            &|g, v| {
                let d = g.constant(g.value(v[0]).detached());
                g.mul(v[0], d)
            },
            &GradcheckConfig::default(),
        )
        .unwrap();
        assert!(!broken.passed);
    }

    #[test]
    fn all_checks_pass_on_a_few_seeds() {
        let report = run(0..3, &GradcheckConfig::default()).unwrap();
        for r in &report.results {
            assert!(r.passed, "{} seed {}: {:e}", r.name, r.seed, r.max_rel_error);
        }
        assert_eq!(report.results.len(), 3 * (op_names().len() + 1));
    }
}
