//! Central finite-difference verification of analytic gradients.
//!
//! Checks run in `f64`. A non-scalar op output is reduced to a scalar with a
//! fixed random projection `r`, so the quantity compared per input element is
//! `Σ_j r_j ∂out_j/∂x`. The numeric side differences the op outputs
//! elementwise before projecting and divides by the step actually taken, which
//! makes the check exact for linear index ops such as identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Graph, Tensor, TensorError, Var};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Floor on the relative-error denominator.
pub const DENOM_FLOOR: f64 = 1e-8;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if !analytic.is_finite() || !numeric.is_finite() {
        return f64::INFINITY;
    }
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(DENOM_FLOOR)
}

/// Max relative error of every input's analytic gradient against central
/// differences. Errors inside `op` count as `+inf`.
pub fn grad_check<F>(op: F, inputs: &[Tensor<f64>], seed: u64) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    grad_check_report(op, inputs, seed).max_error
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_error: f64,
    /// `(input index, flat element)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

pub fn grad_check_report<F>(op: F, inputs: &[Tensor<f64>], seed: u64) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let failed = GradCheckReport {
        max_error: f64::INFINITY,
        worst: None,
        checked: 0,
    };
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let Ok(out) = op(&mut g, &vars) else {
        return failed;
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj: Vec<f64> = (0..g.value(out).numel())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let out_shape = g.shape(out).to_vec();
    let Ok(analytic) = (|| {
        let r = g.constant(Tensor::new(out_shape.clone(), proj.clone())?);
        let weighted = g.mul(out, r)?;
        let loss = g.sum(weighted)?;
        g.backward(loss)?;
        Ok::<_, TensorError>(vars.iter().map(|&v| g.grad_tensor(v)).collect::<Vec<_>>())
    })() else {
        return failed;
    };

    let eval = |perturbed: &[Tensor<f64>]| -> Option<Vec<f64>> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = op(&mut g, &vars).ok()?;
        Some(g.data(out).to_vec())
    };

    let mut report = GradCheckReport {
        max_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let x = input.data()[e];
            let (xp, xm) = (x + STEP, x - STEP);
            work[ti].data_mut()[e] = xp;
            let plus = eval(&work);
            work[ti].data_mut()[e] = xm;
            let minus = eval(&work);
            work[ti].data_mut()[e] = x;
            let err = match (plus, minus) {
                (Some(p), Some(m)) if p.len() == proj.len() && m.len() == proj.len() => {
                    let step = xp - xm;
                    let mut acc = 0.0;
                    for j in 0..proj.len() {
                        acc += proj[j] * ((p[j] - m[j]) / step);
                    }
                    relative_error(analytic[ti].data()[e], acc)
                }
                _ => f64::INFINITY,
            };
            report.checked += 1;
            if err > report.max_error || (err.is_infinite() && report.worst.is_none()) {
                report.max_error = err;
                report.worst = Some((ti, e));
            }
        }
    }
    report
}

type CaseFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>>;

/// One op under test: its inputs and the closure that applies it.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub op: CaseFn,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let t = normal(rng, shape);
    let data = t.data().iter().map(|v| v.abs() + 0.5).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let mut t = normal(rng, &[rows, cols]);
    for r in 0..rows {
        let row = &mut t.data_mut()[r * cols..(r + 1) * cols];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// The full op inventory with random inputs drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    use super::{AttentionOpts, Mode, NORM_EPS};

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut cases: Vec<OpCase> = Vec::new();
    let mut case = |name: &'static str, inputs: Vec<Tensor<f64>>, op: CaseFn| {
        cases.push(OpCase { name, inputs, op });
    };
    let r = &mut rng;

    case("identity", vec![normal(r, &[3, 4])], Box::new(|g, v| g.identity(v[0])));
    case(
        "matmul",
        vec![normal(r, &[3, 4]), normal(r, &[4, 2])],
        Box::new(|g, v| g.matmul(v[0], v[1])),
    );
    case("transpose", vec![normal(r, &[3, 5])], Box::new(|g, v| g.transpose(v[0])));
    case("reshape", vec![normal(r, &[2, 6])], Box::new(|g, v| g.reshape(v[0], &[3, 4])));
    case(
        "add",
        vec![normal(r, &[2, 3]), normal(r, &[2, 3])],
        Box::new(|g, v| g.add(v[0], v[1])),
    );
    case(
        "add_broadcast",
        vec![normal(r, &[2, 3, 4]), normal(r, &[4])],
        Box::new(|g, v| g.add(v[0], v[1])),
    );
    case(
        "mul",
        vec![normal(r, &[2, 3]), normal(r, &[2, 3])],
        Box::new(|g, v| g.mul(v[0], v[1])),
    );
    case(
        "mul_scalar_broadcast",
        vec![normal(r, &[3, 3]), normal(r, &[1])],
        Box::new(|g, v| g.mul(v[0], v[1])),
    );
    case("scale", vec![normal(r, &[5])], Box::new(|g, v| g.scale(v[0], -1.7)));
    case("add_scalar", vec![normal(r, &[5])], Box::new(|g, v| g.add_scalar(v[0], 0.3)));
    case("exp", vec![normal(r, &[6])], Box::new(|g, v| g.exp(v[0])));
    case("log", vec![positive(r, &[6])], Box::new(|g, v| g.log(v[0])));
    case("neg", vec![normal(r, &[6])], Box::new(|g, v| g.neg(v[0])));
    case("gelu", vec![normal(r, &[8])], Box::new(|g, v| g.gelu(v[0])));
    case("sigmoid", vec![normal(r, &[8])], Box::new(|g, v| g.sigmoid(v[0])));
    case("log_sigmoid", vec![normal(r, &[8])], Box::new(|g, v| g.log_sigmoid(v[0])));
    case("softmax", vec![normal(r, &[3, 5])], Box::new(|g, v| g.softmax(v[0])));
    case(
        "layer_norm",
        vec![normal(r, &[3, 6]), normal(r, &[6]), normal(r, &[6])],
        Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
    );
    case(
        "batch_norm_apply",
        vec![
            normal(r, &[2, 3, 2, 2]),
            normal(r, &[3]),
            positive(r, &[3]),
            normal(r, &[3]),
            normal(r, &[3]),
        ],
        Box::new(|g, v| g.batch_norm_apply(v[0], v[1], v[2], v[3], v[4], NORM_EPS)),
    );
    case(
        "batch_norm_train",
        vec![normal(r, &[3, 2, 2, 2]), normal(r, &[2]), normal(r, &[2])],
        Box::new(|g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], NORM_EPS)?.out)),
    );
    case(
        "conv2d_stride1",
        vec![normal(r, &[1, 3, 8, 8]), normal(r, &[4, 3, 3, 3])],
        Box::new(|g, v| g.conv2d(v[0], v[1], 1)),
    );
    case(
        "conv2d_stride2",
        vec![normal(r, &[2, 2, 5, 6]), normal(r, &[3, 2, 3, 3])],
        Box::new(|g, v| g.conv2d(v[0], v[1], 2)),
    );
    case(
        "global_avg_pool",
        vec![normal(r, &[2, 3, 2, 3])],
        Box::new(|g, v| g.global_avg_pool(v[0])),
    );
    case(
        "embedding",
        vec![normal(r, &[5, 3])],
        Box::new(|g, v| g.embedding(v[0], &[4, 0, 4, 2])),
    );
    case(
        "attention_causal_masked",
        vec![normal(r, &[2, 4, 6]), normal(r, &[2, 4, 6]), normal(r, &[2, 4, 6])],
        Box::new(|g, v| {
            let opts = AttentionOpts {
                heads: 2,
                causal: true,
                key_lengths: Some(vec![4, 3]),
                order_invariant: false,
            };
            g.attention(v[0], v[1], v[2], &opts)
        }),
    );
    case(
        "attention_set",
        vec![normal(r, &[1, 5, 4]), normal(r, &[1, 5, 4]), normal(r, &[1, 5, 4])],
        Box::new(|g, v| {
            let opts = AttentionOpts {
                heads: 2,
                causal: false,
                key_lengths: None,
                order_invariant: true,
            };
            g.attention(v[0], v[1], v[2], &opts)
        }),
    );
    case("mean_rows", vec![normal(r, &[4, 3])], Box::new(|g, v| g.mean_rows(v[0])));
    case(
        "select_rows",
        vec![normal(r, &[4, 3])],
        Box::new(|g, v| g.select_rows(v[0], &[3, 1, 1])),
    );
    case("l2_normalize", vec![normal(r, &[3, 4])], Box::new(|g, v| g.l2_normalize(v[0])));
    case("sum", vec![normal(r, &[2, 3])], Box::new(|g, v| g.sum(v[0])));
    case("mean", vec![normal(r, &[2, 3])], Box::new(|g, v| g.mean(v[0])));
    case("slice", vec![normal(r, &[7])], Box::new(|g, v| g.slice(v[0], 2, 3)));
    let mask_seed = seed;
    case(
        "dropout",
        vec![normal(r, &[10])],
        Box::new(move |g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
            g.dropout(v[0], 0.3, Mode::Train, &mut rng)
        }),
    );
    case(
        "cross_entropy",
        vec![normal(r, &[3, 4])],
        Box::new(|g, v| g.cross_entropy(v[0], &[1, 3, 0])),
    );
    case("pairwise_sign", vec![normal(r, &[3, 3])], Box::new(|g, v| g.pairwise_sign(v[0])));
    case(
        "siglip_chunked",
        vec![
            unit_rows(r, 5, 3),
            unit_rows(r, 5, 3),
            positive(r, &[1]),
            normal(r, &[1]),
        ],
        Box::new(|g, v| g.siglip_chunked(v[0], v[1], v[2], v[3], 2)),
    );
    cases
}

/// Runs every op case and returns `(name, max relative error)`.
pub fn op_suite(seed: u64) -> Vec<(&'static str, f64)> {
    op_cases(seed)
        .into_iter()
        .map(|c| (c.name, grad_check(&c.op, &c.inputs, seed)))
        .collect()
}
