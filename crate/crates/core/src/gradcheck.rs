//! Central finite-difference checks of tape gradients.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{multi_head, AttentionMask, AttentionParams, Linear};
use crate::autodiff::{concat, OpKind, Reduction, Tape, Var};
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-5;
/// Tolerance for individual operations.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the end-to-end model check.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

/// Outcome of one gradient comparison.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of scalar `f` with respect to every input against
/// central differences with step `eps`.
pub fn check<F>(name: &str, inputs: &[Tensor], f: F, eps: f64, tolerance: f64, sign_flip: Option<OpKind>) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = match sign_flip {
        Some(kind) => Tape::with_sign_flip(kind),
        None => Tape::new(),
    };
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.detached().with_requires_grad(true)))
        .collect();
    let out = f(&tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars)?.value().item()
    };

    let mut report = GradReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        tolerance,
    };
    let mut probe: Vec<Tensor> = inputs.iter().map(Tensor::detached).collect();
    for (i, grad) in analytic.iter().enumerate() {
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            probe[i].data_mut()[e] = orig + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[e] = orig - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[e];
            let err = relative_error(a, numeric);
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = (i, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Reduces a tensor output to a scalar through fixed pseudo-random weights, so
/// the check exercises the full Jacobian rather than just its column sums.
pub fn project<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Tensor::randn(&out.shape(), 1.0, &mut rng);
    out.mul(out.tape().constant(weights))
        .map(Var::sum)
}

/// Pins a closure to the higher-ranked signature [`check`] expects.
pub fn scalar_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Finite-difference checks for every differentiable operation.
pub fn op_suite(sign_flip: Option<OpKind>) -> Result<Vec<GradReport>> {
    let tol = OP_TOLERANCE;
    let eps = FD_EPS;
    let mut reports = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, f: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>| -> Result<()> {
        reports.push(check(name, &inputs, f, eps, tol, sign_flip)?);
        Ok(())
    };

    run("matmul", vec![randn(&[4, 5], 1), randn(&[5, 3], 2)], &|_, v| {
        Ok(v[0].matmul(v[1])?.sum())
    })?;
    run("matmul_batched", vec![randn(&[2, 3, 4], 3), randn(&[4, 2], 4)], &|_, v| {
        project(v[0].matmul(v[1])?, 5)
    })?;
    run("add_broadcast", vec![randn(&[3, 4], 6), randn(&[4], 7)], &|_, v| {
        project(v[0].add(v[1])?, 8)
    })?;
    run("mul_broadcast", vec![randn(&[3, 4], 9), randn(&[4], 10)], &|_, v| {
        project(v[0].mul(v[1])?, 11)
    })?;
    run("scale", vec![randn(&[5], 12)], &|_, v| project(v[0].scale(-1.7), 13))?;
    run("gelu", vec![randn(&[6], 14)], &|_, v| project(v[0].gelu(), 15))?;
    run("dropout", vec![randn(&[8], 16)], &|_, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        project(v[0].dropout(0.3, Some(&mut rng))?, 18)
    })?;
    run(
        "softmax",
        vec![Tensor::vector(vec![0.3, -0.7, 1.1])],
        &|_, v| project(v[0].softmax(0)?, 19),
    )?;
    run("softmax_axis0", vec![randn(&[3, 2], 20)], &|_, v| project(v[0].softmax(0)?, 21))?;
    run(
        "layer_norm",
        vec![randn(&[2, 4], 22), randn(&[4], 23), randn(&[4], 24)],
        &|_, v| project(v[0].layer_norm(v[1], v[2], 1e-5)?, 25),
    )?;
    run("embedding", vec![randn(&[5, 3], 26)], &|_, v| {
        project(v[0].embedding(&[1, 4, 1, 0])?, 27)
    })?;
    run("cross_entropy", vec![randn(&[3, 5], 28)], &|_, v| {
        v[0].cross_entropy(&[Some(2), None, Some(4)], Reduction::Mean)
    })?;
    run("permute_reshape", vec![randn(&[2, 3, 4], 29)], &|_, v| {
        project(v[0].permute(&[2, 0, 1])?.reshape(&[4, 6])?, 30)
    })?;
    run("concat", vec![randn(&[2, 3], 31), randn(&[1, 3], 32)], &|_, v| {
        project(concat(&[v[0], v[1]], 0)?, 33)
    })?;
    run("sum_diamond", vec![randn(&[3], 34)], &|_, v| {
        // x feeds two paths that meet again
        Ok(v[0].mul(v[0])?.add(v[0].scale(3.0))?.sum())
    })?;
    run(
        "masked_attention",
        (0..10).map(|s| randn(if s < 2 { &[3, 4] } else if s % 2 == 0 { &[4, 4] } else { &[4] }, 40 + s)).collect(),
        &|_, v| {
            let lin = |w: usize| Linear {
                weight: v[w],
                bias: v[w + 1],
            };
            let params = AttentionParams {
                query: lin(2),
                key: lin(4),
                value: lin(6),
                output: lin(8),
            };
            let mask = AttentionMask::causal(3);
            project(multi_head(v[0], v[1], &params, Some(&mask), None, 2)?, 50)
        },
    )?;
    Ok(reports)
}

/// The tiny configuration used for the end-to-end model check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        layers_enc: 1,
        layers_dec: 1,
        hidden: 8,
        ffn: 16,
        heads: 2,
        ngram: 2,
        gamma: 1.0,
        max_len: 8,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// Full-model gradient of the future n-gram loss against finite differences,
/// over every parameter.
pub fn model_check(config: &ModelConfig, seed: u64, sign_flip: Option<OpKind>) -> Result<GradReport> {
    // Larger init than training so every path carries signal.
    let mut model = Model::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, t) in model.params.iter_mut() {
        let noise = Tensor::randn(t.shape(), 0.3, &mut rng);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(x, n)| *x += n);
    }
    let names: Vec<String> = model.params.names().cloned().collect();
    let inputs: Vec<Tensor> = names.iter().map(|n| model.params.get(n).map(Tensor::detached)).collect::<Result<_>>()?;
    let source = [4usize, 7, 5, 9, 6];
    let targets = [8usize, 5, 10, 4, 7];
    let f = scalar_fn(|_, vars| {
        let bound = model.bind_with(vars)?;
        Ok(model.example_loss(&bound, &source, &targets, None)?.total)
    });
    check("model_end_to_end", &inputs, f, FD_EPS, MODEL_TOLERANCE, sign_flip)
}

/// Summary of a full gradient-check run.
#[derive(Clone, Debug)]
pub struct SuiteSummary {
    pub reports: Vec<GradReport>,
    pub seconds: f64,
}

impl SuiteSummary {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(GradReport::passed)
    }

    /// The report with the largest error relative to its tolerance.
    pub fn worst(&self) -> Option<&GradReport> {
        self.reports
            .iter()
            .max_by(|a, b| (a.max_rel_err / a.tolerance).total_cmp(&(b.max_rel_err / b.tolerance)))
    }
}

pub fn run_suite(sign_flip: Option<OpKind>) -> Result<SuiteSummary> {
    let start = Instant::now();
    let mut reports = op_suite(sign_flip)?;
    reports.push(model_check(&tiny_model_config(), 7, sign_flip)?);
    Ok(SuiteSummary {
        reports,
        seconds: start.elapsed().as_secs_f64(),
    })
}
