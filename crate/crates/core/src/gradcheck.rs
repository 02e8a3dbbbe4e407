//! Central finite-difference checks for every differentiable tape operation
//! and for the complete networks.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::netarch::{build_naive_lwfnet, build_tcl_net, build_tempconet, ArchConfig, NetworkGraph};
use crate::tensor::{DropoutMode, LrnParams, OpKind, ParamStore, Scalar, Tape, Tensor, Var};

pub const OP_EPSILON: f64 = 1e-3;
pub const OP_TOLERANCE: f64 = 1e-3;
pub const NET_EPSILON: f64 = 1e-5;
pub const NET_TOLERANCE: f64 = 3e-3;
/// Floor for the relative-error denominator.
pub const DENOMINATOR_FLOOR: f64 = 1e-4;

/// Ops with a backward rule, in report order.
pub const DIFFERENTIABLE_OPS: [OpKind; 16] = [
    OpKind::Conv2d,
    OpKind::MaxPool2d,
    OpKind::LocalResponseNorm,
    OpKind::Dense,
    OpKind::Relu,
    OpKind::Softmax,
    OpKind::Dropout,
    OpKind::Concat,
    OpKind::Reshape,
    OpKind::GatherRows,
    OpKind::GruSequence,
    OpKind::LastStep,
    OpKind::CrossEntropy,
    OpKind::Sum,
    OpKind::WeightedSum,
    OpKind::Add,
];

pub const NETWORK_CHECKS: [&str; 3] = ["tcl_net", "naive_lwfnet", "tempconet"];

/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every coordinate `i`.
pub fn finite_difference_gradient<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    epsilon: f64,
) -> Result<Tensor<T>> {
    let coords: Vec<usize> = (0..x.len()).collect();
    let g = fd_at(&mut f, x, epsilon, &coords)?;
    Tensor::new(x.shape().to_vec(), g.into_iter().map(T::from_f64_lossy).collect())
}

fn fd_at<T: Scalar>(
    f: &mut impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    epsilon: f64,
    coords: &[usize],
) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {epsilon}")));
    }
    let eps = T::from_f64_lossy(epsilon);
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + eps;
            let up = f(&probe)?.to_f64_lossy();
            probe.data_mut()[i] = orig - eps;
            let down = f(&probe)?.to_f64_lossy();
            probe.data_mut()[i] = orig;
            Ok((up - down) / (2.0 * epsilon))
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, DENOMINATOR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coords: usize,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn first_failure(&self) -> Option<&Check> {
        self.checks.iter().find(|c| !c.passed())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            writeln!(
                s,
                "{:<26} {} max_rel_err={:.3e} tol={:.0e} coords={}",
                c.name,
                if c.passed() { "PASS" } else { "FAIL" },
                c.max_rel_error,
                c.tolerance,
                c.coords
            )
            .unwrap();
        }
        writeln!(s, "{} checks in {:.1}s", self.checks.len(), self.elapsed.as_secs_f64()).unwrap();
        s
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Include the whole-network checks.
    pub networks: bool,
    pub arch: ArchConfig,
    /// Coordinates sampled per parameter tensor in the network checks.
    pub coords_per_param: usize,
    /// Corrupts the backward rule of one op kind on the analytic side.
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { seed: 0, networks: true, arch: ArchConfig::desk(24, 32), coords_per_param: 8, fault: None }
    }
}

/// Runs the op suite and, if requested, the network suite, in `f64`.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checks = Vec::new();
    for kind in DIFFERENTIABLE_OPS {
        checks.push(check_op(kind, opts.fault, &mut rng)?);
    }
    if opts.networks {
        for name in NETWORK_CHECKS {
            checks.push(check_network(name, opts, &mut rng)?);
        }
    }
    Ok(GradcheckReport { checks, elapsed: start.elapsed() })
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), rng)
}

/// Distinct values at least 0.05 apart, so no window has a near tie.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let order = sample(rng, n, n).into_vec();
    Tensor::from_fn(shape.to_vec(), |i| (order[i] as f64 - n as f64 / 2.0) * 0.05)
}

/// Normal values pushed away from the ReLU kink.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = randn(shape, rng);
    for v in t.data_mut() {
        while v.abs() < 1e-2 {
            *v = rng.sample(rand_distr::StandardNormal);
        }
    }
    t
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn op_case(kind: OpKind, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    match kind {
        OpKind::Conv2d => (
            vec![randn(&[2, 3, 8, 8], rng), randn(&[4, 3, 3, 3], rng), randn(&[4], rng)],
            Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 1, 1)),
        ),
        OpKind::MaxPool2d => (vec![distinct(&[1, 2, 6, 6], rng)], Box::new(|t, v| t.max_pool2d(v[0], 3, 2))),
        OpKind::LocalResponseNorm => {
            let p = LrnParams { alpha: 0.5, ..LrnParams::default() };
            (vec![randn(&[1, 8, 4, 4], rng)], Box::new(move |t, v| t.local_response_norm(v[0], p)))
        }
        OpKind::Dense => (
            vec![randn(&[3, 5], rng), randn(&[5, 4], rng), randn(&[4], rng)],
            Box::new(|t, v| t.dense(v[0], v[1], v[2])),
        ),
        OpKind::Relu => (vec![off_kink(&[4, 6], rng)], Box::new(|t, v| t.relu(v[0]))),
        OpKind::Softmax => (vec![randn(&[3, 5], rng)], Box::new(|t, v| t.softmax(v[0]))),
        OpKind::Dropout => (
            vec![randn(&[4, 6], rng)],
            Box::new(|t, v| t.dropout(v[0], 0.5, DropoutMode::Train, &mut ChaCha8Rng::seed_from_u64(3))),
        ),
        OpKind::Concat => (vec![randn(&[3, 4], rng), randn(&[3, 2], rng)], Box::new(|t, v| t.concat(v[0], v[1]))),
        OpKind::Reshape => (vec![randn(&[2, 3, 4], rng)], Box::new(|t, v| t.reshape(v[0], vec![6, 4]))),
        OpKind::GatherRows => (vec![randn(&[4, 3], rng)], Box::new(|t, v| t.gather_rows(v[0], &[2, 0, 2, 3]))),
        OpKind::GruSequence => {
            let (steps, n, d, h) = (4, 2, 3, 5);
            let mut inputs = vec![randn(&[steps, n, d], rng), randn(&[n, h], rng)];
            for shape in [[d, h], [d, h], [d, h], [h, h], [h, h], [h, h]] {
                inputs.push(randn(&shape, rng));
            }
            for _ in 0..3 {
                inputs.push(randn(&[h], rng));
            }
            (
                inputs,
                Box::new(|t, v| {
                    let w: [Var; 9] = v[2..].try_into().expect("nine gate tensors");
                    Ok(t.gru_sequence(v[0], v[1], w)?.0)
                }),
            )
        }
        OpKind::LastStep => (vec![randn(&[3, 2, 4], rng)], Box::new(|t, v| t.last_step(v[0]))),
        OpKind::CrossEntropy => (
            vec![randn(&[4, 3], rng)],
            Box::new(|t, v| {
                let p = t.softmax(v[0])?;
                t.cross_entropy(p, &[0, 2, 1, 2])
            }),
        ),
        OpKind::Sum => (vec![randn(&[3, 4], rng)], Box::new(|t, v| t.sum(v[0]))),
        OpKind::WeightedSum => {
            let w = randn(&[3, 4], rng);
            (vec![randn(&[3, 4], rng)], Box::new(move |t, v| t.weighted_sum(v[0], w.clone())))
        }
        OpKind::Add => (vec![randn(&[3, 4], rng), randn(&[3, 4], rng)], Box::new(|t, v| t.add(v[0], v[1]))),
        OpKind::Input | OpKind::Param => unreachable!("leaves have no backward rule"),
    }
}

fn check_op(kind: OpKind, fault: Option<OpKind>, rng: &mut ChaCha8Rng) -> Result<Check> {
    let (inputs, build) = op_case(kind, rng);
    let mut projection: Option<Tensor<f64>> = None;
    // Records the op and reduces it to a scalar through a fixed projection.
    let mut record = |tape: &mut Tape<f64>, inputs: &[Tensor<f64>]| -> Result<(Vec<Var>, Var)> {
        let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
        let out = build(tape, &vars)?;
        let value = tape.value(out);
        if value.len() == 1 {
            return Ok((vars, out));
        }
        let w = projection.get_or_insert_with(|| randn(value.shape(), &mut ChaCha8Rng::seed_from_u64(17))).clone();
        Ok((vars, tape.weighted_sum(out, w)?))
    };

    let mut tape = Tape::new();
    if let Some(k) = fault {
        tape.inject_fault(k);
    }
    let (vars, loss) = record(&mut tape, &inputs)?;
    let grads = tape.backward(loss, &mut ParamStore::new())?;

    let mut worst = 0.0f64;
    let mut coords = 0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        let numeric = finite_difference_gradient(
            |probe| {
                let mut all = inputs.clone();
                all[i] = probe.clone();
                let mut t = Tape::new();
                let (_, l) = record(&mut t, &all)?;
                Ok(t.value(l).item())
            },
            x,
            OP_EPSILON,
        )?;
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            worst = worst.max(nan_max(relative_error(a, n)));
        }
        coords += x.len();
    }
    Ok(Check { name: kind.name().to_string(), max_rel_error: worst, tolerance: OP_TOLERANCE, coords })
}

fn nan_max(e: f64) -> f64 {
    if e.is_nan() { f64::INFINITY } else { e }
}

fn network_loss(name: &str, net: &NetworkGraph<f64>, tape: &mut Tape<f64>, data: &[Tensor<f64>]) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mode = DropoutMode::Train;
    match name {
        "tcl_net" => {
            let (a, b) = (tape.input(data[0].clone()), tape.input(data[1].clone()));
            let (_, _, probs) = net.temporal_order_forward(tape, a, b, mode, &mut rng)?;
            tape.cross_entropy(probs, &[1, 0])
        }
        "naive_lwfnet" => {
            let x = tape.input(data[0].clone());
            let probs = net.naive_forward(tape, x, mode, &mut rng)?;
            tape.cross_entropy(probs, &[0, 2, 1])
        }
        _ => {
            let x = tape.input(data[0].clone());
            let h0 = tape.input(data[1].clone());
            let (probs, _) = net.recurrent_forward(tape, x, h0, mode, &mut rng)?;
            tape.cross_entropy(probs, &[0, 0, 1, 2])
        }
    }
}

fn check_network(name: &str, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<Check> {
    let arch = &opts.arch;
    let (h, w) = (arch.input_height, arch.input_width);
    let seed = rng.random();
    let (mut net, data) = match name {
        "tcl_net" => (build_tcl_net::<f64>(arch, seed)?, vec![randn(&[2, 3, h, w], rng), randn(&[2, 3, h, w], rng)]),
        "naive_lwfnet" => (build_naive_lwfnet::<f64>(arch, 3, seed)?, vec![randn(&[3, 3, h, w], rng)]),
        _ => {
            let net = build_tempconet::<f64>(arch, 3, seed)?;
            let hidden = net.resolved().gru_hidden;
            (net, vec![randn(&[4, 3, h, w], rng), randn(&[1, hidden], rng)])
        }
    };

    let mut tape = Tape::new();
    if let Some(k) = opts.fault {
        tape.inject_fault(k);
    }
    net.params_mut().zero_grads();
    let loss = network_loss(name, &net, &mut tape, &data)?;
    let mut store = net.params().clone();
    tape.backward(loss, &mut store)?;

    let mut worst = 0.0f64;
    let mut coords = 0;
    let ids: Vec<_> = net.params().ids().collect();
    for id in ids {
        let value = net.params().value(id).clone();
        let picked = sample(rng, value.len(), opts.coords_per_param.min(value.len())).into_vec();
        let numeric = fd_at(
            &mut |probe: &Tensor<f64>| {
                net.params_mut().get_mut(id).value = probe.clone();
                let mut t = Tape::new();
                let l = network_loss(name, &net, &mut t, &data)?;
                Ok(t.value(l).item())
            },
            &value,
            NET_EPSILON,
            &picked,
        )?;
        net.params_mut().get_mut(id).value = value;
        let analytic = &store.get(id).grad;
        for (&i, n) in picked.iter().zip(numeric) {
            worst = worst.max(nan_max(relative_error(analytic.data()[i], n)));
        }
        coords += picked.len();
    }
    Ok(Check { name: name.to_string(), max_rel_error: worst, tolerance: NET_TOLERANCE, coords })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_difference_gradient(|x: &Tensor<f64>| Ok(x.data()[0] * x.data()[0]), &Tensor::scalar(3.0), 1e-3)
            .unwrap();
        assert!((g.item() - 6.0).abs() < 1e-5);
    }

    #[test]
    fn constant_function() {
        let x = Tensor::<f64>::from_fn(vec![5], |i| i as f64);
        let g = finite_difference_gradient(|_| Ok(4.0), &x, 1e-3).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_of_squares() {
        let x = randn(&[20], &mut ChaCha8Rng::seed_from_u64(1));
        let g = finite_difference_gradient(|x| Ok(x.data().iter().map(|v| v * v).sum()), &x, 1e-3).unwrap();
        for (a, b) in g.data().iter().zip(x.data()) {
            assert!((a - 2.0 * b).abs() < 1e-4);
        }
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(finite_difference_gradient(|_| Ok(0.0f64), &Tensor::scalar(1.0), 0.0).is_err());
    }

    #[test]
    fn op_suite_passes_and_names_each_op_once() {
        let opts = GradcheckOptions { networks: false, ..Default::default() };
        let report = run_gradcheck(&opts).unwrap();
        assert!(report.passed(), "{}", report.to_text());
        let names: Vec<&str> = report.checks.iter().map(|c| c.name.as_str()).collect();
        let expected: Vec<&str> = DIFFERENTIABLE_OPS.iter().map(|k| k.name()).collect();
        assert_eq!(names, expected);
    }

    #[test]
    fn every_injected_fault_is_caught() {
        for kind in DIFFERENTIABLE_OPS {
            let opts = GradcheckOptions { networks: false, fault: Some(kind), ..Default::default() };
            let report = run_gradcheck(&opts).unwrap();
            let own = report.checks.iter().find(|c| c.name == kind.name()).unwrap();
            assert!(!own.passed(), "fault in {} went unnoticed", kind.name());
        }
    }
}
