//! Finite-difference oracles shared by the gradient tests and the acceptance
//! run.
#![allow(dead_code)]

use eloss_core::datagen::BLOBS_MLP;
use eloss_core::entropy::{entropy_gradient, entropy_kl, EntropyConfig};
use eloss_core::net::{ModelConfig, ModelKind, RepeatedBlockNet};
use eloss_core::samples::SampleMatrix;
use eloss_core::tape::{Tape, Var};
use eloss_core::tensor::Tensor;
use eloss_core::trainer::{compute_gradients, TrainConfig};
use eloss_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;

/// `max|a − f| / max|f|`, with the denominator floored at 1e-8.
pub fn rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    let num = analytic.iter().zip(fd).map(|(a, f)| (a - f).abs()).fold(0.0, f64::max);
    let den = fd.iter().map(|f| f.abs()).fold(0.0, f64::max).max(1e-8);
    num / den
}

fn normal(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// True when every sample's k-th neighbor is separated from the next one by
/// a comfortable relative margin, and no two samples nearly coincide.
fn well_separated(m: &SampleMatrix, k: usize, margin: f64) -> bool {
    (0..m.n()).all(|i| {
        let mut d: Vec<f64> = (0..m.n())
            .filter(|&j| j != i)
            .map(|j| {
                m.row(i).iter().zip(m.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            })
            .collect();
        d.sort_by(f64::total_cmp);
        let next = d.get(k).copied().unwrap_or(f64::INFINITY);
        d[0] > 1e-3 && (next - d[k - 1]) > margin * d[k - 1]
    })
}

pub fn tie_free_instance(rng: &mut ChaCha8Rng, max_n: usize, max_d: usize) -> SampleMatrix {
    loop {
        let n = rng.random_range(3..=max_n);
        let d = rng.random_range(1..=max_d);
        let m = SampleMatrix::new(normal(rng, n * d, 1.0), n, d).unwrap();
        if well_separated(&m, 1, 1e-3) {
            return m;
        }
    }
}

/// Worst relative error of `entropy_gradient` (k = 1) against central
/// differences of `entropy_kl`, over `count` random tie-free instances.
pub fn entropy_gradient_check(count: usize, seed: u64) -> f64 {
    let cfg = EntropyConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let m = tie_free_instance(&mut rng, 64, 8);
        let analytic = entropy_gradient(&m, 1, &cfg).unwrap();
        let mut data = m.as_slice().to_vec();
        let mut fd = Vec::with_capacity(data.len());
        for j in 0..data.len() {
            let orig = data[j];
            let mut at = |v: f64| {
                data[j] = v;
                entropy_kl(&SampleMatrix::new(data.clone(), m.n(), m.d()).unwrap(), 1, &cfg)
                    .unwrap()
                    .value
            };
            let (p, q) = (at(orig + FD_STEP), at(orig - FD_STEP));
            data[j] = orig;
            fd.push((p - q) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_err(&analytic, &fd));
    }
    worst
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Compares reverse-mode gradients of `sum(build(inputs) ⊙ R)` against
/// central differences, for a random fixed cotangent `R`.
pub fn primitive_check(inputs: &[Tensor], build: &Build<'_>, rng: &mut ChaCha8Rng) -> f64 {
    let eval = |xs: &[Tensor], r: Option<&Tensor>| -> (Tape, Vec<Var>, Var, Tensor) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        let out_t = tape.tensor(out);
        let r = r.cloned().unwrap_or_else(|| out_t.clone());
        let rv = tape.constant(r);
        let prod = tape.mul(out, rv).unwrap();
        let loss = tape.sum(prod);
        (tape, vars, loss, out_t)
    };
    let (_, _, _, out) = eval(inputs, None);
    let r = Tensor::new(out.shape.clone(), normal(rng, out.numel(), 1.0)).unwrap();
    let (tape, vars, loss, _) = eval(inputs, Some(&r));
    let grads = tape.gradients(loss, &[]).unwrap();

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).map_or_else(|| vec![0.0; xs[i].numel()], <[f64]>::to_vec);
        let mut fd = Vec::with_capacity(analytic.len());
        for j in 0..xs[i].numel() {
            let orig = xs[i].values[j];
            xs[i].values[j] = orig + FD_STEP;
            let (t, _, l, _) = eval(&xs, Some(&r));
            let p = t.scalar_value(l).unwrap();
            xs[i].values[j] = orig - FD_STEP;
            let (t, _, l, _) = eval(&xs, Some(&r));
            let q = t.scalar_value(l).unwrap();
            xs[i].values[j] = orig;
            fd.push((p - q) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_err(&analytic, &fd));
    }
    worst
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal(rng, n, 1.0)).unwrap()
}

/// Values bounded away from zero so ReLU has no kink within the step.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = tensor(rng, shape);
    t.values.iter_mut().for_each(|v| *v += 0.05f64.copysign(*v));
    t
}

fn entropy_input(rng: &mut ChaCha8Rng) -> Tensor {
    let b = rng.random_range(1..=3);
    loop {
        let c = rng.random_range(3..=10);
        let d = rng.random_range(1..=4);
        let t = tensor(rng, &[b, c, d]);
        let ok = t.values.chunks(c * d).all(|chunk| {
            well_separated(&SampleMatrix::new(chunk.to_vec(), c, d).unwrap(), 1, 1e-3)
        });
        if ok {
            return t;
        }
    }
}

/// Every tape primitive on `instances` random inputs. Returns the worst
/// relative error per primitive.
pub fn all_primitive_checks(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EntropyConfig::default();
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match out.iter_mut().find(|(n, _)| *n == name) {
        Some(slot) => slot.1 = slot.1.max(e),
        None => out.push((name, e)),
    };
    for _ in 0..instances {
        let r = &mut rng;
        let a = rng_shape(r);
        let x = tensor(r, &a);
        let y = tensor(r, &a);
        let e = primitive_check(&[x.clone(), y.clone()], &|t, v| t.add(v[0], v[1]), r);
        record("add", e);
        let e = primitive_check(&[x.clone(), y.clone()], &|t, v| t.sub(v[0], v[1]), r);
        record("sub", e);
        let e = primitive_check(&[x.clone(), y.clone()], &|t, v| t.mul(v[0], v[1]), r);
        record("mul", e);
        let e = primitive_check(std::slice::from_ref(&x), &|t, v| Ok(t.scale(v[0], -1.7)), r);
        record("scale", e);
        let s = tensor(r, &[]);
        let e = primitive_check(&[x.clone(), s], &|t, v| t.add_scalar(v[0], v[1]), r);
        record("add_scalar", e);
        let e = primitive_check(std::slice::from_ref(&x), &|t, v| Ok(t.sum(v[0])), r);
        record("sum", e);
        let e = primitive_check(std::slice::from_ref(&x), &|t, v| Ok(t.mean(v[0])), r);
        record("mean", e);
        let e = primitive_check(&[off_zero(r, &a)], &|t, v| Ok(t.relu(v[0])), r);
        record("relu", e);
        let e = primitive_check(&[x.clone(), y.clone()], &|t, v| t.mse(v[0], v[1]), r);
        record("mse", e);
        let n = x.numel();
        let start = r.random_range(0..n);
        let len = r.random_range(1..=n - start);
        let e = primitive_check(std::slice::from_ref(&x), &|t, v| t.slice(v[0], start, len), r);
        record("slice", e);
        let e = primitive_check(std::slice::from_ref(&x), &|t, v| t.reshape(v[0], vec![n]), r);
        record("reshape", e);
        let scalars: Vec<Tensor> = (0..r.random_range(1..=4)).map(|_| tensor(r, &[])).collect();
        let e = primitive_check(&scalars, &|t, v| t.stack(v), r);
        record("stack", e);

        let (batch, inp, outd) = (r.random_range(1..=4), r.random_range(1..=6), r.random_range(1..=5));
        let lin = [tensor(r, &[batch, inp]), tensor(r, &[outd, inp]), tensor(r, &[outd])];
        let e = primitive_check(&lin, &|t, v| t.linear(v[0], v[1], v[2]), r);
        record("linear", e);

        let (cin, cout, h, w) =
            (r.random_range(1..=3), r.random_range(1..=3), r.random_range(2..=5), r.random_range(2..=5));
        let k = if r.random_bool(0.5) { 1 } else { 3 };
        let conv = [tensor(r, &[2, cin, h, w]), tensor(r, &[cout, cin, k, k]), tensor(r, &[cout])];
        let e = primitive_check(&conv, &|t, v| t.conv2d(v[0], v[1], v[2]), r);
        record("conv2d", e);
        let e = primitive_check(&conv[..1], &|t, v| t.flatten(v[0]), r);
        record("flatten", e);

        let classes = r.random_range(2..=5);
        let rows = r.random_range(1..=5);
        let labels: Vec<usize> = (0..rows).map(|_| r.random_range(0..classes)).collect();
        let logits = tensor(r, &[rows, classes]);
        let e = primitive_check(&[logits], &move |t, v| t.softmax_cross_entropy(v[0], &labels), r);
        record("softmax_cross_entropy", e);

        let ent = entropy_input(r);
        let e = primitive_check(&[ent], &|t, v| t.entropy(v[0], 1, &cfg), r);
        record("entropy", e);
    }
    out
}

fn rng_shape(r: &mut ChaCha8Rng) -> Vec<usize> {
    match r.random_range(0..3) {
        0 => vec![r.random_range(1..=8)],
        1 => vec![r.random_range(1..=4), r.random_range(1..=4)],
        _ => vec![2, r.random_range(1..=3), r.random_range(1..=3)],
    }
}

/// Two-block, width-8 convolutional net with one convolution per block.
pub fn small_net(seed: u64) -> RepeatedBlockNet {
    let model = ModelConfig {
        kind: ModelKind::Conv,
        input_shape: vec![2, 4, 4],
        width: 8,
        blocks: 2,
        layers_per_block: 1,
        classes: 3,
        kernel: 3,
    };
    RepeatedBlockNet::from_config(&model, seed).unwrap()
}

pub struct NetCheck {
    /// Error of every parameter against the finite difference of the total loss.
    pub total: f64,
    /// Error of stem parameters against the finite difference of the task loss
    /// alone, when the regularizer is blocked at the block input.
    pub blocked_stem: f64,
}

/// Gradient of `L_task + α·Eloss` on [`small_net`] against central
/// differences of the same loss.
pub fn net_gradient_check(seed: u64) -> NetCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = tensor(&mut rng, &[3, 2, 4, 4]);
    let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..3)).collect();
    let base = TrainConfig {
        alpha: 0.1,
        eloss_coverage: 2,
        lambda2: 0.1,
        task: BLOBS_MLP.into(),
        ..Default::default()
    };

    let grads_of = |net: &mut RepeatedBlockNet, cfg: &TrainConfig| -> Vec<Vec<f64>> {
        compute_gradients(net, inputs.clone(), &labels, cfg).unwrap();
        net.params_mut().into_iter().map(|p| p.grad.clone().unwrap()).collect()
    };
    let fd_of = |net: &mut RepeatedBlockNet, cfg: &TrainConfig, task_only: bool, pi: usize| {
        let n = net.params_mut()[pi].numel();
        (0..n)
            .map(|j| {
                let loss = |net: &mut RepeatedBlockNet| {
                    let s = compute_gradients(net, inputs.clone(), &labels, cfg).unwrap();
                    if task_only { s.task_loss } else { s.total_loss }
                };
                let orig = net.params_mut()[pi].values[j];
                net.params_mut()[pi].values[j] = orig + FD_STEP;
                let p = loss(net);
                net.params_mut()[pi].values[j] = orig - FD_STEP;
                let q = loss(net);
                net.params_mut()[pi].values[j] = orig;
                (p - q) / (2.0 * FD_STEP)
            })
            .collect::<Vec<f64>>()
    };

    let mut net = small_net(seed);
    let stem_count = net.named_params().iter().filter(|(n, _)| n.starts_with("stem")).count();

    let full = TrainConfig { eloss_into_stem: true, ..base.clone() };
    let analytic = grads_of(&mut net, &full);
    let mut total = 0.0f64;
    let (mut a_all, mut f_all) = (Vec::new(), Vec::new());
    for (pi, a) in analytic.iter().enumerate() {
        let fd = fd_of(&mut net, &full, false, pi);
        total = total.max(rel_err(a, &fd));
        a_all.extend_from_slice(a);
        f_all.extend(fd);
    }
    total = total.max(rel_err(&a_all, &f_all));

    let analytic = grads_of(&mut net, &base);
    let mut blocked_stem = 0.0f64;
    for (pi, a) in analytic.iter().enumerate().take(stem_count) {
        let fd = fd_of(&mut net, &base, true, pi);
        blocked_stem = blocked_stem.max(rel_err(a, &fd));
    }
    NetCheck { total, blocked_stem }
}
