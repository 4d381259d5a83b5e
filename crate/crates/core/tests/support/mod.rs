//! Independent numerical oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use diabnet::joint::{build_joint, HeadKind, JointConfig, JointModel};
use diabnet::tensor::{Mode, Rng, Tape, Tensor, Var};
use statrs::function::erf::erf;
use statrs::function::gamma::ln_gamma;

pub type Builder<'a> = Box<dyn Fn(&mut Tape, &[Var]) -> diabnet::Result<Var> + 'a>;

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps exact zeros comparable.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between the tape gradient of `f` and central
/// differences with step [`FD_STEP`], over every element of every input.
pub fn gradient_error(
    inputs: &[Tensor],
    f: &dyn Fn(&mut Tape, &[Var]) -> diabnet::Result<Var>,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.get(v).unwrap().clone())
        .collect();

    let eval = |values: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|x| t.param(x.clone())).collect();
        let l = f(&mut t, &vs).unwrap();
        t.scalar(l).unwrap()
    };
    let mut work = inputs.to_vec();
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let base = inputs[i].data()[j];
            work[i].data_mut()[j] = base + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = base - FD_STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = base;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
        }
    }
    worst
}

pub fn random_tensor(shape: &[usize], low: f64, high: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform_range(low, high)).collect(),
    )
    .unwrap()
}

/// Values with magnitude in `[0.05, 1]` and random sign (clear of the kink at 0).
pub fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = random_tensor(shape, 0.05, 1.0, rng);
    for v in t.data_mut() {
        if rng.uniform() < 0.5 {
            *v = -*v;
        }
    }
    t
}

/// Distinct values whose pairwise gaps exceed `100 * FD_STEP`.
pub fn well_separated(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let data = order
        .iter()
        .map(|&r| r as f64 * 0.01 - n as f64 * 0.005)
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(out * weights)` for a fixed random weight tensor, making any output scalar.
pub fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> diabnet::Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

pub struct GradCase<'a> {
    pub inputs: Vec<Tensor>,
    pub build: Builder<'a>,
}

/// Miniature joint models for gradient checks (CNN head on a 4x6 grid, or MLP head).
pub fn mini_joint(head: HeadKind, seed: u64) -> JointModel {
    let mut cfg = JointConfig::new(head);
    cfg.hidden = vec![6];
    cfg.seed = seed;
    cfg.lambda = 0.05;
    cfg.alpha = 0.7;
    cfg.beta = 1.3;
    match head {
        HeadKind::Cnn => {
            cfg.latent_dim = 24;
            cfg.cnn.height = 4;
            cfg.cnn.width = 6;
            cfg.cnn.filters = 2;
            cfg.cnn.kernel = (2, 3);
            cfg.cnn.pool = (1, 2);
            cfg.cnn.dense = 4;
        }
        HeadKind::Mlp => {
            cfg.latent_dim = 10;
            cfg.mlp.hidden = vec![5];
        }
    }
    build_joint(&cfg).unwrap()
}

/// Random cases for one named primitive; `instance` varies shapes and values.
pub fn gradient_case(name: &str, instance: u64) -> GradCase<'static> {
    let mut rng = Rng::new(0x6AD).derive(instance * 97 + name.len() as u64);
    let n = 2 + (instance % 3) as usize;
    match name {
        "dense" => {
            let (d_in, d_out) = (3 + (instance % 4) as usize, 2 + (instance % 5) as usize);
            let r = random_tensor(&[n, d_out], -1.0, 1.0, &mut rng);
            GradCase {
                inputs: vec![
                    random_tensor(&[n, d_in], -1.0, 1.0, &mut rng),
                    random_tensor(&[d_in, d_out], -1.0, 1.0, &mut rng),
                    random_tensor(&[d_out], -1.0, 1.0, &mut rng),
                ],
                build: Box::new(move |t, v| {
                    let out = t.dense(v[0], v[1], v[2])?;
                    project(t, out, &r)
                }),
            }
        }
        "conv2d" => {
            let stride = 1 + (instance % 2) as usize;
            let (h, w, c, k) = (
                5,
                6 + (instance % 2) as usize,
                1 + (instance % 2) as usize,
                3,
            );
            let x = random_tensor(&[n, h, w, c], -1.0, 1.0, &mut rng);
            let filters = random_tensor(&[k, 2, 3, c], -1.0, 1.0, &mut rng);
            let bias = random_tensor(&[k], -0.5, 0.5, &mut rng);
            let (oh, ow) = ((h - 2) / stride + 1, (w - 3) / stride + 1);
            let r = random_tensor(&[n, oh, ow, k], -1.0, 1.0, &mut rng);
            GradCase {
                inputs: vec![x, filters, bias],
                build: Box::new(move |t, v| {
                    let out = t.conv2d(v[0], v[1], v[2], stride)?;
                    project(t, out, &r)
                }),
            }
        }
        "maxpool2d" => {
            let x = well_separated(&[n, 4, 6, 2], &mut rng);
            let r = random_tensor(&[n, 2, 2, 2], -1.0, 1.0, &mut rng);
            GradCase {
                inputs: vec![x],
                build: Box::new(move |t, v| {
                    let out = t.maxpool2d(v[0], (2, 3))?;
                    project(t, out, &r)
                }),
            }
        }
        "conv2d+relu+maxpool" => {
            let x = random_tensor(&[n, 5, 8, 1], -1.0, 1.0, &mut rng);
            let filters = random_tensor(&[3, 2, 3, 1], -1.0, 1.0, &mut rng);
            let bias = random_tensor(&[3], -0.3, 0.3, &mut rng);
            let r = random_tensor(&[n, 2, 3, 3], -1.0, 1.0, &mut rng);
            GradCase {
                inputs: vec![x, filters, bias],
                build: Box::new(move |t, v| {
                    let out = t.conv2d_relu_maxpool(v[0], v[1], v[2], 1, (2, 2))?;
                    project(t, out, &r)
                }),
            }
        }
        "dropout" => {
            let r = random_tensor(&[n, 5], -1.0, 1.0, &mut rng);
            let mode = if instance.is_multiple_of(2) {
                Mode::Eval
            } else {
                Mode::Train
            };
            let rate = 0.3;
            GradCase {
                inputs: vec![random_tensor(&[n, 5], -1.0, 1.0, &mut rng)],
                build: Box::new(move |t, v| {
                    let out = t.dropout(v[0], rate, mode, &mut Rng::new(instance))?;
                    project(t, out, &r)
                }),
            }
        }
        "sigmoid" => {
            let r = random_tensor(&[n, 4], -1.0, 1.0, &mut rng);
            GradCase {
                inputs: vec![random_tensor(&[n, 4], -4.0, 4.0, &mut rng)],
                build: Box::new(move |t, v| {
                    let out = t.sigmoid(v[0])?;
                    project(t, out, &r)
                }),
            }
        }
        "relu" => {
            let r = random_tensor(&[n, 4], -1.0, 1.0, &mut rng);
            GradCase {
                inputs: vec![away_from_zero(&[n, 4], &mut rng)],
                build: Box::new(move |t, v| {
                    let out = t.relu(v[0])?;
                    project(t, out, &r)
                }),
            }
        }
        "mse" => GradCase {
            inputs: vec![
                random_tensor(&[n, 4], -1.0, 1.0, &mut rng),
                random_tensor(&[n, 4], -1.0, 1.0, &mut rng),
            ],
            build: Box::new(|t, v| t.mse(v[0], v[1])),
        },
        "bce" => {
            let y = Tensor::new(
                [n, 1],
                (0..n).map(|i| ((i as u64 + instance) % 2) as f64).collect(),
            )
            .unwrap();
            GradCase {
                inputs: vec![random_tensor(&[n, 1], 0.05, 0.95, &mut rng)],
                build: Box::new(move |t, v| {
                    let yv = t.constant(y.clone());
                    t.bce(v[0], yv)
                }),
            }
        }
        "kl" => GradCase {
            inputs: vec![
                random_tensor(&[n, 3], -2.0, 2.0, &mut rng),
                random_tensor(&[n, 3], -2.0, 2.0, &mut rng),
            ],
            build: Box::new(|t, v| t.kl_standard(v[0], v[1])),
        },
        "l1" => {
            let factor = rng.uniform_range(0.1, 2.0);
            GradCase {
                inputs: vec![away_from_zero(&[n, 5], &mut rng)],
                build: Box::new(move |t, v| t.l1(v[0], factor)),
            }
        }
        "reparameterize" => {
            let noise: Vec<f64> = (0..n * 2).map(|_| rng.normal()).collect();
            let r = random_tensor(&[n, 2], -1.0, 1.0, &mut rng);
            GradCase {
                inputs: vec![
                    random_tensor(&[n, 2], -1.0, 1.0, &mut rng),
                    random_tensor(&[n, 2], -2.0, 1.0, &mut rng),
                ],
                build: Box::new(move |t, v| {
                    let z = t.reparameterize_fixed(v[0], v[1], noise.clone())?;
                    project(t, z, &r)
                }),
            }
        }
        "joint" => {
            let head = if instance.is_multiple_of(2) {
                HeadKind::Cnn
            } else {
                HeadKind::Mlp
            };
            let model = mini_joint(head, instance);
            // Zero-initialised biases put relu inputs exactly on the kink.
            let inputs = model
                .params
                .values()
                .iter()
                .map(|p| {
                    let shift = random_tensor(p.shape(), -0.05, 0.05, &mut rng);
                    Tensor::new(
                        p.shape().to_vec(),
                        p.data()
                            .iter()
                            .zip(shift.data())
                            .map(|(a, b)| a + b)
                            .collect(),
                    )
                    .unwrap()
                })
                .collect();
            let x = random_tensor(&[n + 2, 8], 0.0, 1.0, &mut rng);
            let y = Tensor::new([n + 2, 1], (0..n + 2).map(|i| (i % 2) as f64).collect()).unwrap();
            GradCase {
                inputs,
                build: Box::new(move |t, v| {
                    let xv = t.constant(x.clone());
                    let yv = t.constant(y.clone());
                    Ok(model
                        .loss_on_tape(t, v, xv, yv, &mut Rng::new(instance))?
                        .total)
                }),
            }
        }
        other => panic!("no gradient case for {other}"),
    }
}

pub const GRADIENT_PRIMITIVES: [&str; 13] = [
    "dense",
    "conv2d",
    "maxpool2d",
    "conv2d+relu+maxpool",
    "dropout",
    "sigmoid",
    "relu",
    "mse",
    "bce",
    "kl",
    "l1",
    "reparameterize",
    "joint",
];

/// Worst relative error over `instances` random cases of `name`.
pub fn gradient_suite_worst(name: &str, instances: u64) -> f64 {
    (0..instances)
        .map(|i| {
            let case = gradient_case(name, i);
            gradient_error(&case.inputs, &*case.build)
        })
        .fold(0.0, f64::max)
}

pub fn naive_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i * m + j] += a[i * k + p] * b[p * m + j];
            }
        }
    }
    out
}

fn simpson(a: f64, fa: f64, fm: f64, b: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

fn adapt(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    fa: f64,
    b: f64,
    fb: f64,
    m: f64,
    fm: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let (lm, rm) = ((a + m) / 2.0, (m + b) / 2.0);
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, fa, flm, m, fm);
    let right = simpson(m, fm, frm, b, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adapt(f, a, fa, m, fm, lm, flm, left, tol / 2.0, depth - 1)
        + adapt(f, m, fm, b, fb, rm, frm, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`, pre-split into `pieces`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, pieces: usize, tol: f64) -> f64 {
    let width = (b - a) / pieces as f64;
    (0..pieces)
        .map(|i| {
            let (lo, hi) = (a + i as f64 * width, a + (i + 1) as f64 * width);
            let mid = (lo + hi) / 2.0;
            let (flo, fmid, fhi) = (f(lo), f(mid), f(hi));
            let whole = simpson(lo, flo, fmid, hi, fhi);
            adapt(
                f,
                lo,
                flo,
                hi,
                fhi,
                mid,
                fmid,
                whole,
                tol / pieces as f64,
                40,
            )
        })
        .sum()
}

/// `KL(N(mu, sigma^2) || N(0, 1))` by quadrature of `q ln(q/p)` over `mu +- 20 sigma`.
pub fn kl_by_quadrature(mu: f64, sigma: f64) -> f64 {
    let q = |x: f64| {
        (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp()
            / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    };
    let log_ratio = |x: f64| -sigma.ln() - (x - mu).powi(2) / (2.0 * sigma * sigma) + x * x / 2.0;
    let f = move |x: f64| {
        let qx = q(x);
        if qx == 0.0 {
            0.0
        } else {
            qx * log_ratio(x)
        }
    };
    integrate(&f, mu - 20.0 * sigma, mu + 20.0 * sigma, 80, 1e-12)
}

pub fn f_density(x: f64, d1: f64, d2: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let ln = 0.5 * d1 * (d1 / d2).ln() + (0.5 * d1 - 1.0) * x.ln()
        - 0.5 * (d1 + d2) * (1.0 + d1 * x / d2).ln()
        - (ln_gamma(d1 / 2.0) + ln_gamma(d2 / 2.0) - ln_gamma((d1 + d2) / 2.0));
    ln.exp()
}

/// Upper tail of the F distribution by quadrature after `x = f + t / (1 - t)`.
pub fn f_tail_by_quadrature(f: f64, d1: f64, d2: f64) -> f64 {
    let g = move |t: f64| {
        if t >= 1.0 {
            return 0.0;
        }
        let x = f + t / (1.0 - t);
        f_density(x, d1, d2) / (1.0 - t).powi(2)
    };
    integrate(&g, 0.0, 1.0, 64, 1e-12)
}

fn phi(z: f64) -> f64 {
    (-z * z / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn big_phi(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// `P(range of k standard normals <= w)`.
pub fn normal_range_cdf(w: f64, k: usize) -> f64 {
    if w <= 0.0 {
        return 0.0;
    }
    let f = move |z: f64| phi(z) * (big_phi(z) - big_phi(z - w)).max(0.0).powi(k as i32 - 1);
    k as f64 * integrate(&f, -9.0, 9.0 + w, 12, 1e-9)
}

/// CDF of the studentized range with `k` means and `df` error degrees of
/// freedom (`None` = infinite).
pub fn studentized_range_cdf(q: f64, k: usize, df: Option<f64>) -> f64 {
    let Some(nu) = df else {
        return normal_range_cdf(q, k);
    };
    let ln_norm = 0.5 * nu * nu.ln() - ln_gamma(nu / 2.0) - (0.5 * nu - 1.0) * 2f64.ln();
    let density = move |s: f64| {
        if s <= 0.0 {
            return 0.0;
        }
        (ln_norm + (nu - 1.0) * s.ln() - nu * s * s / 2.0).exp()
    };
    let f = move |s: f64| density(s) * normal_range_cdf(q * s, k);
    integrate(&f, 0.0, 1.0 + 12.0 / nu.sqrt(), 12, 1e-8)
}

/// Upper `alpha` point of the studentized range by Illinois regula falsi on
/// the CDF, inside a bracket `[lo, hi]` that is checked to contain the root.
pub fn studentized_range_quantile(alpha: f64, k: usize, df: Option<f64>, lo: f64, hi: f64) -> f64 {
    let g = |q: f64| studentized_range_cdf(q, k, df) - (1.0 - alpha);
    let (mut a, mut b) = (lo, hi);
    let (mut fa, mut fb) = (g(a), g(b));
    assert!(
        fa < 0.0 && fb > 0.0,
        "bracket [{lo}, {hi}] does not contain the quantile"
    );
    let mut side = 0;
    for _ in 0..60 {
        let c = (a * fb - b * fa) / (fb - fa);
        let fc = g(c);
        if fc.abs() < 1e-12 || (b - a) < 1e-9 {
            return c;
        }
        if fc < 0.0 {
            a = c;
            fa = fc;
            if side == -1 {
                fb /= 2.0;
            }
            side = -1;
        } else {
            b = c;
            fb = fc;
            if side == 1 {
                fa /= 2.0;
            }
            side = 1;
        }
    }
    (a * fb - b * fa) / (fb - fa)
}

/// Direct `(SSB / (k - 1)) / (SSW / (N - k))` with a two-pass grand mean.
pub fn anova_f_direct(groups: &[Vec<f64>]) -> f64 {
    let n: usize = groups.iter().map(Vec::len).sum();
    let k = groups.len();
    let grand: f64 = groups.iter().flatten().sum::<f64>() / n as f64;
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    for g in groups {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        ssb += g.len() as f64 * (m - grand) * (m - grand);
        for v in g {
            ssw += (v - m) * (v - m);
        }
    }
    (ssb / (k - 1) as f64) / (ssw / (n - k) as f64)
}

/// Normal draws with the given sample mean and sample SD exactly.
pub fn group_with_moments(n: usize, mean: f64, sd: f64, rng: &mut Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let m = raw.iter().sum::<f64>() / n as f64;
    let s = (raw.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    raw.iter().map(|v| mean + sd * (v - m) / s).collect()
}
