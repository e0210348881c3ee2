//! Acceptance suite: one line per criterion.
//!
//! `cargo test --test acceptance -- [numbers...]` runs a subset. Criterion 12
//! needs `DNADA_PAMAP2_MANIFEST` pointing at a manifest with users `1` and `6`.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use dnada::checkpoint::Checkpoint;
use dnada::cli::{self, Cli, Command};
use dnada::condnoise::sample_noise;
use dnada::datapipe::{synth_domains, DatasetSplit, FeatureVector, Standardizer};
use dnada::diffusion::NoiseSchedule;
use dnada::distshift::{bootstrap, dataset_report, w1_distance, BootstrapReport};
use dnada::nn::{grl, softmax_xent, Activation, DenseNet, Parameters, Vector};
use dnada::noisepred::{OutputGrads, PredictorNet, PredictorShape};
use dnada::trainer::{batch_losses, evaluate, fit, LossBreakdown, Models, SourceOnly, TrainConfig};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

enum Status {
    Done(Outcome),
    Skipped(String),
}

struct Criterion {
    id: u32,
    name: &'static str,
    gating: bool,
    run: fn() -> Status,
}

fn main() -> ExitCode {
    let filter: Vec<u32> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .filter_map(|a| a.parse().ok())
        .collect();
    let criteria = [
        Criterion { id: 1, name: "gradient correctness", gating: true, run: c1_gradients },
        Criterion { id: 2, name: "GRL contract", gating: true, run: c2_grl },
        Criterion { id: 3, name: "forward-process statistics", gating: true, run: c3_forward_stats },
        Criterion { id: 4, name: "schedule/posterior identities", gating: true, run: c4_schedule },
        Criterion { id: 5, name: "W1 oracle equivalence", gating: true, run: c5_w1 },
        Criterion { id: 6, name: "bootstrap determinism + oracle", gating: true, run: c6_bootstrap },
        Criterion { id: 7, name: "combined-loss identity", gating: true, run: c7_total },
        Criterion { id: 8, name: "synthetic end-to-end", gating: true, run: c8_synthetic },
        Criterion { id: 9, name: "loss descent", gating: true, run: c9_descent },
        Criterion { id: 10, name: "reproducibility", gating: true, run: c10_repro },
        Criterion { id: 11, name: "CLI defaults", gating: true, run: c11_defaults },
        Criterion { id: 12, name: "real-data stretch", gating: false, run: c12_stretch },
    ];
    let mut failed = Vec::new();
    for c in criteria.iter().filter(|c| filter.is_empty() || filter.contains(&c.id)) {
        let start = Instant::now();
        let status = (c.run)();
        let secs = start.elapsed().as_secs_f64();
        let gate = if c.gating { "" } else { " (non-gating)" };
        match status {
            Status::Done(o) => {
                let tag = if o.pass { "PASS" } else { "FAIL" };
                println!("[{tag}] {:>2} {}{gate}: {} ({secs:.1}s)", c.id, c.name, o.detail);
                if !o.pass && c.gating {
                    failed.push(c.id);
                }
            }
            Status::Skipped(why) => println!("[SKIP] {:>2} {}{gate}: {why}", c.id, c.name),
        }
    }
    if failed.is_empty() {
        println!("acceptance: all gating criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: gating criteria failed: {failed:?}");
        ExitCode::FAILURE
    }
}

fn gauss(dim: usize, rng: &mut ChaCha8Rng) -> Vector {
    Vector::from_shape_simple_fn(dim, || rng.sample(StandardNormal))
}

/// Central differences of `f` at `p`.
fn central_diff(p: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut w = p.to_vec();
    (0..p.len())
        .map(|i| {
            let x = w[i];
            w[i] = x + h;
            let up = f(&w);
            w[i] = x - h;
            let down = f(&w);
            w[i] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-7))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------- 1

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

fn grad_cfg(fixed_unit_var: bool) -> TrainConfig {
    TrainConfig {
        timesteps: 10,
        lambda_act: 0.7,
        lambda_binary: 1.3,
        lambda_adv: 0.9,
        lambda_act_source: 1.1,
        gamma_a: 0.8,
        gamma_u: 1.2,
        gamma_as: 0.6,
        lambda_grl: 1.5,
        fixed_unit_var,
        ..Default::default()
    }
}

fn grad_batch(dim: usize, rng: &mut ChaCha8Rng) -> Vec<FeatureVector> {
    vec![
        FeatureVector::source(gauss(dim, rng), 0),
        FeatureVector::source(gauss(dim, rng), 1),
        FeatureVector::target(gauss(dim, rng), Some(2)),
        FeatureVector::target(gauss(dim, rng), Some(3)),
    ]
}

type Objective = Box<dyn Fn(&LossBreakdown) -> f64>;

/// Per-segment objectives whose gradients `batch_losses` reports.
fn segment_objectives(cfg: &TrainConfig) -> [(&'static str, Objective); 6] {
    let c = cfg.clone();
    let gen = move |b: &LossBreakdown| c.lambda_act * b.l_act + c.lambda_binary * b.l_binary;
    let c = cfg.clone();
    let trunk = move |b: &LossBreakdown| {
        b.l_noise + c.gamma_as * c.lambda_act_source * b.l_act_source
            - c.lambda_grl * c.lambda_adv * (c.gamma_a * b.l_adv_a + c.gamma_u * b.l_adv_u)
    };
    let c = cfg.clone();
    let cas = move |b: &LossBreakdown| c.lambda_act_source * b.l_act_source;
    let c = cfg.clone();
    let adv_a = move |b: &LossBreakdown| c.lambda_adv * b.l_adv_a;
    let c = cfg.clone();
    let adv_u = move |b: &LossBreakdown| c.lambda_adv * b.l_adv_u;
    [
        ("generator+noise heads", Box::new(gen)),
        ("predictor trunk", Box::new(trunk)),
        ("eps head", Box::new(|b: &LossBreakdown| b.l_noise)),
        ("cas head", Box::new(cas)),
        ("adv_a head", Box::new(adv_a)),
        ("adv_u head", Box::new(adv_u)),
    ]
}

fn model_grad_check(fixed_unit_var: bool) -> Vec<(String, f64)> {
    let cfg = grad_cfg(fixed_unit_var);
    let dim = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut models = Models::init(dim, 2, 4, Standardizer::identity(dim), &cfg, &mut rng).unwrap();
    // move off the zero-initialised residual head
    let base: Vec<f64> = models.to_flat().iter().map(|w| w + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
    models.set_flat(&base);
    let batch = grad_batch(dim, &mut rng);

    let (_, grads) = batch_losses(&batch, &models, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let analytic = grads.to_flat();
    assert_eq!(analytic.len(), base.len());

    let p = &models.predictor;
    let gen_len = models.generator.to_flat().len() + models.heads.to_flat().len();
    let trunk_len = p.trunk_in.param_count() + p.temb_proj.param_count() + p.trunk_out.param_count();
    let lens = [
        gen_len,
        trunk_len,
        p.head_eps.param_count(),
        p.head_cas.param_count(),
        p.head_adv_a.param_count(),
        p.head_adv_u.param_count(),
    ];
    let mut probe = models.clone();
    let mut out = Vec::new();
    let mut start = 0;
    for ((name, objective), len) in segment_objectives(&cfg).into_iter().zip(lens) {
        let range = start..start + len;
        start += len;
        let mut params = base.clone();
        let numeric = central_diff(&base[range.clone()], H, |seg| {
            params[range.clone()].copy_from_slice(seg);
            probe.set_flat(&params);
            let (b, _) = batch_losses(&batch, &probe, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            objective(&b)
        });
        out.push((name.to_string(), rel_err(&analytic[range], &numeric)));
    }
    assert_eq!(start, base.len());
    out
}

/// `dL/dx_t` returned by the predictor, through all heads and both GRL edges.
fn predictor_input_check() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let net = PredictorNet::new(PredictorShape::for_dim(5, 3, 4, 10), &mut rng).unwrap();
    let x = gauss(5, &mut rng);
    let target = gauss(5, &mut rng);
    let (t, c_as, c_a, c_u, lam) = (7, 1, 3, 1, 1.7);
    let scale = [0.6, 0.8, 1.2];
    let objective = |x: &Vector| -> (f64, OutputGrads) {
        let (o, _) = net.predict(x, t, lam).unwrap();
        let r = &o.eps_hat - &target;
        let (l_cas, d_cas) = softmax_xent(&o.logits_cas, c_as).unwrap();
        let (l_a, d_a) = softmax_xent(&o.logits_adv_a, c_a).unwrap();
        let (l_u, d_u) = softmax_xent(&o.logits_adv_u, c_u).unwrap();
        let value = r.dot(&r) + scale[0] * l_cas - lam * (scale[1] * l_a + scale[2] * l_u);
        let up = OutputGrads {
            eps_hat: Some(r * 2.0),
            cas: Some(d_cas),
            adv_a: Some(d_a),
            adv_u: Some(d_u),
            trunk_scale: Some(scale),
        };
        (value, up)
    };
    let (_, up) = objective(&x);
    let (_, tape) = net.predict(&x, t, lam).unwrap();
    let mut grads = net.zero_grads();
    let dx = net.backward(&tape, &up, &mut grads).unwrap();
    let numeric = central_diff(x.as_slice().unwrap(), H, |v| objective(&Array1::from(v.to_vec())).0);
    rel_err(dx.as_slice().unwrap(), &numeric)
}

fn source_only_check() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let dim = 6;
    let net = DenseNet::new(dim, &[(2 * dim, Activation::Relu), (3, Activation::Linear)], &mut rng).unwrap();
    let x = gauss(dim, &mut rng);
    let (out, tape) = net.forward(&x).unwrap();
    let (_, d) = softmax_xent(&out, 2).unwrap();
    let (g, _) = net.backward(&tape, &d).unwrap();
    let mut probe = net.clone();
    let numeric = central_diff(&net.to_flat(), H, |p| {
        probe.set_flat(p);
        softmax_xent(&probe.infer(&x).unwrap(), 2).unwrap().0
    });
    rel_err(&g.to_flat(), &numeric)
}

fn c1_gradients() -> Status {
    let mut results: Vec<(String, f64)> = Vec::new();
    for (mode, fixed) in [("fixed-var", true), ("learned-var", false)] {
        results.extend(model_grad_check(fixed).into_iter().map(|(n, e)| (format!("{mode} {n}"), e)));
    }
    results.push(("predictor dx".into(), predictor_input_check()));
    results.push(("source-only net".into(), source_only_check()));
    let worst = results.iter().cloned().fold(("".to_string(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let failures: Vec<&str> = results.iter().filter(|r| r.1.is_nan() || r.1 > GRAD_TOL).map(|r| r.0.as_str()).collect();
    Status::Done(Outcome::new(
        failures.is_empty(),
        format!(
            "{} checks, worst rel err {:.2e} ({}) <= {GRAD_TOL:e}{}",
            results.len(),
            worst.1,
            worst.0,
            if failures.is_empty() { String::new() } else { format!("; failing: {failures:?}") }
        ),
    ))
}

// ---------------------------------------------------------------- 2

fn c2_grl() -> Status {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ok = true;
    let mut notes = Vec::new();
    for _ in 0..50 {
        let u = gauss(9, &mut rng);
        for lam in [0.0, 0.5, 1.0, 2.5] {
            let g = grl(&u, lam);
            ok &= g.iter().zip(&u).all(|(gi, ui)| *gi == -lam * ui);
        }
        // bitwise sign flip for unit lambda
        ok &= grl(&u, 1.0).iter().zip(&u).all(|(gi, ui)| gi.to_bits() == (-ui).to_bits());
    }
    notes.push(format!("backward exact: {ok}"));

    // through the predictor: forward outputs ignore lambda, trunk gradients scale with it
    let net = PredictorNet::new(PredictorShape::for_dim(4, 2, 3, 10), &mut rng).unwrap();
    let x = gauss(4, &mut rng);
    let (ref_out, _) = net.predict(&x, 3, 1.0).unwrap();
    let mut fwd_ok = true;
    let mut lin_err: f64 = 0.0;
    let trunk_grad = |lam: f64| -> (Vec<f64>, Vec<f64>) {
        let (o, tape) = net.predict(&x, 3, lam).unwrap();
        let up = OutputGrads {
            adv_a: Some(softmax_xent(&o.logits_adv_a, 2).unwrap().1),
            adv_u: Some(softmax_xent(&o.logits_adv_u, 1).unwrap().1),
            ..Default::default()
        };
        let mut g = net.zero_grads();
        net.backward(&tape, &up, &mut g).unwrap();
        let mut trunk = g.trunk_in.to_flat();
        trunk.extend(g.trunk_out.to_flat());
        let mut heads = g.head_adv_a.to_flat();
        heads.extend(g.head_adv_u.to_flat());
        (trunk, heads)
    };
    let (unit_trunk, unit_heads) = trunk_grad(1.0);
    for lam in [0.0, 0.5, 1.0, 2.5] {
        let (o, _) = net.predict(&x, 3, lam).unwrap();
        fwd_ok &= o == ref_out;
        let (trunk, heads) = trunk_grad(lam);
        fwd_ok &= heads == unit_heads;
        for (a, b) in trunk.iter().zip(&unit_trunk) {
            lin_err = lin_err.max((a - lam * b).abs() / b.abs().max(1e-12));
        }
        if lam == 0.0 {
            fwd_ok &= trunk.iter().all(|v| *v == 0.0);
        }
    }
    notes.push(format!("forward identity: {fwd_ok}"));
    notes.push(format!("trunk grad linear in lambda, rel err {lin_err:.1e}"));
    Status::Done(Outcome::new(ok && fwd_ok && lin_err < 1e-12, notes.join("; ")))
}

// ---------------------------------------------------------------- 3

fn c3_forward_stats() -> Status {
    const N: usize = 100_000;
    let cfg = TrainConfig {
        timesteps: 10,
        gamma_a: 0.8,
        gamma_u: 1.3,
        ..Default::default()
    };
    let dim = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let models = Models::init(dim, 3, 5, Standardizer::identity(dim), &cfg, &mut rng).unwrap();
    let sched = &models.schedule;
    let emb = &models.generator.embedding;
    let x_prev = gauss(dim, &mut rng);
    let mut worst_se: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for (t, c_a, c_u) in [(1, 0, 0), (6, 4, 1), (10, 2, 1)] {
        let (gauss_params, _) = models.generator.params(&x_prev, c_a, c_u).unwrap();
        let mut sum = Vector::zeros(dim);
        let mut sq = Vector::zeros(dim);
        for _ in 0..N {
            let eps = sample_noise(&gauss_params, &mut rng);
            let x_t = sched.cond_forward_step(&x_prev, t, &eps).unwrap();
            sum += &x_t;
            sq += &(&x_t * &x_t);
        }
        let (a, b) = (sched.alpha(t), sched.beta(t));
        let expected = &x_prev * a
            + &((&emb.activity_table.row(c_a) * cfg.gamma_a + &emb.user_table.row(c_u) * cfg.gamma_u) * b);
        let mean = &sum / N as f64;
        let var = (&sq / N as f64 - &(&mean * &mean)) * (N as f64 / (N - 1) as f64);
        let se = b / (N as f64).sqrt();
        for k in 0..dim {
            worst_se = worst_se.max((mean[k] - expected[k]).abs() / se);
            worst_var = worst_var.max((var[k] / (b * b) - 1.0).abs());
        }
    }
    Status::Done(Outcome::new(
        worst_se <= 4.0 && worst_var <= 0.02,
        format!("worst mean deviation {worst_se:.2} SE (<= 4), worst variance ratio error {:.2}% (<= 2%)", 100.0 * worst_var),
    ))
}

// ---------------------------------------------------------------- 4

fn c4_schedule() -> Status {
    let mut notes = Vec::new();
    let mut ok = true;
    for (t_max, lo, hi) in [(50, 1e-4, 0.02), (1000, 1e-4, 0.02), (7, 0.05, 0.3)] {
        let s = NoiseSchedule::linear(t_max, lo, hi, false).unwrap();
        let mut prod = 1.0;
        let mut bar_err: f64 = 0.0;
        for t in 1..=t_max {
            prod *= 1.0 - s.beta(t);
            bar_err = bar_err.max((s.alpha_bar(t) - prod).abs());
            ok &= s.posterior_variance(t).unwrap() <= s.beta(t);
        }
        ok &= bar_err <= 1e-12;
        ok &= s.posterior_variance(1).unwrap() == 0.0;
        notes.push(format!("T={t_max} alpha_bar err {bar_err:.1e}"));
    }
    let s = NoiseSchedule::linear(2, 0.1, 0.2, false).unwrap();
    let hand = 0.2 * (1.0 - 0.9) / (1.0 - 0.9 * 0.8);
    let got = s.posterior_variance(2).unwrap();
    let hand_ok = (got - 0.071_428_571_428_571_43).abs() <= 1e-9 && (got - hand).abs() <= 1e-9;
    notes.push(format!("beta~_2 = {got:.10}"));
    Status::Done(Outcome::new(ok && hand_ok, notes.join("; ")))
}

// ---------------------------------------------------------------- 5

/// O(n^3) Hungarian algorithm (potentials form); returns the minimum total cost.
fn hungarian(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| cost[p[j] - 1][j - 1]).sum()
}

fn c5_w1() -> Status {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..=100);
        let spread = rng.random_range(0.1..10.0);
        let a: Vec<f64> = (0..n).map(|_| spread * rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-spread..spread) + 1.0).collect();
        let cost: Vec<Vec<f64>> = a.iter().map(|x| b.iter().map(|y| (x - y).abs()).collect()).collect();
        let oracle = hungarian(&cost) / n as f64;
        let va: Vec<Vector> = a.iter().map(|x| Array1::from(vec![*x])).collect();
        let vb: Vec<Vector> = b.iter().map(|x| Array1::from(vec![*x])).collect();
        worst = worst.max((w1_distance(&va, &vb).unwrap() - oracle).abs());
    }
    let mut metric_ok = true;
    let mut worst_tri: f64 = f64::NEG_INFINITY;
    for _ in 0..100 {
        let set = |rng: &mut ChaCha8Rng| -> Vec<Vector> {
            let n = rng.random_range(1..40);
            let off = rng.random_range(-3.0..3.0);
            (0..n).map(|_| gauss(3, rng) + off).collect()
        };
        let (x, y, z) = (set(&mut rng), set(&mut rng), set(&mut rng));
        let xy = w1_distance(&x, &y).unwrap();
        metric_ok &= xy == w1_distance(&y, &x).unwrap() || (xy - w1_distance(&y, &x).unwrap()).abs() <= 1e-12;
        let xz = w1_distance(&x, &z).unwrap();
        let yz = w1_distance(&y, &z).unwrap();
        worst_tri = worst_tri.max(xz - (xy + yz));
        metric_ok &= xz <= xy + yz + 1e-12;
        metric_ok &= w1_distance(&x, &x).unwrap() == 0.0;
    }
    Status::Done(Outcome::new(
        worst <= 1e-9 && metric_ok,
        format!("max |w1 - hungarian| {worst:.1e} over 50 instances; symmetry/triangle on 100 triples: {metric_ok} (max slack {worst_tri:.2e})"),
    ))
}

// ---------------------------------------------------------------- 6

/// Straight-line bootstrap: per iteration, stream `i` of ChaCha8 seeded with
/// `seed`, draw `|a|` indices into `a` then `|b|` into `b`.
fn bootstrap_oracle(a: &[Vec<f64>], b: &[Vec<f64>], n_boot: usize, seed: u64) -> (f64, Vec<f64>, f64) {
    fn w1(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let dim = a[0].len();
        let mut total = 0.0;
        for k in 0..dim {
            let mut xa: Vec<f64> = a.iter().map(|v| v[k]).collect();
            let mut xb: Vec<f64> = b.iter().map(|v| v[k]).collect();
            xa.sort_by(|p, q| p.partial_cmp(q).unwrap());
            xb.sort_by(|p, q| p.partial_cmp(q).unwrap());
            let mut s = 0.0;
            for i in 0..xa.len() {
                s += (xa[i] - xb[i]).abs();
            }
            total += s / xa.len() as f64;
        }
        total / dim as f64
    }
    let observed = w1(a, b);
    let mut ds = Vec::new();
    for i in 0..n_boot {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut ra = Vec::new();
        for _ in 0..a.len() {
            ra.push(a[rng.random_range(0..a.len())].clone());
        }
        let mut rb = Vec::new();
        for _ in 0..b.len() {
            rb.push(b[rng.random_range(0..b.len())].clone());
        }
        ds.push(w1(&ra, &rb));
    }
    let mut below = 0;
    for d in &ds {
        if *d <= observed {
            below += 1;
        }
    }
    (observed, ds, below as f64 / n_boot as f64)
}

fn proportion_holds(r: &BootstrapReport) -> bool {
    let n = r.bootstrap_distances.len();
    n > 0
        && r.bootstrap_distances.iter().all(|d| *d >= 0.0)
        && r.proportion == r.bootstrap_distances.iter().filter(|d| **d <= r.observed_distance).count() as f64 / n as f64
}

fn c6_bootstrap() -> Status {
    let a = vec![vec![0.3, -1.0], vec![1.7, 0.2], vec![-0.4, 2.5]];
    let b = vec![vec![1.1, 0.0], vec![2.9, -0.7], vec![0.5, 1.4]];
    let va: Vec<Vector> = a.iter().map(|v| Array1::from(v.clone())).collect();
    let vb: Vec<Vector> = b.iter().map(|v| Array1::from(v.clone())).collect();
    let mut reports = Vec::new();
    let mut oracle_ok = true;
    for seed in [0u64, 42, 12345] {
        let r = bootstrap(&va, &vb, 10, seed, 0).unwrap();
        let (obs, ds, prop) = bootstrap_oracle(&a, &b, 10, seed);
        oracle_ok &= r.observed_distance == obs && r.bootstrap_distances == ds && r.proportion == prop;
        oracle_ok &= r == bootstrap(&va, &vb, 10, seed, 0).unwrap();
        reports.push(r);
    }
    // identical sets: observed 0, proportion counts exact-zero resamples
    let same = bootstrap(&va, &va, 200, 9, 1).unwrap();
    let zeros = same.bootstrap_distances.iter().filter(|d| **d == 0.0).count() as f64 / 200.0;
    let same_ok = same.observed_distance == 0.0 && same.proportion == zeros;
    reports.push(same);

    let (src, tgt) = synth_domains(30, 3, 4, 1.0, 6).unwrap();
    let ds = dataset_report(&src, &tgt, 100, 6).unwrap();
    reports.extend(ds.per_activity.iter().cloned());
    let invariant_ok = reports.iter().all(proportion_holds);
    Status::Done(Outcome::new(
        oracle_ok && same_ok && invariant_ok,
        format!(
            "tiny case matches straight-line oracle bitwise: {oracle_ok}; identity case: {same_ok}; proportion invariant on {} reports: {invariant_ok}",
            reports.len()
        ),
    ))
}

// ---------------------------------------------------------------- 7

fn c7_total() -> Status {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let cfg = TrainConfig {
            timesteps: 20,
            lambda_act: rng.random_range(0.0..3.0),
            lambda_binary: rng.random_range(0.0..3.0),
            lambda_adv: rng.random_range(0.0..3.0),
            lambda_act_source: rng.random_range(0.0..3.0),
            gamma_a: rng.random_range(0.0..2.0),
            gamma_u: rng.random_range(0.0..2.0),
            fixed_unit_var: i % 2 == 0,
            ..Default::default()
        };
        let dim = rng.random_range(2..7);
        let models = Models::init(dim, 2, 4, Standardizer::identity(dim), &cfg, &mut rng).unwrap();
        let n = rng.random_range(2..12);
        let batch: Vec<FeatureVector> = (0..n)
            .map(|k| {
                if k % 2 == 0 {
                    FeatureVector::source(gauss(dim, &mut rng) * 3.0, rng.random_range(0..2))
                } else {
                    FeatureVector::target(gauss(dim, &mut rng) * 3.0, Some(rng.random_range(2..4)))
                }
            })
            .collect();
        let (b, _) = batch_losses(&batch, &models, &cfg, &mut rng).unwrap();
        let rebuilt = b.l_noise
            + cfg.lambda_act * b.l_act
            + cfg.lambda_binary * b.l_binary
            + cfg.lambda_adv * (b.l_adv_a + b.l_adv_u)
            + cfg.lambda_act_source * b.l_act_source;
        worst = worst.max((b.l_total - rebuilt).abs());
    }
    // every logged epoch of a short run
    let (src, tgt) = synth_domains(40, 2, 4, 2.0, 7).unwrap();
    let mut split = DatasetSplit::new(src, &tgt).unwrap();
    split.assign_pseudo_labels(7).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        timesteps: 10,
        lambda_act: 0.3,
        lambda_adv: 1.7,
        seed: 7,
        ..Default::default()
    };
    let mut worst_log: f64 = 0.0;
    for r in fit(&split, &cfg).unwrap().history {
        let b = r.losses;
        let rebuilt = b.l_noise
            + cfg.lambda_act * b.l_act
            + cfg.lambda_binary * b.l_binary
            + cfg.lambda_adv * (b.l_adv_a + b.l_adv_u)
            + cfg.lambda_act_source * b.l_act_source;
        worst_log = worst_log.max((b.l_total - rebuilt).abs());
    }
    Status::Done(Outcome::new(
        worst <= 1e-9 && worst_log <= 1e-9,
        format!("max |l_total - rebuilt| {worst:.1e} over 100 batches, {worst_log:.1e} over logged epochs"),
    ))
}

// ---------------------------------------------------------------- 8, 9

struct SeedRun {
    seed: u64,
    dnada: f64,
    baseline: f64,
    first_total: f64,
    epoch50_total: f64,
}

fn synthetic_runs() -> &'static [SeedRun] {
    static RUNS: std::sync::OnceLock<Vec<SeedRun>> = std::sync::OnceLock::new();
    RUNS.get_or_init(|| {
        (0..5u64)
            .into_par_iter()
            .map(|seed| {
                let (source, target) = synth_domains(500, 2, 8, 4.0, seed).unwrap();
                let mut split = DatasetSplit::new(source, &target).unwrap();
                split.assign_pseudo_labels(seed).unwrap();
                let cfg = TrainConfig {
                    epochs: 100,
                    timesteps: 50,
                    seed,
                    ..Default::default()
                };
                let result = fit(&split, &cfg).unwrap();
                SeedRun {
                    seed,
                    dnada: evaluate(&result.models, &split.test_target, &cfg).unwrap(),
                    baseline: SourceOnly::train(&split, &cfg).unwrap().evaluate(&split.test_target).unwrap(),
                    first_total: result.history[0].losses.l_total,
                    epoch50_total: result.history[49].losses.l_total,
                }
            })
            .collect()
    })
}

fn accepted(r: &SeedRun) -> bool {
    r.dnada >= 0.85 && r.dnada - r.baseline >= 0.10
}

fn c8_synthetic() -> Status {
    let runs = synthetic_runs();
    let n_ok = runs.iter().filter(|r| accepted(r)).count();
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("s{} {:.3}/{:.3}{}", r.seed, r.dnada, r.baseline, if accepted(r) { "*" } else { "" }))
        .collect();
    Status::Done(Outcome::new(
        n_ok >= 4,
        format!(
            "{n_ok}/5 seeds reach acc >= 0.85 and +10 pts over source-only (need 4); dnada/source-only: {}",
            per_seed.join(", ")
        ),
    ))
}

fn c9_descent() -> Status {
    let runs = synthetic_runs();
    let acc: Vec<u64> = runs.iter().filter(|r| accepted(r)).map(|r| r.seed).collect();
    let descending: Vec<bool> = runs.iter().map(|r| r.epoch50_total < r.first_total).collect();
    let all_ok = descending.iter().all(|d| *d);
    let detail: Vec<String> = runs
        .iter()
        .map(|r| format!("s{} {:.3}->{:.3}", r.seed, r.first_total, r.epoch50_total))
        .collect();
    Status::Done(Outcome::new(
        all_ok,
        format!(
            "epoch-50 l_total < epoch-1 l_total in all 5 seeds (accepted seeds {acc:?}): {}",
            detail.join(", ")
        ),
    ))
}

// ---------------------------------------------------------------- 10

fn c10_repro() -> Status {
    let dir = tempfile::tempdir().unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let run = |name: &str| -> PathBuf {
        let out = dir.path().join(name);
        let code = pool.install(|| {
            cli::run([
                "dnada",
                "train",
                "--synthetic",
                "--epochs",
                "3",
                "--timesteps",
                "20",
                "--seed",
                "4",
                "--out",
                out.to_str().unwrap(),
            ])
        });
        assert_eq!(code, ExitCode::SUCCESS);
        out
    };
    let (a, b) = (run("a"), run("b"));
    let mut same = Vec::new();
    for file in ["history.jsonl", "history.csv", "checkpoint.json", "config.toml"] {
        let x = std::fs::read(a.join(file)).unwrap();
        let y = std::fs::read(b.join(file)).unwrap();
        same.push((file, x == y && !x.is_empty()));
    }
    let ck_ok = Checkpoint::load(&a.join("checkpoint.json")).is_ok();
    let ok = same.iter().all(|s| s.1) && ck_ok;
    Status::Done(Outcome::new(
        ok,
        format!("byte-identical {:?}; checkpoint reloads: {ck_ok}", same),
    ))
}

// ---------------------------------------------------------------- 11

fn c11_defaults() -> Status {
    use clap::Parser;
    let cli = Cli::try_parse_from(["dnada", "train", "--synthetic", "--out", "unused"]).unwrap();
    let Command::Train(args) = cli.command else {
        return Status::Done(Outcome::new(false, "train subcommand did not parse"));
    };
    let cfg = args.overrides.resolve().unwrap();
    let table = [
        ("epochs", cfg.epochs as f64, 500.0),
        ("lr", cfg.lr, 0.001),
        ("lambda_act", cfg.lambda_act, 1.0),
        ("lambda_binary", cfg.lambda_binary, 1.0),
        ("lambda_adv", cfg.lambda_adv, 1.0),
        ("lambda_act_source", cfg.lambda_act_source, 1.0),
        ("gamma_a", cfg.gamma_a, 1.0),
        ("gamma_u", cfg.gamma_u, 1.0),
    ];
    let mismatched: Vec<&str> = table.iter().filter(|(_, got, want)| got != want).map(|t| t.0).collect();
    let echo = cli::config_toml(&cfg);
    let echo_ok = [
        "epochs = 500",
        "lr = 0.001",
        "lambda-act = 1.0",
        "lambda-binary = 1.0",
        "lambda-adv = 1.0",
        "lambda-act-source = 1.0",
        "gamma-a = 1.0",
        "gamma-u = 1.0",
    ]
    .iter()
    .all(|line| echo.lines().any(|l| l.trim() == *line));
    Status::Done(Outcome::new(
        mismatched.is_empty() && echo_ok,
        format!("resolved defaults mismatched: {mismatched:?}; config echo carries every value: {echo_ok}"),
    ))
}

// ---------------------------------------------------------------- 12

fn c12_stretch() -> Status {
    let Ok(manifest) = std::env::var("DNADA_PAMAP2_MANIFEST") else {
        return Status::Skipped("DNADA_PAMAP2_MANIFEST not set".into());
    };
    let dir = tempfile::tempdir().unwrap();
    let out = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let data = ["--manifest", &manifest, "--source-user", "1", "--target-user", "6"];
    let mut steps = Vec::new();
    let mut analyze = vec!["dnada", "analyze"];
    analyze.extend(data);
    let a_out = out("analyze");
    analyze.extend(["--out", &a_out]);
    steps.push(("analyze", cli::run(analyze) == ExitCode::SUCCESS));
    let mut train = vec!["dnada", "train"];
    train.extend(data);
    let t_out = out("train");
    train.extend(["--out", &t_out]);
    steps.push(("train", cli::run(train) == ExitCode::SUCCESS));
    let ck = format!("{t_out}/checkpoint.json");
    let e_out = out("eval");
    let mut eval = vec!["dnada", "eval", "--checkpoint", &ck];
    eval.extend(data);
    eval.extend(["--out", &e_out]);
    steps.push(("eval", cli::run(eval) == ExitCode::SUCCESS));
    let acc = std::fs::read_to_string(format!("{e_out}/accuracy.csv")).unwrap_or_default();
    Status::Done(Outcome::new(
        steps.iter().all(|s| s.1),
        format!("steps {steps:?}; accuracy.csv: {}", acc.trim().replace('\n', " | ")),
    ))
}
