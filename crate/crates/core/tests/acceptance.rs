//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line straight to
//! stdout (bypassing the harness capture) before asserting.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use astro_float::{BigFloat, Consts, Radix, RoundingMode};
use dpsynth::data::ToySpec;
use dpsynth::dpsgd::{
    clip_gradient, dp_sgd_step, poisson_lot, DpSgdConfig, Objective, PerExampleGradient, TrainState,
};
use dpsynth::eval::{perplexity, UniformScorer};
use dpsynth::experiment::{
    prepare_data, run_experiment, train_generator, ExperimentConfig, PretrainConfig,
    PublicCorpusConfig, TrainedGenerator,
};
use dpsynth::model::{
    encode_pair, forward_noising, reverse_sample, sqrt_schedule, ArConfig, ArNet, Denoiser,
    DiffusionConfig, DiffusionNet, NoiseDraw, TokenSequence,
};
use dpsynth::params::ParamSet;
use dpsynth::privacy::{
    calibrate_noise, default_delta, default_orders, epsilon_after, group_privacy, PrivacyBudget,
};
use dpsynth::Result;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tempfile::TempDir;

fn report(n: u32, title: &str, pass: bool, detail: &str) {
    let line = format!(
        "{} criterion {n:>2} {title}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {n} failed: {detail}");
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------------------
// 1. accountant oracle

const PREC: usize = 320;
const RM: RoundingMode = RoundingMode::ToEven;

fn big(v: f64) -> BigFloat {
    BigFloat::from_f64(v, PREC)
}

fn to_f64(x: &BigFloat, cc: &mut Consts) -> f64 {
    x.format(Radix::Dec, RM, cc).unwrap().parse().unwrap()
}

/// `ln Σ_k C(α,k) (1−q)^{α−k} q^k exp((k²−k)/(2σ²))`, summed term by term in
/// 320-bit arithmetic with no rearrangement.
fn oracle_log_moment(alpha: u64, q: f64, sigma: f64, cc: &mut Consts) -> BigFloat {
    let qb = big(q);
    let one_minus_q = big(1.0).sub(&qb, PREC, RM);
    let two_var = big(2.0)
        .mul(&big(sigma), PREC, RM)
        .mul(&big(sigma), PREC, RM);
    let mut binom = big(1.0);
    let mut sum = big(0.0);
    for k in 0..=alpha {
        if k > 0 {
            binom = binom
                .mul(&BigFloat::from_u64(alpha - k + 1, PREC), PREC, RM)
                .div(&BigFloat::from_u64(k, PREC), PREC, RM);
        }
        let expo = BigFloat::from_u64(k * k - k, PREC)
            .div(&two_var, PREC, RM)
            .exp(PREC, RM, cc);
        let term = binom
            .mul(&one_minus_q.powi((alpha - k) as usize, PREC, RM), PREC, RM)
            .mul(&qb.powi(k as usize, PREC, RM), PREC, RM)
            .mul(&expo, PREC, RM);
        sum = sum.add(&term, PREC, RM);
    }
    sum.ln(PREC, RM, cc)
}

/// Independent ε: RDP per order from the binomial sum, composed over `steps`
/// and converted with `min_α T·ε(α) + ln(1/δ)/(α−1)`.
fn oracle_epsilon(curve: &[(u64, BigFloat)], steps: u64, delta: f64, cc: &mut Consts) -> f64 {
    let log_inv_delta = big(delta).ln(PREC, RM, cc).neg();
    let t = BigFloat::from_u64(steps, PREC);
    let mut best: Option<BigFloat> = None;
    for (alpha, log_moment) in curve {
        let am1 = BigFloat::from_u64(alpha - 1, PREC);
        let eps = t
            .mul(log_moment, PREC, RM)
            .add(&log_inv_delta, PREC, RM)
            .div(&am1, PREC, RM);
        best = Some(match best {
            Some(b) if b.cmp(&eps).unwrap() <= 0 => b,
            _ => eps,
        });
    }
    to_f64(&best.unwrap(), cc).max(0.0)
}

#[test]
fn criterion_01_accountant_oracle() {
    let mut cc = Consts::new().unwrap();
    let delta = 1e-5;
    let orders = default_orders();
    let mut worst = 0.0f64;
    let mut library_time = Duration::ZERO;
    let mut failures = Vec::new();
    for q in [0.001, 0.01, 0.1] {
        for sigma in [0.5, 1.0, 4.0] {
            let curve: Vec<(u64, BigFloat)> = orders
                .iter()
                .map(|&a| (a as u64, oracle_log_moment(a as u64, q, sigma, &mut cc)))
                .collect();
            for steps in [1u64, 100, 10_000] {
                let expected = oracle_epsilon(&curve, steps, delta, &mut cc);
                let start = Instant::now();
                let (got, _) = epsilon_after(sigma, q, steps, delta, &orders).unwrap();
                library_time += start.elapsed();
                let r = rel(got, expected);
                worst = worst.max(r);
                if r > 1e-6 {
                    failures.push(format!("q={q} σ={sigma} T={steps}: {got} vs {expected}"));
                }
            }
        }
    }
    let pass = failures.is_empty() && library_time < Duration::from_secs(60);
    report(
        1,
        "accountant oracle equivalence",
        pass,
        &format!(
            "27 points, worst rel err {worst:.2e}, accountant time {library_time:.2?} {failures:?}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. calibration round trip

#[test]
fn criterion_02_calibration_round_trip() {
    let start = Instant::now();
    // (n, expected lot size, epochs): the toy task and a SPAM-sized corpus.
    let settings = [
        (2_000usize, 64.0, 4u64),
        (42_175, 256.0, 3),
        (10_000, 100.0, 10),
    ];
    let mut lines = Vec::new();
    let mut pass = true;
    for target in [3.0, 8.0] {
        for &(n, lot, epochs) in &settings {
            let delta = default_delta(n).unwrap();
            let q = lot / n as f64;
            let steps = epochs * (n as f64 / lot).ceil() as u64;
            let sigma =
                calibrate_noise(PrivacyBudget::new(target, delta).unwrap(), q, steps).unwrap();
            let (eps, _) = epsilon_after(sigma, q, steps, delta, &default_orders()).unwrap();
            let ok = eps <= target && eps > 0.98 * target;
            pass &= ok;
            lines.push(format!("ε={target} n={n}: σ={sigma:.4} → {eps:.4}"));
        }
    }
    pass &= start.elapsed() < Duration::from_secs(60);
    report(
        2,
        "calibration round trip",
        pass,
        &format!("{} in {:.2?}", lines.join("; "), start.elapsed()),
    );
}

// ---------------------------------------------------------------------------
// 3. group privacy

#[test]
fn criterion_03_group_privacy() {
    let mut pass = true;
    for (e, d) in [(3.0, 1e-5), (8.0, 2.3711e-6), (0.5, 0.01)] {
        let b = PrivacyBudget::new(e, d).unwrap();
        pass &= group_privacy(b, 1).unwrap() == b;
    }
    let g = group_privacy(PrivacyBudget::new(3.0, 1e-5).unwrap(), 2).unwrap();
    let closed_form_delta = 2.0 * 3.0f64.exp() * 1e-5;
    pass &= rel(g.epsilon, 6.0) <= 1e-9 && rel(g.delta, closed_form_delta) <= 1e-9;
    // The published figure is rounded to six significant digits.
    pass &= rel(g.delta, 4.01711e-4) <= 5e-6;
    report(
        3,
        "group privacy",
        pass,
        &format!(
            "k=1 identity; k=2 → ({}, {:.6e}), closed form δ {closed_form_delta:.9e}",
            g.epsilon, g.delta
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. DP-SGD mechanism

struct LeastSquares;

struct Point {
    x: Vec<f64>,
    y: f64,
}

impl Objective for LeastSquares {
    type Example = Point;

    fn loss_and_grad(
        &self,
        params: &ParamSet,
        ex: &Point,
        _rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Vec<f64>)> {
        let w = params.value(0);
        let pred: f64 =
            w.iter().zip(&ex.x).map(|(w, x)| w * x).sum::<f64>() + params.value(1)[[0, 0]];
        let r = pred - ex.y;
        let mut grad: Vec<f64> = ex.x.iter().map(|x| r * x).collect();
        grad.push(r);
        Ok((0.5 * r * r, grad))
    }
}

#[test]
fn criterion_04_dpsgd_mechanism() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    let mut clip_ok = true;
    for i in 0..1000 {
        let dim = 1 + i % 50;
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let values: Vec<f64> = (0..dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let c = rng.random_range(0.1..5.0);
        let g = PerExampleGradient::new(values.clone());
        let clipped = clip_gradient(&g, c);
        let norm = clipped.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        clip_ok &= norm <= c && (norm - g.l2_norm().min(c)).abs() <= 1e-9 * c;
        if g.l2_norm() <= c {
            clip_ok &= clipped.values() == values.as_slice();
        } else {
            let f = c / g.l2_norm();
            clip_ok &= clipped
                .values()
                .iter()
                .zip(&values)
                .all(|(a, b)| (a - b * f).abs() <= 1e-12 * b.abs().max(1e-300));
        }
    }

    let (n, q, draws) = (500, 0.05, 10_000);
    let sizes: Vec<f64> = (0..draws)
        .map(|_| poisson_lot(n, q, &mut rng).unwrap().len() as f64)
        .collect();
    let mean = sizes.iter().sum::<f64>() / draws as f64;
    let se = (n as f64 * q * (1.0 - q) / draws as f64).sqrt();
    let lot_ok = (mean - n as f64 * q).abs() < 3.0 * se;

    let data: Vec<Point> = (0..30)
        .map(|_| {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = 2.0 * x[0] - x[1] + 0.5 * x[2] + 0.3;
            Point { x, y }
        })
        .collect();
    let mut init = ParamSet::new();
    init.push("w", Array2::zeros((1, 3)), true);
    init.push("b", Array2::zeros((1, 1)), true);
    let steps = 20;
    let cfg = DpSgdConfig::new(f64::INFINITY, 0.0, 1.0, steps, data.len() as f64).unwrap();
    let lr = 0.2;
    let mut state = TrainState::new(init.clone(), 11);
    let mut sampler = ChaCha8Rng::seed_from_u64(5);
    let mut reference = init.to_flat();
    let mut scratch = ChaCha8Rng::seed_from_u64(0);
    let mut sgd_ok = true;
    for _ in 0..steps {
        let lot = poisson_lot(data.len(), 1.0, &mut sampler).unwrap();
        state = dp_sgd_step(state, &lot, &LeastSquares, &data, &cfg, lr)
            .unwrap()
            .0;
        let mut p = init.clone();
        p.load_flat(&reference).unwrap();
        let mut sum = vec![0.0; reference.len()];
        for ex in &data {
            let (_, g) = LeastSquares.loss_and_grad(&p, ex, &mut scratch).unwrap();
            for (s, v) in sum.iter_mut().zip(g) {
                *s += v;
            }
        }
        for (w, s) in reference.iter_mut().zip(&sum) {
            *w -= lr * (s / data.len() as f64);
        }
        sgd_ok &= state
            .params
            .to_flat()
            .iter()
            .zip(&reference)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    }

    report(
        4,
        "DP-SGD mechanism",
        clip_ok && lot_ok && sgd_ok,
        &format!(
            "clip invariant on 1000 gradients: {clip_ok}; lot mean {mean:.3} vs {} (3 SE = {:.3}); σ=0/C=∞/q=1 bitwise SGD: {sgd_ok}",
            n as f64 * q,
            3.0 * se
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. gradient correctness

/// Checks every coordinate against central differences. Returns the worst
/// relative error over coordinates with `|g| ≥ 1e-5`, the number of smaller
/// coordinates (held to the 1e-9 absolute round-off floor instead), and
/// whether all passed.
fn finite_difference_check<F: FnMut(&[f64]) -> f64>(
    analytic: &[f64],
    flat: &[f64],
    mut loss: F,
) -> (f64, usize, bool) {
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut tiny = 0;
    let mut ok = true;
    for i in 0..flat.len() {
        let mut x = flat.to_vec();
        x[i] = flat[i] + h;
        let up = loss(&x);
        x[i] = flat[i] - h;
        let down = loss(&x);
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs());
        let err = (analytic[i] - numeric).abs();
        if scale >= 1e-5 {
            worst = worst.max(err / scale);
        } else {
            tiny += 1;
        }
        ok &= err <= 1e-4 * scale + 1e-9;
    }
    (worst, tiny, ok)
}

#[test]
fn criterion_05_gradient_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ar_cfg = ArConfig {
        vocab_size: 11,
        embedding_dim: 8,
        num_layers: 1,
        num_heads: 2,
        max_sequence_length: 12,
        ..ArConfig::small(11)
    };
    let (ar, ar_params) = ArNet::init(ar_cfg, &mut rng).unwrap();
    let seq = TokenSequence {
        ids: (0..9).map(|_| rng.random_range(1..11)).collect(),
        instruction_length: 3,
    };
    let (_, g) = ar.loss_and_grad(&ar_params, &seq, &mut rng).unwrap();
    let mut probe = ar_params.clone();
    let (ar_worst, ar_tiny, ar_ok) = finite_difference_check(&g, &ar_params.to_flat(), |x| {
        probe.load_flat(x).unwrap();
        ar.nll_loss(&probe, std::slice::from_ref(&seq)).unwrap()[0]
    });

    let mut diff_ok = true;
    let mut diff_worst = 0.0f64;
    let mut diff_tiny = 0;
    for self_conditioning in [false, true] {
        let cfg = DiffusionConfig {
            vocab_size: 11,
            embedding_dim: 8,
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            max_sequence_length: 10,
            target_length: 6,
            diffusion_steps: 20,
            self_conditioning,
            ..DiffusionConfig::small(11)
        };
        let (net, params) = DiffusionNet::init(cfg, &mut rng).unwrap();
        let ids = vec![4, 6, 3, 8, 9, 10, 1, 0];
        let mask: Vec<bool> = (0..8).map(|i| i >= 3).collect();
        let draw = NoiseDraw {
            t: 9,
            noise: Array2::from_shape_simple_fn((8, 8), || rng.sample(StandardNormal)),
            previous: self_conditioning
                .then(|| Array2::from_shape_simple_fn((8, 8), || rng.sample(StandardNormal))),
        };
        let (_, g) = net.loss_and_grad_with(&params, &ids, &mask, &draw).unwrap();
        let mut probe = params.clone();
        let (w, tiny, ok) = finite_difference_check(&g, &params.to_flat(), |x| {
            probe.load_flat(x).unwrap();
            net.loss_parts(&probe, &ids, &mask, &draw).unwrap().total
        });
        diff_ok &= ok;
        diff_worst = diff_worst.max(w);
        diff_tiny += tiny;
    }
    report(
        5,
        "gradient correctness",
        ar_ok && diff_ok,
        &format!(
            "every coordinate, V=11 dim=8: nll worst rel {ar_worst:.1e}, diffusion worst rel {diff_worst:.1e} \
             (|g| < 1e-5 held to 1e-9 absolute: {ar_tiny} nll, {diff_tiny} diffusion)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. diffusion process

struct Oracle {
    embedding: Array2<f64>,
    ids: Vec<usize>,
    condition_ok: std::cell::Cell<bool>,
}

impl Denoiser for Oracle {
    fn embedding(&self) -> &Array2<f64> {
        &self.embedding
    }

    fn predict_z0(
        &self,
        z: &Array2<f64>,
        _t: usize,
        mask: &[bool],
        _prev: Option<&Array2<f64>>,
    ) -> Result<Array2<f64>> {
        let mut out = z.clone();
        for (i, &id) in self.ids.iter().enumerate() {
            if !mask[i] && z.row(i) != self.embedding.row(id) {
                self.condition_ok.set(false);
            }
            out.row_mut(i).assign(&self.embedding.row(id));
        }
        Ok(out)
    }
}

#[test]
fn criterion_06_diffusion_process() {
    let total_steps = 200;
    let schedule = sqrt_schedule(total_steps, 1e-4).unwrap();
    let z0 = ndarray::array![[0.5, -1.0, 2.0], [3.0, 0.0, -0.25]];
    let mask = [true, false];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 10_000;
    let mut moments_ok = true;
    let mut condition_ok = true;
    let mut worst_z = 0.0f64;
    for t in [1, total_steps / 2, total_steps] {
        let a = schedule.alpha_bar(t);
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let z = forward_noising(&z0, t, &schedule, &mask, &mut rng).unwrap();
            condition_ok &= z.row(1) == z0.row(1);
            for j in 0..3 {
                let d = z[[0, j]] - a.sqrt() * z0[[0, j]];
                sum[j] += d;
                sq[j] += d * d;
            }
        }
        let var = 1.0 - a;
        for j in 0..3 {
            let mean = sum[j] / n as f64;
            let second = sq[j] / n as f64;
            // E[d] = 0 with SE √(var/n); E[d²] = var with SE var·√(2/n).
            let z_mean = mean / (var / n as f64).sqrt();
            let z_var = (second - var) / (var * (2.0 / n as f64).sqrt());
            worst_z = worst_z.max(z_mean.abs()).max(z_var.abs());
            moments_ok &= z_mean.abs() < 3.0 && z_var.abs() < 3.0;
        }
    }

    let mut emb_rng = ChaCha8Rng::seed_from_u64(7);
    let embedding =
        Array2::from_shape_simple_fn((11, 8), || emb_rng.sample::<f64, _>(StandardNormal));
    let condition = vec![4, 5, 3];
    let target = vec![7, 10, 6, 1, 0];
    let ids: Vec<usize> = condition.iter().chain(&target).copied().collect();
    let mut recovered = 0;
    for steps in [1, 20, 200] {
        let schedule = sqrt_schedule(steps, 1e-4).unwrap();
        for seed in 0..3 {
            let oracle = Oracle {
                embedding: embedding.clone(),
                ids: ids.clone(),
                condition_ok: std::cell::Cell::new(true),
            };
            let out = reverse_sample(
                &oracle,
                &condition,
                target.len(),
                &schedule,
                true,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();
            condition_ok &= oracle.condition_ok.get();
            recovered += usize::from(out == target);
        }
    }
    report(
        6,
        "diffusion process",
        moments_ok && condition_ok && recovered == 9,
        &format!(
            "moments worst |z| {worst_z:.2} (10⁴ samples, t ∈ {{1, T/2, T}}); condition rows bit-identical: {condition_ok}; oracle recovery {recovered}/9"
        ),
    );
}

// ---------------------------------------------------------------------------
// Shared end-to-end runs (7, 8, 9, 11). One lock serializes them so the
// runtime of each is measured without competition.

struct RunRecord {
    mf1: f64,
    per_seed: Vec<f64>,
    metrics_bytes: Vec<u8>,
    elapsed: Duration,
}

struct Runs {
    dir: TempDir,
    done: BTreeMap<String, RunRecord>,
}

fn runs() -> &'static Mutex<Runs> {
    static RUNS: OnceLock<Mutex<Runs>> = OnceLock::new();
    RUNS.get_or_init(|| {
        Mutex::new(Runs {
            dir: TempDir::new().unwrap(),
            done: BTreeMap::new(),
        })
    })
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn load_config(file: &str, epsilon: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(config_path(file)).unwrap();
    cfg.epsilon = epsilon;
    cfg
}

fn eps_key(e: f64) -> String {
    if e.is_infinite() {
        "inf".into()
    } else {
        format!("{e}")
    }
}

/// Runs `file` at `epsilon` once per test process; `replica` forces a
/// fresh run into a separate directory.
fn run(file: &str, epsilon: f64, replica: u32) -> (f64, Vec<f64>, Vec<u8>, Duration) {
    let mut guard = runs().lock().unwrap_or_else(|e| e.into_inner());
    let key = format!("{file}-{}-{replica}", eps_key(epsilon));
    if !guard.done.contains_key(&key) {
        let mut cfg = load_config(file, epsilon);
        cfg.output_dir = guard.dir.path().join(&key);
        let start = Instant::now();
        let summary = run_experiment(&cfg).unwrap();
        let elapsed = start.elapsed();
        let record = RunRecord {
            mf1: summary.metrics.report.macro_f1.mean,
            per_seed: summary
                .metrics
                .report
                .runs
                .iter()
                .map(|r| r.macro_f1)
                .collect(),
            metrics_bytes: std::fs::read(summary.output_dir.join("metrics.json")).unwrap(),
            elapsed,
        };
        guard.done.insert(key.clone(), record);
    }
    let r = &guard.done[&key];
    (
        r.mf1,
        r.per_seed.clone(),
        r.metrics_bytes.clone(),
        r.elapsed,
    )
}

const AR: &str = "toy_ar.toml";
const DIFFUSION_DP: &str = "toy_diffusion_dp.toml";

#[test]
fn criterion_07_non_private_utility() {
    let cfg = load_config(AR, f64::INFINITY);
    let toy = cfg.data.toy.as_ref().unwrap();
    let train_size = prepare_data(&cfg).unwrap().split.train.len();
    let (mf1, per_seed, _, elapsed) = run(AR, f64::INFINITY, 0);
    let pass = mf1 >= 0.9
        && elapsed < Duration::from_secs(15 * 60)
        && train_size == 2000
        && cfg.seeds.len() == 3;
    report(
        7,
        "end-to-end non-private utility",
        pass,
        &format!(
            "{train_size} train records, {} labels, {} per label generated, MF1 {mf1:.4} (seeds {per_seed:.4?}) in {elapsed:.1?}",
            toy.labels.len(),
            cfg.generation.n_per_label,
        ),
    );
}

#[test]
fn criterion_08_dp_degradation_direction() {
    let (ar_inf, ..) = run(AR, f64::INFINITY, 0);
    let (ar8, s8, ..) = run(AR, 8.0, 0);
    let (ar3, s3, ..) = run(AR, 3.0, 0);
    let (d8, ds8, ..) = run(DIFFUSION_DP, 8.0, 0);
    let (d3, ds3, ..) = run(DIFFUSION_DP, 3.0, 0);
    let checks = [
        ar_inf >= ar8 - 0.05,
        ar8 >= ar3 - 0.05,
        d8 <= ar8 + 0.05,
        d3 <= ar3 + 0.05,
    ];
    report(
        8,
        "DP degradation direction",
        checks.iter().all(|&c| c),
        &format!(
            "AR MF1 ∞ {ar_inf:.4}, ε=8 {ar8:.4} {s8:.3?}, ε=3 {ar3:.4} {s3:.3?}; diffusion ε=8 {d8:.4} {ds8:.3?}, ε=3 {d3:.4} {ds3:.3?}"
        ),
    );
}

#[test]
fn criterion_09_public_pretraining_benefit() {
    let _guard = runs().lock().unwrap_or_else(|e| e.into_inner());
    let mut cfg = load_config(DIFFUSION_DP, 8.0);
    cfg.training.expected_lot_size = 16.0;
    cfg.training.num_steps = Some(500);
    cfg.diffusion.pretrain = Some(PretrainConfig {
        corpus: PublicCorpusConfig {
            path: None,
            toy: Some(ToySpec {
                n_per_label: 1000,
                ..cfg.data.toy.clone().unwrap()
            }),
            seed: 1_000_003,
            private: false,
        },
        span_fraction: 0.5,
        training: dpsynth::dpsgd::TrainSettings {
            expected_lot_size: 32.0,
            epochs: 2,
            learning_rate: 0.03,
            ..Default::default()
        },
    });
    let data = prepare_data(&cfg).unwrap();
    let budget = PrivacyBudget::new(8.0, default_delta(data.split.train.len()).unwrap()).unwrap();
    let mut scratch_cfg = cfg.clone();
    scratch_cfg.diffusion.pretrain = None;
    let model_cfg = cfg.diffusion.model_config(data.vocab.len());
    let validation: Vec<_> = data
        .split
        .validation
        .iter()
        .map(|r| {
            encode_pair(
                &data.vocab,
                &data.template.render(&r.label).unwrap(),
                &r.text,
                &model_cfg,
            )
            .unwrap()
        })
        .collect();
    let val_loss = |run: &dpsynth::experiment::TrainedRun| match &run.generator {
        TrainedGenerator::Diffusion(m) => {
            m.net.validation_loss(&m.params, &validation, 99).unwrap()
        }
        TrainedGenerator::Autoregressive(_) => unreachable!(),
    };
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..3 {
        let pre = train_generator(&cfg, &data, budget, seed).unwrap();
        let scratch = train_generator(&scratch_cfg, &data, budget, seed).unwrap();
        assert!(pre.pretrained.is_some() && scratch.pretrained.is_none());
        assert_eq!(pre.outcome.state.step, 500);
        let (p, s) = (val_loss(&pre), val_loss(&scratch));
        wins += usize::from(p < s);
        pairs.push(format!("seed {seed}: {p:.3} vs {s:.3}"));
    }
    report(
        9,
        "public pretraining benefit",
        wins >= 2,
        &format!(
            "pretrained vs scratch validation loss after 500 DP steps: {}; {wins}/3",
            pairs.join(", ")
        ),
    );
}

#[test]
fn criterion_10_perplexity_sanity() {
    let texts: Vec<String> = ["a b c", "d e", "", "f g h i j k"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut worst = 0.0f64;
    for v in [2, 17, 1000, 50_000] {
        worst = worst.max(rel(
            perplexity(&UniformScorer { vocab_size: v }, &texts).unwrap(),
            v as f64,
        ));
    }
    let delta = default_delta(42_175).unwrap();
    let pass = worst <= 1e-6 && rel(delta, 2.3711e-6) <= 1e-4;
    report(
        10,
        "perplexity sanity",
        pass,
        &format!("uniform PPL worst rel err {worst:.1e}; δ(42,175) = {delta:.6e}"),
    );
}

#[test]
fn criterion_11_determinism() {
    let (_, _, a, _) = run(AR, f64::INFINITY, 0);
    let (_, _, b, _) = run(AR, f64::INFINITY, 1);
    let (_, _, c, _) = run(AR, 8.0, 0);
    let (_, _, d, _) = run(AR, 8.0, 1);
    let pass = a == b && c == d;
    report(
        11,
        "determinism",
        pass,
        &format!(
            "metrics.json byte-identical on rerun: ε=∞ {}, ε=8 {}",
            a == b,
            c == d
        ),
    );
}
