//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use distemb::data::{generate_synthetic, split_by_subject, SynthSpec};
use distemb::eval::{run_protocol, ModelBackend, OracleBackend, ProtocolConfig, RandomBackend, Scenario};
use distemb::losses::{npair_hinge, npair_loss};
use distemb::model::Method;
use distemb::quantile::{embed_values, AlphaParams};
use distemb::selftest::{closed_form_vs_quadrature, model_grad_check, quantile_convergence, random_alphas, random_embedding};
use distemb::tape::softplus;
use distemb::train::{train, TrainConfig, TrainOutcome};
use distemb::wasserstein::{js_divergence, segment_integral, wasserstein_distance, DistanceConfig};
use distemb::Dataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Verdict);

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn closed_form() -> Verdict {
    let err = closed_form_vs_quadrature(1000, 1_000_000, 2024, segment_integral);
    verdict(err <= 1e-6, format!("max relative error {:.2e} on 1000 pairs (limit 1e-6)", err))
}

fn gradients() -> Verdict {
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for method in Method::ALL {
        match model_grad_check(method, 0, 1e-5) {
            Ok(r) => {
                worst = worst.max(r.max_rel_error);
                parts.push(format!("{} {:.1e}", method, r.max_rel_error));
            }
            Err(e) => return verdict(false, format!("{}: {}", method, e)),
        }
    }
    verdict(worst <= 1e-4, format!("max relative error {} (limit 1e-4)", parts.join(", ")))
}

fn quantile_fidelity() -> Verdict {
    let gap = quantile_convergence(100_000, 16, 0);
    let passing = (0..20).filter(|&s| quantile_convergence(100_000, 16, s) <= 0.01).count();
    verdict(gap <= 0.01, format!("max gap {:.4} at seed 0 (limit 0.01); {} of seeds 0..20 within the limit", gap, passing))
}

fn loss_identities() -> Verdict {
    let mut worst = 0.0f64;
    for n in 2..=10 {
        let dist = vec![vec![0.7; n]; n];
        let expected = (n * (n - 1)) as f64 * std::f64::consts::LN_2;
        worst = worst.max((npair_loss(&dist).unwrap() - expected).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    for _ in 0..10_000 {
        let x: f64 = rng.random_range(-50.0..50.0);
        violations += usize::from(softplus(x) < x.max(0.0));
    }
    for _ in 0..1000 {
        let n = rng.random_range(2..6);
        let dist: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(0.0..5.0)).collect()).collect();
        violations += usize::from(npair_loss(&dist).unwrap() < npair_hinge(&dist).unwrap());
    }
    verdict(worst <= 1e-12 && violations == 0, format!("equal-distance error {:.1e} (limit 1e-12), softplus < hinge in {} cases", worst, violations))
}

fn js_versus_wasserstein() -> Verdict {
    let bins = 16;
    let alphas = AlphaParams::uniform(8).unwrap();
    let narrow: Vec<f64> = (0..50).map(|i| 0.4 * i as f64 / 49.0).collect();
    let base = embed_values(std::slice::from_ref(&narrow), &alphas).unwrap();
    let mut js = Vec::new();
    let mut w = Vec::new();
    for gap in [1usize, 2, 5, 10] {
        let (mut h1, mut h2) = (vec![0.0; bins], vec![0.0; bins]);
        h1[0] = 1.0;
        h2[gap] = 1.0;
        js.push(js_divergence(&h1, &h2).unwrap());
        let shifted: Vec<f64> = narrow.iter().map(|x| x + gap as f64).collect();
        w.push(wasserstein_distance(&base, &embed_values(&[shifted], &alphas).unwrap(), DistanceConfig::default()).unwrap());
    }
    let js_flat = js.iter().all(|v| (v - std::f64::consts::LN_2).abs() <= 1e-12);
    let w_increasing = w.windows(2).all(|p| p[1] > p[0]);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{:.4}", x)).collect::<Vec<_>>().join(" ");
    verdict(js_flat && w_increasing, format!("gaps 1 2 5 10: JS {} ; W1 {}", fmt(&js), fmt(&w)))
}

fn metric_properties() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut asym, mut tri) = (0.0f64, f64::NEG_INFINITY);
    for i in 0..10_000 {
        let cfg = DistanceConfig::new(1 + (i % 2) as u32).unwrap();
        let k = rng.random_range(1..=8);
        let m = rng.random_range(1..=16);
        let alphas = random_alphas(&mut rng, m);
        let [x, y, z] = [0, 1, 2].map(|_| random_embedding(&mut rng, k, &alphas));
        let d = |a, b| wasserstein_distance(a, b, cfg).unwrap();
        asym = asym.max((d(&x, &y) - d(&y, &x)).abs());
        tri = tri.max(d(&x, &z) - d(&x, &y) - d(&y, &z));
    }
    let mut shift_err = 0.0f64;
    for _ in 0..1000 {
        let m = rng.random_range(1..=16);
        let alphas = random_alphas(&mut rng, m);
        let xs: Vec<f64> = (0..rng.random_range(1..40)).map(|_| rng.random_range(-3.0..3.0)).collect();
        let c: f64 = rng.random_range(-10.0..10.0);
        let moved: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let e = embed_values(&[xs], &alphas).unwrap();
        let f = embed_values(&[moved], &alphas).unwrap();
        let dist = wasserstein_distance(&e, &f, DistanceConfig::default()).unwrap();
        shift_err = shift_err.max((dist - c.abs()).abs());
    }
    verdict(
        asym <= 1e-9 && tri <= 1e-9 && shift_err <= 1e-9,
        format!("asymmetry {:.1e}, worst triangle excess {:.1e}, translation error {:.1e} (limits 1e-9)", asym, tri.max(0.0), shift_err),
    )
}

fn synthetic_split() -> (Dataset, Dataset) {
    let data = generate_synthetic(&SynthSpec::default()).unwrap();
    split_by_subject(&data, 20.0 / 30.0, 0).unwrap()
}

fn verification(model_outcome: &TrainOutcome, test: &Dataset) -> (f64, f64, usize) {
    let cfg = ProtocolConfig { scenarios: vec![Scenario::Verification], ns: vec![1, 5], fractions: Some(vec![1.0]), repeats: 10, seed: 0 };
    let report = run_protocol(test, &ModelBackend { model: &model_outcome.best.model }, &cfg).unwrap();
    let (one, five) = (&report.cells[0], &report.cells[1]);
    let violations = one.values.iter().zip(&five.values).filter(|(a, b)| b < a).count();
    (one.mean, five.mean, violations)
}

fn end_to_end() -> Verdict {
    let start = Instant::now();
    let (train_set, test) = synthetic_split();
    let run = |method| train(&train_set, &TrainConfig::desk(method, 1), None, |_| {}).unwrap();
    let qw = run(Method::QuantileWasserstein);
    let max = run(Method::MaxNpl);
    if qw.error.is_some() || max.error.is_some() {
        return verdict(false, format!("training stopped: {:?} / {:?}", qw.error, max.error));
    }
    let (qw1, qw5, violations) = verification(&qw, &test);
    let (max1, _, _) = verification(&max, &test);
    let elapsed = start.elapsed();
    let passed = qw1 >= 0.90 && qw1 - max1 >= 0.05 && violations <= 1 && elapsed <= Duration::from_secs(30 * 60);
    verdict(
        passed,
        format!(
            "AUC n=1: quantile-wasserstein {:.3}, max-npl {:.3} (margin {:.3}); quantile-wasserstein n=5 {:.3} with n=5 < n=1 in {} of 10 repeats; {:.0} s",
            qw1,
            max1,
            qw1 - max1,
            qw5,
            violations,
            elapsed.as_secs_f64()
        ),
    )
}

fn protocol_sanity() -> Verdict {
    let (_, test) = synthetic_split();
    let cfg = ProtocolConfig {
        scenarios: vec![Scenario::Verification, Scenario::Identification, Scenario::Imposter],
        ns: vec![1],
        fractions: Some(vec![1.0]),
        repeats: 10,
        seed: 0,
    };
    let oracle = run_protocol(&test, &OracleBackend, &cfg).unwrap();
    let perfect = oracle.cells.iter().all(|c| c.mean == 1.0);
    let id = ProtocolConfig { scenarios: vec![Scenario::Identification], ..cfg };
    let random = &run_protocol(&test, &RandomBackend { seed: 0 }, &id).unwrap().cells[0];
    let chance = 1.0 / test.n_subjects() as f64;
    let near_chance = (random.mean - chance).abs() <= 3.0 * random.std_error;
    verdict(
        perfect && near_chance,
        format!(
            "oracle v/id/imp {}; random identification {:.4} ± {:.4} vs 1/S = {:.4}",
            oracle.cells.iter().map(|c| format!("{}", c.mean)).collect::<Vec<_>>().join("/"),
            random.mean,
            random.std_error,
            chance
        ),
    )
}

fn determinism() -> Verdict {
    let (train_set, test) = synthetic_split();
    let cfg = TrainConfig { iterations: 60, checkpoint_interval: 20, ..TrainConfig::desk(Method::QuantileWasserstein, 1) };
    let once = || {
        let out = train(&train_set, &cfg, None, |_| {}).unwrap();
        let trace: Vec<_> = out.trace.iter().map(|r| (r.iter, r.loss.to_bits(), r.val_auc.map(f64::to_bits))).collect();
        let pc = ProtocolConfig { scenarios: vec![Scenario::Verification, Scenario::Identification, Scenario::Imposter], ns: vec![1, 2], fractions: None, repeats: 3, seed: 1 };
        let report = run_protocol(&test, &ModelBackend { model: &out.best.model }, &pc).unwrap();
        (trace, report.to_csv(), report.to_json())
    };
    let (a, b) = (once(), once());
    verdict(a == b, format!("two runs: traces {}, reports {}", if a.0 == b.0 { "identical" } else { "differ" }, if (&a.1, &a.2) == (&b.1, &b.2) { "identical" } else { "differ" }))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("closed-form distance vs quadrature", closed_form),
        ("end-to-end gradient check", gradients),
        ("quantile fidelity", quantile_fidelity),
        ("loss identities", loss_identities),
        ("JS vs Wasserstein on disjoint supports", js_versus_wasserstein),
        ("metric properties", metric_properties),
        ("synthetic end-to-end", end_to_end),
        ("protocol sanity", protocol_sanity),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = check();
        failed += usize::from(!v.passed);
        println!("[{}] {}. {}: {} ({:.1} s)", if v.passed { "PASS" } else { "FAIL" }, i + 1, name, v.detail, start.elapsed().as_secs_f64());
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
