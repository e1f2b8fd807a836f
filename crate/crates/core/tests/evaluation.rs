use distemb::eval::*;
use distemb::model::{Method, Model, ModelConfig, NetworkConfig, Representation};
use distemb::selftest::random_dataset;
use distemb::wasserstein::{wasserstein_distance, DistanceConfig};
use proptest::prelude::*;

fn all_scenarios(repeats: usize, seed: u64) -> ProtocolConfig {
    ProtocolConfig {
        scenarios: vec![Scenario::Verification, Scenario::Identification, Scenario::Imposter],
        ns: (1..=HELD_OUT).collect(),
        fractions: None,
        repeats,
        seed,
    }
}

#[test]
fn oracle_backend_scores_perfectly() {
    let data = random_dataset(8, 8, 4, 1, 0);
    let report = run_protocol(&data, &OracleBackend, &all_scenarios(3, 1)).unwrap();
    assert!(!report.cells.is_empty());
    for c in &report.cells {
        assert_eq!(c.mean, 1.0, "{} n={} fraction={}", c.scenario, c.n, c.enrolled_fraction);
    }
    assert!(!report.reduced_holdout);
}

#[test]
fn random_backend_identifies_at_chance() {
    let data = random_dataset(20, 8, 4, 1, 0);
    let cfg = ProtocolConfig { scenarios: vec![Scenario::Identification], ns: vec![1], fractions: Some(vec![1.0]), repeats: 10, seed: 3 };
    let backend = RandomBackend { seed: 11 };
    let cell = &run_protocol(&data, &backend, &cfg).unwrap().cells[0];
    let chance = 1.0 / data.n_subjects() as f64;
    assert!((cell.mean - chance).abs() <= 3.0 * cell.std_error, "accuracy {} ± {} vs {}", cell.mean, cell.std_error, chance);
}

/// Verification AUC recomputed from the split by an exhaustive pair scan.
fn brute_force_verification(data: &distemb::Dataset, dist: &DistanceMatrix, split: &EnrollmentSplit, n: usize) -> f64 {
    let s = data.n_subjects();
    let (mut genuine, mut imposter) = (Vec::new(), Vec::new());
    for i in 0..s {
        for episode in combinations(&split.observed[i], n) {
            for j in 0..s {
                let mut total = 0.0;
                for &o in &episode {
                    let mut best = f64::INFINITY;
                    for &e in &split.enrolled[j] {
                        best = best.min(dist.get(i, o, j, e));
                    }
                    total += best;
                }
                let d = total / n as f64;
                if i == j { genuine.push(d) } else { imposter.push(d) }
            }
        }
    }
    let mut wins = 0.0;
    for g in &genuine {
        for m in &imposter {
            wins += if g < m { 1.0 } else if g == m { 0.5 } else { 0.0 };
        }
    }
    wins / (genuine.len() * imposter.len()) as f64
}

#[test]
fn verification_matches_an_exhaustive_pair_scan() {
    let data = random_dataset(5, 7, 4, 1, 2);
    let dist = RandomBackend { seed: 4 }.matrix(&data).unwrap();
    for n in [1, 2, 3] {
        let cfg = ProtocolConfig { scenarios: vec![Scenario::Verification], ns: vec![n], fractions: Some(vec![1.0]), repeats: 2, seed: 9 };
        let report = run_protocol_on(&data, &dist, &cfg).unwrap();
        for (r, &value) in report.cells[0].values.iter().enumerate() {
            let split = EnrollmentSplit::draw(&data, 9, r).unwrap();
            let expected = brute_force_verification(&data, &dist, &split, n);
            assert!((value - expected).abs() <= 1e-12, "n={} repeat {}: {} vs {}", n, r, value, expected);
        }
    }
}

#[test]
fn report_conventions() {
    let data = random_dataset(6, 6, 4, 1, 0);
    let one = ProtocolConfig { repeats: 1, ..ProtocolConfig::default() };
    let report = run_protocol(&data, &RandomBackend { seed: 0 }, &one).unwrap();
    assert_eq!(report.cells[0].std_error, 0.0);

    let cfg = all_scenarios(4, 5);
    let a = run_protocol(&data, &RandomBackend { seed: 1 }, &cfg).unwrap();
    let b = run_protocol(&data, &RandomBackend { seed: 1 }, &cfg).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.to_json(), b.to_json());
    assert!(a.to_csv().starts_with("scenario,n,enrolled_fraction,repeat,metric,value\n"));
    for c in &a.cells {
        assert!(c.values.iter().all(|v| (0.0..=1.0).contains(v)));
        for curve in &c.roc {
            assert!(curve.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
        }
    }
}

#[test]
fn short_subjects_reduce_the_holdout_and_are_flagged() {
    let data = random_dataset(4, 4, 4, 1, 0);
    let cfg = ProtocolConfig { ns: vec![3], ..ProtocolConfig::default() };
    let report = run_protocol(&data, &OracleBackend, &cfg).unwrap();
    assert!(report.reduced_holdout);
    let too_many = ProtocolConfig { ns: vec![4], ..ProtocolConfig::default() };
    assert!(matches!(run_protocol(&data, &OracleBackend, &too_many), Err(EvalError::NTooLarge { .. })));
}

#[test]
fn single_enrolled_subject_is_a_flagged_degenerate_case() {
    let data = random_dataset(4, 6, 4, 1, 0);
    let cfg = ProtocolConfig { scenarios: vec![Scenario::Identification], ns: vec![1], fractions: Some(vec![0.1]), repeats: 2, seed: 0 };
    let cell = &run_protocol(&data, &RandomBackend { seed: 2 }, &cfg).unwrap().cells[0];
    assert!(cell.degenerate);
    assert_eq!(cell.mean, 1.0);
}

#[test]
fn inverted_scores_give_zero_auc() {
    assert_eq!(rank_auc(&[0.6, 0.7, 0.9], &[0.1, 0.2]).unwrap(), 0.0);
    assert_eq!(rank_auc(&[0.3, 0.5], &[0.5, 0.3]).unwrap(), 0.5);
}

#[test]
fn model_backend_agrees_with_direct_distances() {
    let data = random_dataset(3, 2, 24, 2, 1);
    for method in [Method::QuantileWasserstein, Method::MaxNpl] {
        let config = ModelConfig { network: NetworkConfig::tiny(2).with_seed(4), method, m: 5, distance: DistanceConfig::new(2).unwrap(), n_classes: 3 };
        let model = Model::init(config).unwrap();
        let backend = ModelBackend { model: &model };
        let matrix = backend.matrix(&data).unwrap();
        let rec = |s: usize, q: usize| model.represent(&data.subjects()[s].sequences[q].input().unwrap()).unwrap();
        let (a, b) = (rec(0, 1), rec(2, 0));
        let direct = match (&a, &b) {
            (Representation::Quantile(x), Representation::Quantile(y)) => wasserstein_distance(x, y, DistanceConfig::new(2).unwrap()).unwrap(),
            (Representation::Vector(x), Representation::Vector(y)) => -distemb::model::cosine_similarity(x, y),
            _ => unreachable!(),
        };
        assert_eq!(matrix.get(0, 1, 2, 0), direct);
        assert_eq!(matrix.get(2, 0, 0, 1), direct);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn enrolling_more_never_raises_the_min_score(scores in prop::collection::vec(0.0f64..10.0, 2..20), cut in 1usize..19) {
        let cut = cut.min(scores.len() - 1);
        let per_subject: Vec<f64> = scores.iter().map(|&s| subject_distance(&[vec![s, s + 1.0]]).unwrap()).collect();
        let min_of = |set: &[f64]| set.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!(min_of(&per_subject) <= min_of(&per_subject[..cut]));
    }

    #[test]
    fn subject_distance_is_mean_of_row_minima(rows in prop::collection::vec(prop::collection::vec(0.0f64..5.0, 1..6), 1..6)) {
        let expected = rows.iter().map(|r| r.iter().copied().fold(f64::INFINITY, f64::min)).sum::<f64>() / rows.len() as f64;
        prop_assert!((subject_distance(&rows).unwrap() - expected).abs() <= 1e-12);
    }
}
