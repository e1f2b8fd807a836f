use distemb::checkpoint;
use distemb::data::{generate_synthetic, split_by_subject, SynthSpec};
use distemb::losses::sample_npair_batch;
use distemb::model::{Method, NetworkConfig, Representation};
use distemb::selftest::random_dataset;
use distemb::train::{batch_loss, train, validation_auc, validation_split, TrainConfig, TrainState};
use distemb::Dataset;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn synthetic_train_side() -> Dataset {
    let data = generate_synthetic(&SynthSpec::default()).unwrap();
    split_by_subject(&data, 20.0 / 30.0, 0).unwrap().0
}

fn quick_config(method: Method, iterations: u64) -> TrainConfig {
    TrainConfig { iterations, batch_n: 3, m: 4, checkpoint_interval: 5, learning_rate: 1e-3, ..TrainConfig::new(method, NetworkConfig::tiny(1)) }
}

fn quick_data() -> Dataset {
    random_dataset(12, 3, 40, 1, 5)
}

#[test]
fn desk_run_halves_the_training_loss() {
    let data = synthetic_train_side();
    let cfg = TrainConfig::desk(Method::QuantileWasserstein, 1);
    let out = train(&data, &cfg, None, |_| {}).unwrap();
    assert!(out.error.is_none(), "{:?}", out.error);
    assert_eq!(out.trace.len(), 2000);
    assert!(out.trace.iter().all(|r| r.loss.is_finite()));
    // Single batches are noisy, so the end of the run is averaged.
    let initial = out.trace[0].loss;
    let tail = &out.trace[out.trace.len() - 100..];
    let fin = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64;
    assert!(fin <= 0.5 * initial, "initial {} final {}", initial, fin);
}

#[test]
fn max_pool_variant_trains_to_a_vector_model() {
    let data = quick_data();
    let out = train(&data, &quick_config(Method::MaxNpl, 10), None, |_| {}).unwrap();
    assert!(out.error.is_none());
    let model = out.best.model;
    assert_eq!(model.method(), Method::MaxNpl);
    let input = data.subjects()[0].sequences[0].input().unwrap();
    match model.represent(&input).unwrap() {
        Representation::Vector(v) => assert_eq!(v.len(), model.config().network.k()),
        other => panic!("expected a vector, got {:?}", other),
    }
}

#[test]
fn every_method_runs() {
    let data = quick_data();
    for method in Method::ALL {
        let out = train(&data, &quick_config(method, 6), None, |_| {}).unwrap();
        assert!(out.error.is_none(), "{}: {:?}", method, out.error);
        assert_eq!(out.trace.len(), 6);
    }
}

#[test]
fn each_batch_runs_two_forward_passes_per_pair() {
    let data = quick_data();
    let cfg = quick_config(Method::QuantileWasserstein, 7);
    let out = train(&data, &cfg, None, |_| {}).unwrap();
    assert_eq!(out.forward_passes, 7 * 2 * cfg.batch_n);

    let model = out.last.model;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in 2..=5 {
        let batch = sample_npair_batch(&data, n, &mut rng).unwrap();
        assert_eq!(batch_loss(&model, &data, &batch).unwrap().forward_passes, 2 * n);
    }
}

#[test]
fn identical_seeds_give_identical_traces() {
    let data = quick_data();
    let cfg = quick_config(Method::QuantileWasserstein, 15);
    let bits = |cfg: &TrainConfig| {
        let out = train(&data, cfg, None, |_| {}).unwrap();
        out.trace.iter().map(|r| (r.iter, r.loss.to_bits(), r.val_auc.map(f64::to_bits))).collect::<Vec<_>>()
    };
    assert_eq!(bits(&cfg), bits(&cfg));
    assert_ne!(bits(&cfg), bits(&TrainConfig { seed: 1, ..cfg.clone() }));
}

#[test]
fn resuming_continues_the_same_run() {
    let data = quick_data();
    let full = train(&data, &quick_config(Method::QuantileNpl, 12), None, |_| {}).unwrap();
    let first = train(&data, &quick_config(Method::QuantileNpl, 5), None, |_| {}).unwrap();
    let bytes = checkpoint::encode(&first.last.model, Some(&first.last.adam));
    let (model, adam) = checkpoint::decode(&bytes).unwrap();
    let rest = train(&data, &quick_config(Method::QuantileNpl, 12), Some(TrainState { model, adam: adam.unwrap() }), |_| {}).unwrap();
    let joined: Vec<_> = first.trace.iter().chain(&rest.trace).map(|r| (r.iter, r.loss.to_bits())).collect();
    let straight: Vec<_> = full.trace.iter().map(|r| (r.iter, r.loss.to_bits())).collect();
    assert_eq!(joined, straight);
    assert_eq!(rest.last.model, full.last.model);
}

#[test]
fn checkpoint_round_trip_reproduces_validation_auc() {
    let data = quick_data();
    let cfg = quick_config(Method::QuantileWasserstein, 10);
    let out = train(&data, &cfg, None, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, &out.best).unwrap();
    let (model, adam) = checkpoint::load(&path).unwrap();
    assert_eq!(adam.unwrap(), out.best.adam);
    let (_, val) = validation_split(&data, cfg.validation_fraction, cfg.seed).unwrap();
    let val = val.unwrap();
    let before = validation_auc(&out.best.model, &val, cfg.seed).unwrap();
    let after = validation_auc(&model, &val, cfg.seed).unwrap();
    assert_eq!(before.to_bits(), after.to_bits());
    assert_eq!(Some(before), out.best_val_auc);
}

#[test]
fn mismatched_resume_and_short_sequences_are_errors() {
    let data = quick_data();
    let first = train(&data, &quick_config(Method::MaxNpl, 2), None, |_| {}).unwrap();
    assert!(train(&data, &quick_config(Method::QuantileNpl, 4), Some(first.last), |_| {}).is_err());

    let short = random_dataset(6, 3, 3, 1, 0);
    assert!(train(&short, &quick_config(Method::QuantileWasserstein, 2), None, |_| {}).is_err());
}
