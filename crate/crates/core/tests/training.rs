mod common;

use dualattn::biasing::BiasMode;
use dualattn::checkpoint;
use dualattn::datagen::{generate_corpus, CorpusSpec};
use dualattn::error::Error;
use dualattn::experiment::evaluate;
use dualattn::model::{Model, ModelConfig};
use dualattn::nn::{Gradients, Init, ParamStore, Tape, Tensor};
use dualattn::training::{
    adam_step, apply_freeze_manifest, finetune_biasing, matches_pattern, pretrain, sgd_step, AdamState, Optimizer,
    TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quadratic_store() -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    store.register("x", &[3], Init::Uniform, &mut rng).unwrap();
    store
}

const TARGET: [f64; 3] = [1.5, -2.0, 0.25];

/// `Σ (x − c)²` and its tape gradient.
fn quadratic_grads(store: &ParamStore) -> (f64, Gradients) {
    let mut tape = Tape::new(store);
    let x = tape.param(store.id("x").unwrap());
    let c = tape.constant(Tensor::vector(TARGET.iter().map(|v| -v).collect()));
    let d = tape.add(x, c).unwrap();
    let sq = tape.mul(d, d).unwrap();
    let loss = tape.sum(sq);
    let value = tape.value(loss).data()[0];
    (value, tape.backward(loss).unwrap())
}

#[test]
fn sgd_reaches_quadratic_minimum() {
    let mut store = quadratic_store();
    for _ in 0..1000 {
        let (_, g) = quadratic_grads(&store);
        sgd_step(&mut store, &g, 0.1);
    }
    for (x, c) in store.by_name("x").unwrap().tensor.data().iter().zip(TARGET) {
        assert!((x - c).abs() < 1e-6);
    }
}

#[test]
fn adam_reaches_quadratic_minimum() {
    let mut store = quadratic_store();
    let mut state = AdamState::new(&store);
    for _ in 0..3000 {
        let (_, g) = quadratic_grads(&store);
        adam_step(&mut store, &g, 0.01, &mut state);
    }
    for (x, c) in store.by_name("x").unwrap().tensor.data().iter().zip(TARGET) {
        assert!((x - c).abs() < 1e-4, "{x} vs {c}");
    }
}

#[test]
fn zero_and_frozen_updates_leave_parameters() {
    let mut store = quadratic_store();
    let before = store.by_name("x").unwrap().tensor.clone();
    let zeros = Gradients::zeros_like(&store);
    sgd_step(&mut store, &zeros, 0.1);
    assert_eq!(store.by_name("x").unwrap().tensor, before);
    let (_, g) = quadratic_grads(&store);
    let id = store.id("x").unwrap();
    store.get_mut(id).frozen = true;
    sgd_step(&mut store, &g, 0.1);
    let mut state = AdamState::new(&store);
    adam_step(&mut store, &g, 0.1, &mut state);
    assert_eq!(store.by_name("x").unwrap().tensor, before);
}

#[test]
fn freeze_manifest_must_cover_exactly_the_transducer() {
    let mut m = Model::new(&common::tiny_model_config(BiasMode::DualAttn), 0).unwrap();
    assert!(matches_pattern("transducer.joint.out.w", "transducer.*"));
    assert!(!matches_pattern("biasing.ctx.embed", "transducer.*"));
    assert!(matches_pattern("a.b", "a.b") && !matches_pattern("a.bc", "a.b"));
    apply_freeze_manifest(&mut m.store, &["transducer.*".to_string()]).unwrap();
    assert!(m.store.iter().all(|p| p.frozen == p.name.starts_with("transducer.")));
    let partial = ["transducer.enc_small.*".to_string()];
    assert!(matches!(apply_freeze_manifest(&mut m.store, &partial), Err(Error::Manifest(_))));
    let greedy = ["transducer.*".to_string(), "biasing.ctx.*".to_string()];
    assert!(matches!(apply_freeze_manifest(&mut m.store, &greedy), Err(Error::Manifest(_))));
}

fn one_utterance_spec() -> CorpusSpec {
    CorpusSpec { n_train: 1, n_held_out: 1, ..CorpusSpec::default() }
}

#[test]
fn overfits_a_single_utterance() {
    let corpus = generate_corpus(&one_utterance_spec()).unwrap();
    let mut cfg = ModelConfig::default();
    cfg.biasing.mode = BiasMode::PretrainedBase;
    let mut m = Model::new(&cfg, 1).unwrap();
    let tc = TrainConfig { learning_rate: 2.0, epochs: 200, batch_size: 1, ..TrainConfig::default() };
    let log = pretrain(&mut m, &corpus.train, &tc).unwrap();
    assert_eq!(log.steps, 200);
    let last = *log.epoch_loss.last().unwrap();
    assert!(last < 0.1, "final loss {last} nats/label");
    assert!(last < log.epoch_loss[0]);
}

#[test]
fn training_is_deterministic() {
    let spec = CorpusSpec { n_train: 12, n_held_out: 2, feat_dim: 3, ..CorpusSpec::default() };
    let corpus = generate_corpus(&spec).unwrap();
    let tc = TrainConfig { learning_rate: 0.01, epochs: 2, batch_size: 4, optimizer: Optimizer::Adam, catalog_dropout: 0.5, ..TrainConfig::default() };
    let run = || {
        let mut pre = Model::new(&common::tiny_model_config(BiasMode::PretrainedBase), 2).unwrap();
        pretrain(&mut pre, &corpus.train, &tc).unwrap();
        let mut ft = Model::from_pretrained(&pre, &common::tiny_model_config(BiasMode::DualAttn), 2).unwrap();
        finetune_biasing(&mut ft, &corpus.train, &spec.wake_words, &tc).unwrap();
        (checkpoint::to_bytes(&pre).unwrap(), checkpoint::to_bytes(&ft).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn finetuning_leaves_frozen_tensors_bit_identical() {
    let spec = CorpusSpec { n_train: 16, n_held_out: 2, feat_dim: 3, ..CorpusSpec::default() };
    let corpus = generate_corpus(&spec).unwrap();
    let pre = Model::new(&common::tiny_model_config(BiasMode::PretrainedBase), 3).unwrap();
    let mut ft = Model::from_pretrained(&pre, &common::tiny_model_config(BiasMode::DualAttn), 3).unwrap();
    let biasing_before: Vec<Tensor> = ft.store.iter().filter(|p| !p.frozen && p.name.starts_with("biasing.")).map(|p| p.tensor.clone()).collect();
    let tc = TrainConfig { learning_rate: 0.05, epochs: 2, batch_size: 4, ..TrainConfig::default() };
    finetune_biasing(&mut ft, &corpus.train, &spec.wake_words, &tc).unwrap();
    for p in pre.store.iter() {
        let q = ft.store.by_name(&p.name).unwrap();
        assert!(q.frozen);
        assert_eq!(p.tensor.to_le_bytes(), q.tensor.to_le_bytes(), "{}", p.name);
    }
    let biasing_after: Vec<Tensor> = ft.store.iter().filter(|p| p.name.starts_with("biasing.")).map(|p| p.tensor.clone()).collect();
    assert_ne!(biasing_before, biasing_after);

    let mut plain = pre.clone();
    assert!(finetune_biasing(&mut plain, &corpus.train, &spec.wake_words, &tc).is_err());
}

#[test]
fn pretraining_beats_an_untrained_model() {
    let spec = CorpusSpec { n_train: 300, n_held_out: 40, ..CorpusSpec::default() };
    let corpus = generate_corpus(&spec).unwrap();
    let mut cfg = ModelConfig::default();
    cfg.biasing.mode = BiasMode::PretrainedBase;
    let untrained = Model::new(&cfg, 4).unwrap();
    let mut m = untrained.clone();
    let tc = TrainConfig { learning_rate: 1.0, epochs: 6, batch_size: 2, ..TrainConfig::default() };
    let log = pretrain(&mut m, &corpus.train, &tc).unwrap();
    assert!(log.epoch_loss[5] < log.epoch_loss[0]);
    let before = evaluate(&untrained, &corpus.held_out, &spec, 4).unwrap();
    let after = evaluate(&m, &corpus.held_out, &spec, 4).unwrap();
    assert!(after.wer < before.wer, "{} vs {}", after.wer, before.wer);
}

#[test]
fn non_finite_loss_is_reported_as_divergence() {
    let spec = CorpusSpec { n_train: 2, n_held_out: 1, feat_dim: 3, ..CorpusSpec::default() };
    let mut corpus = generate_corpus(&spec).unwrap();
    corpus.train[1].frames.data_mut()[0] = f64::NAN;
    let mut m = Model::new(&common::tiny_model_config(BiasMode::PretrainedBase), 5).unwrap();
    let tc = TrainConfig { epochs: 1, batch_size: 1, ..TrainConfig::default() };
    assert!(matches!(pretrain(&mut m, &corpus.train, &tc), Err(Error::Divergence { .. })));
    assert!(pretrain(&mut m, &[], &tc).is_err());
    let bad = TrainConfig { catalog_dropout: 1.0, ..TrainConfig::default() };
    assert!(bad.validate().is_err());
}
