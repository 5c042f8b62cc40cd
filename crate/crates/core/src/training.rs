//! Transducer pretraining, then biasing fine-tuning with the transducer
//! frozen. SGD or Adam, per-utterance gradients averaged over a batch.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::biasing::CatalogEntry;
use crate::datagen::Utterance;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Gradients, ParamStore, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Tensor-name patterns frozen during fine-tuning; `*` matches any suffix.
    pub freeze_manifest: Vec<String>,
    pub optimizer: Optimizer,
    /// Fine-tuning only: probability of hiding each catalog entry the
    /// utterance does not speak, redrawn every time the utterance is visited.
    pub catalog_dropout: f64,
    pub log_every_epoch: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    /// Adam with β = (0.9, 0.999), ε = 1e-8.
    Adam,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 6,
            batch_size: 8,
            seed: 3,
            clip_norm: 5.0,
            freeze_manifest: vec!["transducer.*".to_string()],
            optimizer: Optimizer::Sgd,
            catalog_dropout: 0.0,
            log_every_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.clip_norm < 0.0 {
            return Err(Error::Config("learning_rate and batch_size must be positive, clip_norm non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.catalog_dropout) {
            return Err(Error::Config("catalog_dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `p ← p − lr·g` for every unfrozen tensor.
pub fn sgd_step(store: &mut ParamStore, grads: &Gradients, lr: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        let p = store.get_mut(id);
        if p.frozen {
            continue;
        }
        for (w, g) in p.tensor.data_mut().iter_mut().zip(grads.get(id).data()) {
            *w -= lr * g;
        }
    }
}

/// First and second moment estimates for [`adam_step`].
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self { m: Gradients::zeros_like(store), v: Gradients::zeros_like(store), t: 0 }
    }
}

/// One bias-corrected Adam update of every unfrozen tensor.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, lr: f64, state: &mut AdamState) {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    state.t += 1;
    let c1 = 1.0 - B1.powi(state.t);
    let c2 = 1.0 - B2.powi(state.t);
    for id in store.ids().collect::<Vec<_>>() {
        let p = store.get_mut(id);
        if p.frozen {
            continue;
        }
        let m = state.m.get_mut(id).data_mut();
        let v = state.v.get_mut(id).data_mut();
        for (((w, g), m), v) in p.tensor.data_mut().iter_mut().zip(grads.get(id).data()).zip(m).zip(v) {
            *m = B1 * *m + (1.0 - B1) * g;
            *v = B2 * *v + (1.0 - B2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
        }
    }
}

/// Rescales `grads` so its global norm is at most `max_norm`.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) {
    let n = grads.norm();
    if max_norm > 0.0 && n > max_norm {
        grads.scale(max_norm / n);
    }
}

pub fn matches_pattern(name: &str, pattern: &str) -> bool {
    match pattern.strip_suffix('*') {
        Some(prefix) => name.starts_with(prefix),
        None => name == pattern,
    }
}

/// Freezes every tensor named by the manifest. The manifest must cover all
/// transducer tensors and none of the biasing tensors.
pub fn apply_freeze_manifest(store: &mut ParamStore, manifest: &[String]) -> Result<()> {
    for p in store.iter_mut() {
        let hit = manifest.iter().any(|m| matches_pattern(&p.name, m));
        let is_base = p.name.starts_with("transducer.");
        if hit != is_base {
            return Err(Error::Manifest(if is_base {
                format!("{} is not frozen by the manifest", p.name)
            } else {
                format!("{} is a biasing tensor but the manifest freezes it", p.name)
            }));
        }
        p.frozen = hit;
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean per-label loss (nats) of each epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

/// Loss in nats per output symbol (labels plus the final blank).
fn utterance_grads(model: &Model, u: &Utterance, catalog: Option<&[CatalogEntry]>) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new(&model.store);
    let loss = model.loss_on_tape(&mut tape, &u.frames, u.ww_end_frame, catalog, &u.tokens)?;
    let norm = 1.0 / (u.tokens.len() + 1) as f64;
    let scaled = tape.scale(loss, norm);
    let value = tape.value(scaled).data()[0];
    let g = tape.backward(scaled)?;
    Ok((value, g))
}

/// Keeps the spoken wake word and proper name, drops each other entry with
/// probability `p`.
fn sample_catalog(catalog: &[CatalogEntry], u: &Utterance, p: f64, rng: &mut ChaCha8Rng) -> Vec<CatalogEntry> {
    if p == 0.0 {
        return catalog.to_vec();
    }
    catalog
        .iter()
        .filter(|e| {
            let spoken = Some(&e.surface) == u.lead.as_ref() || Some(&e.surface) == u.proper_name.as_ref();
            spoken || !rng.gen_bool(p)
        })
        .cloned()
        .collect()
}

fn run(
    model: &mut Model,
    corpus: &[Utterance],
    cfg: &TrainConfig,
    catalogs: Option<&[Vec<CatalogEntry>]>,
    tag: &str,
) -> Result<TrainLog> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut log = TrainLog::default();
    let mut adam = AdamState::new(&model.store);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = Gradients::zeros_like(&model.store);
            let mut batch_loss = 0.0;
            for &i in batch {
                let cat = catalogs.map(|c| sample_catalog(&c[i], &corpus[i], cfg.catalog_dropout, &mut rng));
                let (l, g) = utterance_grads(model, &corpus[i], cat.as_deref())?;
                if !l.is_finite() {
                    return Err(Error::Divergence { step: log.steps, loss: l });
                }
                batch_loss += l;
                acc.accumulate(&g);
            }
            acc.scale(1.0 / batch.len() as f64);
            if !acc.norm().is_finite() {
                return Err(Error::Divergence { step: log.steps, loss: f64::NAN });
            }
            clip_gradients(&mut acc, cfg.clip_norm);
            match cfg.optimizer {
                Optimizer::Sgd => sgd_step(&mut model.store, &acc, cfg.learning_rate),
                Optimizer::Adam => adam_step(&mut model.store, &acc, cfg.learning_rate, &mut adam),
            }
            total += batch_loss;
            log.steps += 1;
        }
        let mean = total / corpus.len() as f64;
        if cfg.log_every_epoch {
            eprintln!("{tag} epoch {} loss {:.4} nats/label", epoch + 1, mean);
        }
        log.epoch_loss.push(mean);
    }
    Ok(log)
}

/// Trains every tensor on unbiased transducer loss, lead-in through the small
/// encoder and the rest through the large one.
pub fn pretrain(model: &mut Model, corpus: &[Utterance], cfg: &TrainConfig) -> Result<TrainLog> {
    for p in model.store.iter_mut() {
        p.frozen = false;
    }
    run(model, corpus, cfg, None, "pretrain")
}

/// Trains only the context encoder and attention networks, each utterance
/// presented with its own catalog.
pub fn finetune_biasing(
    model: &mut Model,
    corpus: &[Utterance],
    wake_words: &[String],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if model.biasing().is_none() {
        return Err(Error::Config("fine-tuning needs a model with biasing layers".into()));
    }
    apply_freeze_manifest(&mut model.store, &cfg.freeze_manifest)?;
    let catalogs = corpus.iter().map(|u| u.catalog(wake_words)).collect::<Result<Vec<_>>>()?;
    run(model, corpus, cfg, Some(&catalogs), "finetune")
}
