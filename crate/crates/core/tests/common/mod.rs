#![allow(dead_code)]

use dualattn::nn::{NodeId, ParamId, ParamStore, Tape};

/// Worst relative disagreement between tape gradients and central finite
/// differences over every scalar of every parameter.
#[derive(Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(1e-6);
    (a - n).abs() / denom
}

pub fn check_gradients<F>(store: &mut ParamStore, build: F, step: f64) -> GradCheck
where
    F: Fn(&mut Tape<'_>) -> NodeId,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = build(&mut tape);
        tape.backward(loss).expect("backward")
    };
    let eval = |store: &ParamStore| {
        let mut tape = Tape::new(store);
        let loss = build(&mut tape);
        tape.value(loss).data()[0]
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let mut out = GradCheck { max_rel_err: 0.0, worst: String::new(), checked: 0 };
    for id in ids {
        for k in 0..store.tensor(id).numel() {
            let orig = store.tensor(id).data()[k];
            let mut at = |dx: f64| {
                store.get_mut(id).tensor.data_mut()[k] = orig + dx;
                eval(store)
            };
            // Five-point stencil: truncation error O(step⁴).
            let (p2, p1, m1, m2) = (at(2.0 * step), at(step), at(-step), at(-2.0 * step));
            store.get_mut(id).tensor.data_mut()[k] = orig;
            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * step);
            let a = analytic.get(id).data()[k];
            let e = rel_err(a, numeric);
            out.checked += 1;
            if e > out.max_rel_err {
                out.max_rel_err = e;
                out.worst = format!("{}[{k}] analytic {a:e} numeric {numeric:e}", store.get(id).name);
            }
        }
    }
    out
}

use dualattn::biasing::{BiasMode, BiasingConfig, CatalogEntry};
use dualattn::model::ModelConfig;
use dualattn::nn::Tensor;
use dualattn::transducer::TransducerConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A model small enough for exhaustive finite differences.
pub fn tiny_model_config(mode: BiasMode) -> ModelConfig {
    ModelConfig {
        transducer: TransducerConfig {
            feat_dim: 3,
            small_enc_units: 3,
            large_enc_units: 4,
            enc_layers: 2,
            time_reduction_layer: 1,
            time_reduction_factor: 2,
            pred_embed_dim: 2,
            pred_units: 3,
            pred_layers: 1,
            joint_dim: 4,
            vocab_size: 29,
        },
        biasing: BiasingConfig { mode, ctx_embed_dim: 2, ctx_units: 2, ctx_dim: 3, lambda: 2, large_proj_dim: 3 },
    }
}

pub fn rand_frames(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor {
    Tensor::matrix(t, d, (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn catalog(wws: &[&str], names: &[&str]) -> Vec<CatalogEntry> {
    wws.iter()
        .map(|w| CatalogEntry::wake_word(w).unwrap())
        .chain(names.iter().map(|n| CatalogEntry::proper_name(n).unwrap()))
        .collect()
}

/// Overwrites every tensor whose name starts with `prefix`
/// with seeded values in [-scale, scale].
pub fn randomize(store: &mut dualattn::nn::ParamStore, prefix: &str, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut().filter(|p| p.name.starts_with(prefix)) {
        for v in p.tensor.data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}
