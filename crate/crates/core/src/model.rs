//! A bifocal transducer with an optional biasing arrangement, sharing one
//! parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::biasing::{BiasMode, Biasing, BiasingConfig, CatalogEntry, SegmentMask};
use crate::error::{Error, Result};
use crate::nn::{NodeId, ParamStore, Tape, Tensor};
use crate::runtime::split_at_pivot;
use crate::transducer::{EncoderPath, Transducer, TransducerConfig};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub transducer: TransducerConfig,
    pub biasing: BiasingConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.transducer.validate()?;
        self.biasing.validate()
    }

    pub fn mode(&self) -> BiasMode {
        self.biasing.mode
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    pub store: ParamStore,
    transducer: Transducer,
    biasing: Option<Biasing>,
}

/// Tape nodes produced for one stream.
#[derive(Clone, Debug)]
pub struct StreamGraph {
    /// Joint-projected encodings of both segments, `[T'_small + T'_large × J]`.
    pub enc_proj: NodeId,
    pub small_frames: usize,
    pub large_frames: usize,
    /// Attention weights per segment over that segment's active rows.
    pub attention: Vec<(EncoderPath, NodeId)>,
}

impl Model {
    /// Fresh model. Transducer and biasing weights draw from separate seeded
    /// streams so biasing initialisation does not depend on the transducer.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let transducer = Transducer::register(&mut store, &cfg.transducer, &mut rng)?;
        let biasing = if cfg.mode().has_biasing() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b1a5);
            Some(Biasing::register(&mut store, &cfg.biasing, &transducer, &mut rng)?)
        } else {
            None
        };
        Ok(Self { cfg: cfg.clone(), store, transducer, biasing })
    }

    /// New model under `cfg` whose transducer tensors are copied from
    /// `pretrained`; biasing tensors are freshly initialised.
    pub fn from_pretrained(pretrained: &Model, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if pretrained.cfg.transducer != cfg.transducer {
            return Err(Error::Config("transducer config differs from the pretrained checkpoint".into()));
        }
        let mut m = Self::new(cfg, seed)?;
        for p in pretrained.store.iter().filter(|p| p.name.starts_with("transducer.")) {
            let id = m.store.id(&p.name).ok_or_else(|| Error::Shape(format!("no tensor {} in target model", p.name)))?;
            m.store.get_mut(id).tensor = p.tensor.clone();
        }
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn transducer(&self) -> &Transducer {
        &self.transducer
    }

    pub fn biasing(&self) -> Option<&Biasing> {
        self.biasing.as_ref()
    }

    /// Biasing disabled, transducer tensors unchanged.
    pub fn ablated(&self) -> Result<Model> {
        let cfg = ModelConfig {
            transducer: self.cfg.transducer.clone(),
            biasing: BiasingConfig { mode: BiasMode::PretrainedBase, ..self.cfg.biasing.clone() },
        };
        Model::from_pretrained(self, &cfg, 0)
    }

    /// Builds the encoder (and, with a catalog, biasing) graph for one stream
    /// split at `ww_end`.
    pub fn stream_on_tape(
        &self,
        tape: &mut Tape<'_>,
        frames: &Tensor,
        ww_end: i64,
        catalog: Option<&[CatalogEntry]>,
    ) -> Result<StreamGraph> {
        self.transducer.check_frames(frames)?;
        let (lead, post) = split_at_pivot(frames, ww_end)?;
        let biasing = match (&self.biasing, catalog) {
            (Some(b), Some(c)) => Some((b, b.ctx.embed_catalog_on_tape(tape, c)?, c)),
            _ => None,
        };
        let mut parts = Vec::new();
        let mut attention = Vec::new();
        let mut counts = [0usize; 2];
        for (path, seg) in [(EncoderPath::Small, lead), (EncoderPath::Large, post)] {
            let Some(seg) = seg else { continue };
            let x = tape.constant(seg);
            let mut h = self.transducer.encoder(path).on_tape(tape, x)?;
            if let Some((b, memory, cat)) = &biasing {
                let mask = SegmentMask::for_catalog(cat, b.config().mode.segment(path));
                let (biased, w) = b.apply_on_tape(tape, h, path, *memory, &mask)?;
                h = biased;
                attention.push((path, w));
            }
            counts[path as usize] = tape.value(h).rows();
            parts.push(self.transducer.project_enc_on_tape(tape, h, path)?);
        }
        let enc_proj = tape.stack_rows(&parts)?;
        Ok(StreamGraph { enc_proj, small_frames: counts[0], large_frames: counts[1], attention })
    }

    /// Transducer loss of `labels` for one stream.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape<'_>,
        frames: &Tensor,
        ww_end: i64,
        catalog: Option<&[CatalogEntry]>,
        labels: &[usize],
    ) -> Result<NodeId> {
        let g = self.stream_on_tape(tape, frames, ww_end, catalog)?;
        let pred = self.transducer.predict_on_tape(tape, labels)?;
        let pred = self.transducer.project_pred_on_tape(tape, pred)?;
        self.transducer.loss_on_tape(tape, g.enc_proj, pred, labels)
    }

    pub fn loss(&self, frames: &Tensor, ww_end: i64, catalog: Option<&[CatalogEntry]>, labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new(&self.store);
        let l = self.loss_on_tape(&mut tape, frames, ww_end, catalog, labels)?;
        Ok(tape.value(l).data()[0])
    }
}
