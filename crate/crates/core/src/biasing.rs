//! Catalog biasing: a BiLSTM context encoder over catalog entries, the cached
//! embedding table, per-segment masks, and single-head scaled dot-product
//! attention whose output is added back onto the encoder frame.

use std::io::Write;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::kernels::{affine, dot, softmax_in_place};
use crate::nn::{Init, NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::text;
use crate::transducer::{Dense, EncoderPath, LstmLayer, Transducer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    WakeWord,
    ProperName,
    NoBias,
}

impl EntryKind {
    pub fn tag(self) -> &'static str {
        match self {
            EntryKind::WakeWord => "ww",
            EntryKind::ProperName => "proper_name",
            EntryKind::NoBias => "no_bias",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub kind: EntryKind,
    pub surface: String,
    pub token_ids: Vec<usize>,
}

impl CatalogEntry {
    pub fn new(kind: EntryKind, surface: &str) -> Result<Self> {
        if kind == EntryKind::NoBias {
            return Err(Error::Invalid("the no-bias row is added by the cache, not the catalog".into()));
        }
        let token_ids = text::tokenize(surface)?;
        if token_ids.is_empty() {
            return Err(Error::Invalid("catalog entry with an empty surface".into()));
        }
        Ok(Self { kind, surface: surface.to_string(), token_ids })
    }

    pub fn wake_word(surface: &str) -> Result<Self> {
        Self::new(EntryKind::WakeWord, surface)
    }

    pub fn proper_name(surface: &str) -> Result<Self> {
        Self::new(EntryKind::ProperName, surface)
    }
}

/// Parses `kind<TAB>surface` lines; `kind` is `ww` or `proper_name`.
pub fn parse_catalog(src: &str) -> Result<Vec<CatalogEntry>> {
    let mut out = Vec::new();
    for (n, line) in src.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (kind, surface) = line
            .split_once('\t')
            .ok_or_else(|| Error::Invalid(format!("catalog line {}: expected kind<TAB>surface", n + 1)))?;
        let kind = match kind {
            "ww" => EntryKind::WakeWord,
            "proper_name" => EntryKind::ProperName,
            other => return Err(Error::Invalid(format!("catalog line {}: unknown kind {other:?}", n + 1))),
        };
        out.push(CatalogEntry::new(kind, surface)?);
    }
    Ok(out)
}

pub fn format_catalog(entries: &[CatalogEntry]) -> String {
    entries
        .iter()
        .filter(|e| e.kind != EntryKind::NoBias)
        .map(|e| format!("{}\t{}\n", e.kind.tag(), e.surface))
        .collect()
}

/// Which biasing arrangement a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasMode {
    /// No biasing layers.
    PretrainedBase,
    /// One attention network over the full catalog on both encoders.
    SingleAttnBase,
    /// As `SingleAttnBase`, with proper names masked out of the lead-in.
    SingleAttnCatalogMask,
    /// Small wake-word attention on the lead-in, large proper-name attention after.
    DualAttn,
}

impl BiasMode {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown mode {s:?}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            BiasMode::PretrainedBase => "pretrained-base",
            BiasMode::SingleAttnBase => "single-attn-base",
            BiasMode::SingleAttnCatalogMask => "single-attn-catalog-mask",
            BiasMode::DualAttn => "dual-attn",
        }
    }

    pub fn has_biasing(self) -> bool {
        self != BiasMode::PretrainedBase
    }

    /// Catalog segment each encoder path attends to under this mode.
    pub fn segment(self, path: EncoderPath) -> Segment {
        match (self, path) {
            (BiasMode::DualAttn | BiasMode::SingleAttnCatalogMask, EncoderPath::Small) => Segment::LeadIn,
            (BiasMode::DualAttn, EncoderPath::Large) => Segment::PostWw,
            _ => Segment::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiasingConfig {
    pub mode: BiasMode,
    pub ctx_embed_dim: usize,
    pub ctx_units: usize,
    pub ctx_dim: usize,
    /// Projection size of the small (wake-word) attention.
    pub lambda: usize,
    /// Projection size of the large attention, and of the single attention.
    pub large_proj_dim: usize,
}

impl Default for BiasingConfig {
    fn default() -> Self {
        Self { mode: BiasMode::DualAttn, ctx_embed_dim: 16, ctx_units: 16, ctx_dim: 16, lambda: 16, large_proj_dim: 128 }
    }
}

impl BiasingConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.mode.has_biasing() {
            return Ok(());
        }
        if [self.ctx_embed_dim, self.ctx_units, self.ctx_dim, self.large_proj_dim].contains(&0) {
            return Err(Error::Config("biasing widths must be positive".into()));
        }
        if self.mode == BiasMode::DualAttn && self.lambda == 0 {
            return Err(Error::Config("lambda must be positive".into()));
        }
        Ok(())
    }

    /// Projection size used on `path`.
    pub fn proj_dim(&self, path: EncoderPath) -> usize {
        match (self.mode, path) {
            (BiasMode::DualAttn, EncoderPath::Small) => self.lambda,
            _ => self.large_proj_dim,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ContextEncoder {
    embed: ParamId,
    fwd: LstmLayer,
    bwd: LstmLayer,
    out: Dense,
    nobias: ParamId,
    vocab: usize,
}

impl ContextEncoder {
    fn register(store: &mut ParamStore, cfg: &BiasingConfig, vocab: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let embed = store.register("biasing.ctx.embed", &[vocab, cfg.ctx_embed_dim], Init::Normal(1.0), rng)?;
        let fwd = LstmLayer::register(store, "biasing.ctx.fwd", cfg.ctx_embed_dim, cfg.ctx_units, rng)?;
        let bwd = LstmLayer::register(store, "biasing.ctx.bwd", cfg.ctx_embed_dim, cfg.ctx_units, rng)?;
        let out = Dense::register(store, "biasing.ctx.out", 2 * cfg.ctx_units, cfg.ctx_dim, true, Init::Uniform, rng)?;
        let nobias = store.register("biasing.ctx.nobias", &[cfg.ctx_dim], Init::Uniform, rng)?;
        Ok(Self { embed, fwd, bwd, out, nobias, vocab })
    }

    fn check_tokens(&self, token_ids: &[usize]) -> Result<()> {
        if token_ids.is_empty() {
            return Err(Error::Invalid("context encoder needs a non-empty token sequence".into()));
        }
        if let Some(t) = token_ids.iter().find(|&&t| t == 0 || t >= self.vocab) {
            return Err(Error::Invalid(format!("catalog token id {t} is blank or out of range")));
        }
        Ok(())
    }

    /// Final forward state ‖ final backward state, projected to `ctx_dim`.
    pub fn encode_on_tape(&self, tape: &mut Tape<'_>, token_ids: &[usize]) -> Result<NodeId> {
        self.check_tokens(token_ids)?;
        let table = tape.param(self.embed);
        let x = tape.gather_rows(table, token_ids)?;
        let f = self.fwd.on_tape(tape, x, false)?;
        let b = self.bwd.on_tape(tape, x, true)?;
        let f_last = tape.select_row(f, token_ids.len() - 1)?;
        let b_first = tape.select_row(b, 0)?;
        let both = tape.concat(&[f_last, b_first]);
        self.out.on_tape(tape, both)
    }

    pub fn encode(&self, store: &ParamStore, token_ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new(store);
        let e = self.encode_on_tape(&mut tape, token_ids)?;
        Ok(tape.value(e).clone())
    }

    /// `[(N+1) × ctx_dim]`: one row per entry, then the learned no-bias row.
    pub fn embed_catalog_on_tape(&self, tape: &mut Tape<'_>, entries: &[CatalogEntry]) -> Result<NodeId> {
        let mut rows = Vec::with_capacity(entries.len() + 1);
        for e in entries.iter().filter(|e| e.kind != EntryKind::NoBias) {
            rows.push(self.encode_on_tape(tape, &e.token_ids)?);
        }
        rows.push(tape.param(self.nobias));
        tape.stack_rows(&rows)
    }
}

/// Query/key/value/output projections of one single-head attention network.
#[derive(Clone, Debug)]
pub struct Mha {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub o: Dense,
    pub query_dim: usize,
    pub proj_dim: usize,
}

impl Mha {
    fn on_tape(&self, tape: &mut Tape<'_>, query: NodeId, memory: NodeId, active: &[usize]) -> Result<(NodeId, NodeId)> {
        let mem = tape.gather_rows(memory, active)?;
        let q = self.q.on_tape(tape, query)?;
        let k = self.k.on_tape(tape, mem)?;
        let v = self.v.on_tape(tape, mem)?;
        let s = tape.matmul_nt(q, k)?;
        let s = tape.scale(s, 1.0 / (self.proj_dim as f64).sqrt());
        let a = tape.softmax_rows(s)?;
        let c = tape.matmul(a, v)?;
        let bias = self.o.on_tape(tape, c)?;
        Ok((bias, a))
    }

    /// Single-frame attention without a tape. Returns the bias vector and the
    /// weights over every cache row (masked rows exactly zero).
    pub fn attend(&self, store: &ParamStore, query: &[f64], cache: &CatalogCache, mask: &SegmentMask) -> Result<(Vec<f64>, Vec<f64>)> {
        if query.len() != self.query_dim {
            return Err(Error::Shape(format!("attention query must have width {}, got {}", self.query_dim, query.len())));
        }
        if mask.active.len() != cache.rows() {
            return Err(Error::Shape(format!("mask over {} rows applied to cache of {}", mask.active.len(), cache.rows())));
        }
        let p = self.proj_dim;
        let d_ctx = cache.embeddings.cols();
        let w = |d: &Dense| store.tensor(d.w).data();
        let mut q = vec![0.0; p];
        affine(w(&self.q), query, None, &mut q);
        let active = mask.active_rows();
        let mut scores = Vec::with_capacity(active.len());
        let mut values = Vec::with_capacity(active.len());
        let mut k = vec![0.0; p];
        for &r in &active {
            let emb = cache.embeddings.row(r);
            debug_assert_eq!(emb.len(), d_ctx);
            affine(w(&self.k), emb, None, &mut k);
            scores.push(dot(&q, &k) / (p as f64).sqrt());
            let mut v = vec![0.0; p];
            affine(w(&self.v), emb, None, &mut v);
            values.push(v);
        }
        softmax_in_place(&mut scores);
        let mut ctx = vec![0.0; p];
        for (wt, v) in scores.iter().zip(&values) {
            for (c, x) in ctx.iter_mut().zip(v) {
                *c += wt * x;
            }
        }
        let mut bias = vec![0.0; self.query_dim];
        affine(w(&self.o), &ctx, None, &mut bias);
        let mut weights = vec![0.0; cache.rows()];
        for (&r, wt) in active.iter().zip(&scores) {
            weights[r] = *wt;
        }
        Ok((bias, weights))
    }
}

/// Context encoder plus the attention network used by each encoder path.
#[derive(Clone, Debug)]
pub struct Biasing {
    cfg: BiasingConfig,
    pub ctx: ContextEncoder,
    small: Mha,
    large: Mha,
}

impl Biasing {
    pub fn register(
        store: &mut ParamStore,
        cfg: &BiasingConfig,
        transducer: &Transducer,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if !cfg.mode.has_biasing() {
            return Err(Error::Config("pretrained-base has no biasing layers".into()));
        }
        let vocab = transducer.config().vocab_size;
        let ctx = ContextEncoder::register(store, cfg, vocab, rng)?;
        let ds = transducer.enc_dim(EncoderPath::Small);
        let dl = transducer.enc_dim(EncoderPath::Large);
        let d = cfg.ctx_dim;
        let mut dense = |store: &mut ParamStore, name: &str, i: usize, o: usize, init: Init| {
            Dense::register(store, name, i, o, false, init, rng)
        };
        let (small, large) = match cfg.mode {
            BiasMode::DualAttn => {
                let (l, p) = (cfg.lambda, cfg.large_proj_dim);
                let small = Mha {
                    q: dense(store, "biasing.mha_small.q", ds, l, Init::Uniform)?,
                    k: dense(store, "biasing.mha_small.k", d, l, Init::Uniform)?,
                    v: dense(store, "biasing.mha_small.v", d, l, Init::Uniform)?,
                    o: dense(store, "biasing.mha_small.o", l, ds, Init::Zeros)?,
                    query_dim: ds,
                    proj_dim: l,
                };
                let large = Mha {
                    q: dense(store, "biasing.mha_large.q", dl, p, Init::Uniform)?,
                    k: dense(store, "biasing.mha_large.k", d, p, Init::Uniform)?,
                    v: dense(store, "biasing.mha_large.v", d, p, Init::Uniform)?,
                    o: dense(store, "biasing.mha_large.o", p, dl, Init::Zeros)?,
                    query_dim: dl,
                    proj_dim: p,
                };
                (small, large)
            }
            _ => {
                // One attention network; only the query/output projections
                // differ because the two encoders have different widths.
                let p = cfg.large_proj_dim;
                let k = dense(store, "biasing.mha.k", d, p, Init::Uniform)?;
                let v = dense(store, "biasing.mha.v", d, p, Init::Uniform)?;
                let small = Mha {
                    q: dense(store, "biasing.mha.q_small", ds, p, Init::Uniform)?,
                    k,
                    v,
                    o: dense(store, "biasing.mha.o_small", p, ds, Init::Zeros)?,
                    query_dim: ds,
                    proj_dim: p,
                };
                let large = Mha {
                    q: dense(store, "biasing.mha.q_large", dl, p, Init::Uniform)?,
                    k,
                    v,
                    o: dense(store, "biasing.mha.o_large", p, dl, Init::Zeros)?,
                    query_dim: dl,
                    proj_dim: p,
                };
                (small, large)
            }
        };
        Ok(Self { cfg: cfg.clone(), ctx, small, large })
    }

    pub fn config(&self) -> &BiasingConfig {
        &self.cfg
    }

    pub fn mha(&self, path: EncoderPath) -> &Mha {
        match path {
            EncoderPath::Small => &self.small,
            EncoderPath::Large => &self.large,
        }
    }

    pub fn mask_for(&self, path: EncoderPath, cache: &CatalogCache) -> SegmentMask {
        cache.mask(self.cfg.mode.segment(path))
    }

    /// `h_enc + O·attention(h_enc, catalog)` for each row of `enc`; also
    /// returns the attention weights over the active rows.
    pub fn apply_on_tape(
        &self,
        tape: &mut Tape<'_>,
        enc: NodeId,
        path: EncoderPath,
        memory: NodeId,
        mask: &SegmentMask,
    ) -> Result<(NodeId, NodeId)> {
        let (bias, weights) = self.mha(path).on_tape(tape, enc, memory, &mask.active_rows())?;
        Ok((tape.add(enc, bias)?, weights))
    }

    /// Biases a single encoder frame of the given path.
    pub fn apply(&self, store: &ParamStore, h_enc: &[f64], path: EncoderPath, cache: &CatalogCache) -> Result<Vec<f64>> {
        let mask = self.mask_for(path, cache);
        let (bias, _) = self.mha(path).attend(store, h_enc, cache, &mask)?;
        Ok(h_enc.iter().zip(&bias).map(|(h, b)| h + b).collect())
    }

    /// Builds the cached embedding table for a catalog.
    pub fn build_cache(&self, store: &ParamStore, catalog: &[CatalogEntry]) -> Result<CatalogCache> {
        let mut tape = Tape::new(store);
        let emb = self.ctx.embed_catalog_on_tape(&mut tape, catalog)?;
        let mut entries: Vec<CatalogEntry> = catalog.iter().filter(|e| e.kind != EntryKind::NoBias).cloned().collect();
        entries.push(CatalogEntry { kind: EntryKind::NoBias, surface: String::new(), token_ids: Vec::new() });
        Ok(CatalogCache { entries, embeddings: tape.value(emb).clone() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    /// Wake words and no-bias.
    LeadIn,
    /// Proper names and no-bias.
    PostWw,
    /// Every row.
    Full,
}

/// Embeddings of every catalog entry with the no-bias row last. Immutable
/// once built.
#[derive(Clone, Debug, PartialEq)]
pub struct CatalogCache {
    entries: Vec<CatalogEntry>,
    embeddings: Tensor,
}

impl CatalogCache {
    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    /// Same entries with a replaced embedding table (used to probe masking).
    pub fn with_embeddings(&self, embeddings: Tensor) -> Result<Self> {
        if embeddings.shape() != self.embeddings.shape() {
            return Err(Error::Shape(format!(
                "replacement embeddings {:?} vs {:?}",
                embeddings.shape(),
                self.embeddings.shape()
            )));
        }
        Ok(Self { entries: self.entries.clone(), embeddings })
    }

    pub fn rows(&self) -> usize {
        self.entries.len()
    }

    pub fn nobias_row(&self) -> usize {
        self.entries.len() - 1
    }

    pub fn count(&self, kind: EntryKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }

    pub fn mask(&self, segment: Segment) -> SegmentMask {
        SegmentMask::new(self.entries.iter().map(|e| e.kind), segment)
    }
}

/// Segment-dependent catalog mask for a cache.
pub fn dynamic_mask(segment: Segment, cache: &CatalogCache) -> SegmentMask {
    cache.mask(segment)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentMask {
    pub active: Vec<bool>,
    pub active_count: usize,
}

impl SegmentMask {
    /// Mask over rows of the given kinds; the no-bias row is always active.
    pub fn new(kinds: impl IntoIterator<Item = EntryKind>, segment: Segment) -> Self {
        let active: Vec<bool> = kinds
            .into_iter()
            .map(|k| match (segment, k) {
                (_, EntryKind::NoBias) | (Segment::Full, _) => true,
                (Segment::LeadIn, k) => k == EntryKind::WakeWord,
                (Segment::PostWw, k) => k == EntryKind::ProperName,
            })
            .collect();
        let active_count = active.iter().filter(|a| **a).count();
        Self { active, active_count }
    }

    /// Mask over a catalog plus the trailing no-bias row.
    pub fn for_catalog(catalog: &[CatalogEntry], segment: Segment) -> Self {
        let kinds = catalog.iter().map(|e| e.kind).filter(|k| *k != EntryKind::NoBias);
        Self::new(kinds.chain(std::iter::once(EntryKind::NoBias)), segment)
    }

    pub fn active_rows(&self) -> Vec<usize> {
        self.active.iter().enumerate().filter(|(_, a)| **a).map(|(i, _)| i).collect()
    }
}

/// Per-frame attention weights over every cache row.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    /// `[frames × cache rows]`.
    pub weights: Tensor,
    pub paths: Vec<EncoderPath>,
}

pub fn write_trace_csv<W: Write>(trace: &AttentionTrace, cache: &CatalogCache, mut out: W) -> Result<()> {
    writeln!(out, "frame,entry_index,kind,surface,weight")?;
    for t in 0..trace.weights.rows() {
        for (i, e) in cache.entries().iter().enumerate() {
            writeln!(out, "{t},{i},{},{},{}", e.kind.tag(), e.surface, trace.weights.row(t)[i])?;
        }
    }
    Ok(())
}
