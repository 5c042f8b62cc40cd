//! Streaming inference with the wake-word pivot, and the analytic cost meter.

use serde::{Deserialize, Serialize};

use crate::biasing::{AttentionTrace, BiasMode, CatalogCache, EntryKind, Segment};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::Tensor;
use crate::transducer::{Emission, EncoderPath, GreedyDecoder};

/// Identifies the counting rule behind every FLOPs figure: one multiply-add
/// is 2 FLOPs, softmax is 5 per row, key/value projections are recomputed per
/// frame, and the no-bias row is counted in the catalog size.
pub const FLOPS_CONVENTION: &str = "mha-madd2-kvperframe-nobias-v1";

/// Lead-in (`Small`) iff `t ≤ ww_end`; `ww_end = -1` routes everything to `Large`.
pub fn pivot_select(t: usize, ww_end: i64) -> EncoderPath {
    if (t as i64) <= ww_end {
        EncoderPath::Small
    } else {
        EncoderPath::Large
    }
}

/// Splits `[T × d]` frames into the lead-in rows `0..=ww_end` and the rest.
pub fn split_at_pivot(frames: &Tensor, ww_end: i64) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let t = frames.rows();
    if ww_end < -1 || ww_end >= t as i64 {
        return Err(Error::Invalid(format!("ww_end_frame {ww_end} outside [-1, {t})")));
    }
    let cut = (ww_end + 1) as usize;
    let d = frames.cols();
    let part = |a: usize, b: usize| -> Result<Option<Tensor>> {
        if a == b {
            return Ok(None);
        }
        Ok(Some(Tensor::matrix(b - a, d, frames.data()[a * d..b * d].to_vec())?))
    };
    Ok((part(0, cut)?, part(cut, t)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioStream {
    pub id: String,
    pub frames: Tensor,
    pub ww_end_frame: i64,
}

/// Source of the wake-word end frame for a stream.
pub trait BoundaryProvider {
    fn ww_end_frame(&self, stream: &AudioStream) -> i64;
}

/// Trusts the boundary carried by the stream itself.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleBoundary;

impl BoundaryProvider for OracleBoundary {
    fn ww_end_frame(&self, stream: &AudioStream) -> i64 {
        stream.ww_end_frame
    }
}

/// Per-frame FLOPs of one single-head attention layer with query width
/// `d_q`, catalog embedding width `d_ctx`, projection `p` and `n` real
/// catalog rows (plus the no-bias row).
pub fn mha_flops(d_q: usize, d_ctx: usize, p: usize, n: usize) -> u64 {
    let (d_q, d_ctx, p, rows) = (d_q as u64, d_ctx as u64, p as u64, n as u64 + 1);
    let q = 2 * d_q * p;
    let kv = 2 * (2 * rows * d_ctx * p);
    let scores = 2 * rows * p;
    let softmax = 5 * rows;
    let context = 2 * rows * p;
    let out = 2 * p * d_q;
    q + kv + scores + softmax + context + out
}

/// FLOPs per frame on `path` with `n` active real catalog rows.
pub fn flops_count(cfg: &ModelConfig, path: EncoderPath, n: usize) -> u64 {
    if !cfg.mode().has_biasing() {
        return 0;
    }
    let d_q = cfg.transducer.enc_units(path) * enc_width_factor(cfg);
    mha_flops(d_q, cfg.biasing.ctx_dim, cfg.biasing.proj_dim(path), n)
}

fn enc_width_factor(cfg: &ModelConfig) -> usize {
    let t = &cfg.transducer;
    if t.time_reduction_layer == t.enc_layers {
        t.time_reduction_factor
    } else {
        1
    }
}

/// Real catalog rows active on `path` for a catalog of `n_ww` wake words and
/// `n_pn` proper names.
pub fn active_catalog(mode: BiasMode, path: EncoderPath, n_ww: usize, n_pn: usize) -> usize {
    match mode.segment(path) {
        Segment::LeadIn => n_ww,
        Segment::PostWw => n_pn,
        Segment::Full => n_ww + n_pn,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub convention_id: String,
    pub config: ModelConfig,
    pub leadin_active_catalog: usize,
    pub postww_active_catalog: usize,
    pub leadin_mha_flops_per_frame: u64,
    pub postww_mha_flops_per_frame: u64,
    pub leadin_frames: usize,
    pub postww_frames: usize,
    pub leadin_total: u64,
    pub postww_total: u64,
    pub total: u64,
}

impl FlopsReport {
    pub fn new(cfg: &ModelConfig, n_ww: usize, n_pn: usize, leadin_frames: usize, postww_frames: usize) -> Self {
        let mode = cfg.mode();
        let (na_s, na_l) = if mode.has_biasing() {
            (active_catalog(mode, EncoderPath::Small, n_ww, n_pn), active_catalog(mode, EncoderPath::Large, n_ww, n_pn))
        } else {
            (0, 0)
        };
        let fs = flops_count(cfg, EncoderPath::Small, na_s);
        let fl = flops_count(cfg, EncoderPath::Large, na_l);
        let (ts, tl) = (fs * leadin_frames as u64, fl * postww_frames as u64);
        Self {
            convention_id: FLOPS_CONVENTION.to_string(),
            config: cfg.clone(),
            leadin_active_catalog: na_s,
            postww_active_catalog: na_l,
            leadin_mha_flops_per_frame: fs,
            postww_mha_flops_per_frame: fl,
            leadin_frames,
            postww_frames,
            leadin_total: ts,
            postww_total: tl,
            total: ts + tl,
        }
    }
}

/// Biasing-layer parameter counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub convention: String,
    pub context_encoder: usize,
    /// Small-path query/key/value/output (single-attn modes: query/output only).
    pub small_mha: usize,
    pub large_mha: usize,
    /// Key/value projections shared by both paths in single-attn modes.
    pub shared_kv: usize,
    pub total: usize,
}

pub fn param_count(cfg: &ModelConfig) -> ParamCount {
    let convention = "scalars of context encoder (incl. no-bias row) and bias-free attention projections".to_string();
    let b = &cfg.biasing;
    if !b.mode.has_biasing() {
        return ParamCount { convention, context_encoder: 0, small_mha: 0, large_mha: 0, shared_kv: 0, total: 0 };
    }
    let (v, e, u, d) = (cfg.transducer.vocab_size, b.ctx_embed_dim, b.ctx_units, b.ctx_dim);
    let lstm = 4 * u * e + 4 * u * u + 4 * u;
    let context_encoder = v * e + 2 * lstm + 2 * u * d + d + d;
    let f = enc_width_factor(cfg);
    let dq_s = cfg.transducer.small_enc_units * f;
    let dq_l = cfg.transducer.large_enc_units * f;
    let (small_mha, large_mha, shared_kv) = match b.mode {
        BiasMode::DualAttn => {
            let (l, p) = (b.lambda, b.large_proj_dim);
            (l * (2 * dq_s + 2 * d), p * (2 * dq_l + 2 * d), 0)
        }
        _ => {
            let p = b.large_proj_dim;
            (2 * dq_s * p, 2 * dq_l * p, 2 * d * p)
        }
    };
    ParamCount { convention, context_encoder, small_mha, large_mha, shared_kv, total: context_encoder + small_mha + large_mha + shared_kv }
}

#[derive(Clone, Copy, Debug)]
pub struct DecodeOptions {
    pub max_symbols_per_frame: usize,
    pub trace: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self { max_symbols_per_frame: 4, trace: false }
    }
}

#[derive(Clone, Debug)]
pub struct StreamOutput {
    pub labels: Vec<usize>,
    pub emissions: Vec<Emission>,
    /// Encoder frames (after time reduction) on each path.
    pub small_frames: usize,
    pub large_frames: usize,
    /// How many frames ran each attention network.
    pub small_mha_frames: usize,
    pub large_mha_frames: usize,
    pub flops: FlopsReport,
    pub trace: Option<AttentionTrace>,
}

impl StreamOutput {
    /// Labels emitted on post-wake-word encoder frames.
    pub fn post_ww_labels(&self) -> Vec<usize> {
        self.emissions.iter().filter(|e| e.frame >= self.small_frames).map(|e| e.label).collect()
    }
}

/// Runs one stream: lead-in through the small encoder and attention, the rest
/// through the large ones, greedy decoding over the joined encodings.
pub fn process_stream(
    model: &Model,
    stream: &AudioStream,
    boundary: &dyn BoundaryProvider,
    cache: Option<&CatalogCache>,
    opts: DecodeOptions,
) -> Result<StreamOutput> {
    let t = model.transducer();
    t.check_frames(&stream.frames)?;
    let ww_end = boundary.ww_end_frame(stream);
    let (lead, post) = split_at_pivot(&stream.frames, ww_end)?;
    let biasing = match (model.biasing(), cache) {
        (Some(b), Some(c)) => Some((b, c)),
        (Some(_), None) => return Err(Error::Invalid("biased model needs a catalog cache".into())),
        (None, _) => None,
    };
    let mut dec = GreedyDecoder::new(t, &model.store, opts.max_symbols_per_frame)?;
    let mut frames = [0usize; 2];
    let mut mha_frames = [0usize; 2];
    let mut trace_rows = Vec::new();
    let mut trace_paths = Vec::new();
    for (path, seg) in [(EncoderPath::Small, lead), (EncoderPath::Large, post)] {
        let Some(seg) = seg else { continue };
        let enc = t.encode(&model.store, &seg, path)?;
        frames[path as usize] = enc.rows();
        let mask = biasing.map(|(b, c)| b.mask_for(path, c));
        for k in 0..enc.rows() {
            let h = enc.row(k);
            match (biasing, &mask) {
                (Some((b, c)), Some(mask)) => {
                    let (bias, w) = b.mha(path).attend(&model.store, h, c, mask)?;
                    let biased: Vec<f64> = h.iter().zip(&bias).map(|(a, b)| a + b).collect();
                    mha_frames[path as usize] += 1;
                    if opts.trace {
                        trace_rows.push(w);
                        trace_paths.push(path);
                    }
                    dec.push_frame(&biased, path)?;
                }
                _ => {
                    dec.push_frame(h, path)?;
                }
            }
        }
    }
    let cfg = model.config();
    let (n_ww, n_pn) = match cache {
        Some(c) if biasing.is_some() => {
            (c.count(EntryKind::WakeWord), c.count(EntryKind::ProperName))
        }
        _ => (0, 0),
    };
    let flops = FlopsReport::new(cfg, n_ww, n_pn, mha_frames[0], mha_frames[1]);
    let trace = if opts.trace && biasing.is_some() {
        let cols = cache.map_or(0, |c| c.rows());
        let data: Vec<f64> = trace_rows.concat();
        Some(AttentionTrace { weights: Tensor::matrix(trace_paths.len(), cols, data)?, paths: trace_paths })
    } else {
        None
    };
    Ok(StreamOutput {
        labels: dec.labels(),
        emissions: dec.emissions().to_vec(),
        small_frames: frames[0],
        large_frames: frames[1],
        small_mha_frames: mha_frames[0],
        large_mha_frames: mha_frames[1],
        flops,
        trace,
    })
}
