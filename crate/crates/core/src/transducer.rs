//! Bifocal transducer: two causal audio encoders with a time-reduction layer,
//! an LSTM text predictor, an additive joint network, the lattice loss, and
//! streaming greedy decoding.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::kernels::{self, affine, lstm_cell, LstmWeights};
use crate::nn::{Init, NodeId, ParamId, ParamStore, Tape, Tensor};

pub const BLANK: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransducerConfig {
    pub feat_dim: usize,
    pub small_enc_units: usize,
    pub large_enc_units: usize,
    pub enc_layers: usize,
    /// 1-based layer after which frames are concatenated.
    pub time_reduction_layer: usize,
    pub time_reduction_factor: usize,
    pub pred_embed_dim: usize,
    pub pred_units: usize,
    pub pred_layers: usize,
    pub joint_dim: usize,
    /// Includes blank at id 0.
    pub vocab_size: usize,
}

impl Default for TransducerConfig {
    fn default() -> Self {
        Self {
            feat_dim: 16,
            small_enc_units: 24,
            large_enc_units: 64,
            enc_layers: 3,
            time_reduction_layer: 2,
            time_reduction_factor: 2,
            pred_embed_dim: 16,
            pred_units: 32,
            pred_layers: 1,
            joint_dim: 32,
            vocab_size: 29,
        }
    }
}

impl TransducerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.enc_layers == 0 || self.pred_layers == 0 {
            return bad("encoder and predictor need at least one layer");
        }
        if self.time_reduction_layer < 1 || self.time_reduction_layer > self.enc_layers {
            return bad("time_reduction_layer must lie in 1..=enc_layers");
        }
        if self.time_reduction_factor < 1 {
            return bad("time_reduction_factor must be ≥ 1");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must include blank and at least one label");
        }
        let dims = [
            self.feat_dim,
            self.small_enc_units,
            self.large_enc_units,
            self.pred_embed_dim,
            self.pred_units,
            self.joint_dim,
        ];
        if dims.contains(&0) {
            return bad("all layer widths must be positive");
        }
        Ok(())
    }

    pub fn enc_units(&self, path: EncoderPath) -> usize {
        match path {
            EncoderPath::Small => self.small_enc_units,
            EncoderPath::Large => self.large_enc_units,
        }
    }

    /// Number of encoder output frames for `frames` input frames.
    pub fn reduced_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.time_reduction_factor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderPath {
    Small,
    Large,
}

impl EncoderPath {
    pub fn tag(self) -> &'static str {
        match self {
            EncoderPath::Small => "small",
            EncoderPath::Large => "large",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
}

impl LstmLayer {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        units: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            w_ih: store.register(format!("{prefix}.w_ih"), &[4 * units, input], Init::Uniform, rng)?,
            w_hh: store.register(format!("{prefix}.w_hh"), &[4 * units, units], Init::Uniform, rng)?,
            b: store.register(format!("{prefix}.b"), &[4 * units], Init::Uniform, rng)?,
        })
    }

    pub fn weights<'a>(&self, store: &'a ParamStore) -> LstmWeights<'a> {
        LstmWeights::from_tensors(store.tensor(self.w_ih), store.tensor(self.w_hh), store.tensor(self.b))
            .expect("registered lstm shapes are consistent")
    }

    pub fn on_tape(&self, tape: &mut Tape<'_>, x: NodeId, reverse: bool) -> Result<NodeId> {
        let (wi, wh, b) = (tape.param(self.w_ih), tape.param(self.w_hh), tape.param(self.b));
        tape.lstm(x, wi, wh, b, reverse)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Dense {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = store.register(format!("{name}.w"), &[output, input], init, rng)?;
        let b = if bias {
            Some(store.register(format!("{name}.b"), &[output], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn on_tape(&self, tape: &mut Tape<'_>, x: NodeId) -> Result<NodeId> {
        let w = tape.param(self.w);
        let b = self.b.map(|b| tape.param(b));
        tape.linear(x, w, b)
    }

    pub fn apply(&self, store: &ParamStore, x: &[f64], out: &mut [f64]) {
        affine(store.tensor(self.w).data(), x, self.b.map(|b| store.tensor(b).data()), out);
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    layers: Vec<LstmLayer>,
    reduce_after: usize,
    factor: usize,
    units: usize,
}

impl Encoder {
    fn register(
        store: &mut ParamStore,
        cfg: &TransducerConfig,
        path: EncoderPath,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let units = cfg.enc_units(path);
        let mut layers = Vec::new();
        let mut input = cfg.feat_dim;
        for l in 1..=cfg.enc_layers {
            let name = format!("transducer.enc_{}.l{l}", path.tag());
            layers.push(LstmLayer::register(store, &name, input, units, rng)?);
            input = if l == cfg.time_reduction_layer { units * cfg.time_reduction_factor } else { units };
        }
        Ok(Self { layers, reduce_after: cfg.time_reduction_layer, factor: cfg.time_reduction_factor, units })
    }

    pub fn output_dim(&self) -> usize {
        if self.reduce_after == self.layers.len() {
            self.units * self.factor
        } else {
            self.units
        }
    }

    pub fn on_tape(&self, tape: &mut Tape<'_>, frames: NodeId) -> Result<NodeId> {
        if tape.value(frames).rows() == 0 || tape.value(frames).numel() == 0 {
            return Err(Error::Invalid("cannot encode an empty frame sequence".into()));
        }
        let mut h = frames;
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.on_tape(tape, h, false)?;
            if k + 1 == self.reduce_after {
                h = tape.time_reduce(h, self.factor)?;
            }
        }
        Ok(h)
    }
}

/// Recurrent state of the text predictor after consuming `labels`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorState {
    pub labels: Vec<usize>,
    h: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    /// Top-layer output for the current history.
    pub h_pred: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Transducer {
    cfg: TransducerConfig,
    small: Encoder,
    large: Encoder,
    pred_embed: ParamId,
    pred_layers: Vec<LstmLayer>,
    joint_small: Dense,
    joint_large: Dense,
    joint_pred: Dense,
    joint_out: Dense,
}

impl Transducer {
    pub fn register(store: &mut ParamStore, cfg: &TransducerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let small = Encoder::register(store, cfg, EncoderPath::Small, rng)?;
        let large = Encoder::register(store, cfg, EncoderPath::Large, rng)?;
        let pred_embed = store.register(
            "transducer.pred.embed",
            &[cfg.vocab_size, cfg.pred_embed_dim],
            Init::Uniform,
            rng,
        )?;
        let mut pred_layers = Vec::new();
        let mut input = cfg.pred_embed_dim;
        for l in 1..=cfg.pred_layers {
            pred_layers.push(LstmLayer::register(store, &format!("transducer.pred.l{l}"), input, cfg.pred_units, rng)?);
            input = cfg.pred_units;
        }
        let j = cfg.joint_dim;
        let joint_small =
            Dense::register(store, "transducer.joint.enc_small", small.output_dim(), j, true, Init::Uniform, rng)?;
        let joint_large =
            Dense::register(store, "transducer.joint.enc_large", large.output_dim(), j, true, Init::Uniform, rng)?;
        let joint_pred = Dense::register(store, "transducer.joint.pred", cfg.pred_units, j, false, Init::Uniform, rng)?;
        let joint_out = Dense::register(store, "transducer.joint.out", j, cfg.vocab_size, true, Init::Uniform, rng)?;
        Ok(Self { cfg: cfg.clone(), small, large, pred_embed, pred_layers, joint_small, joint_large, joint_pred, joint_out })
    }

    pub fn config(&self) -> &TransducerConfig {
        &self.cfg
    }

    pub fn encoder(&self, path: EncoderPath) -> &Encoder {
        match path {
            EncoderPath::Small => &self.small,
            EncoderPath::Large => &self.large,
        }
    }

    pub fn enc_dim(&self, path: EncoderPath) -> usize {
        self.encoder(path).output_dim()
    }

    fn joint_enc(&self, path: EncoderPath) -> &Dense {
        match path {
            EncoderPath::Small => &self.joint_small,
            EncoderPath::Large => &self.joint_large,
        }
    }

    /// `[T × feat_dim]` frames to `[ceil(T/factor) × enc_dim]` encodings.
    pub fn encode(&self, store: &ParamStore, frames: &Tensor, path: EncoderPath) -> Result<Tensor> {
        self.check_frames(frames)?;
        let mut tape = Tape::new(store);
        let x = tape.constant(frames.clone());
        let h = self.encoder(path).on_tape(&mut tape, x)?;
        Ok(tape.value(h).clone())
    }

    pub fn check_frames(&self, frames: &Tensor) -> Result<()> {
        if frames.shape().len() != 2 || frames.cols() != self.cfg.feat_dim {
            return Err(Error::Shape(format!(
                "frames must be [T × {}], got {:?}",
                self.cfg.feat_dim,
                frames.shape()
            )));
        }
        if frames.rows() == 0 {
            return Err(Error::Invalid("cannot encode an empty frame sequence".into()));
        }
        Ok(())
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if let Some(&l) = labels.iter().find(|&&l| l == BLANK || l >= self.cfg.vocab_size) {
            return Err(Error::Invalid(format!("label {l} is blank or outside the vocabulary")));
        }
        Ok(())
    }

    /// Predictor outputs for the histories `[], [y0], …, [y0..y_{U-1}]`.
    pub fn predict_on_tape(&self, tape: &mut Tape<'_>, labels: &[usize]) -> Result<NodeId> {
        self.check_labels(labels)?;
        let mut inputs = Vec::with_capacity(labels.len() + 1);
        inputs.push(BLANK);
        inputs.extend_from_slice(labels);
        let table = tape.param(self.pred_embed);
        let mut h = tape.gather_rows(table, &inputs)?;
        for layer in &self.pred_layers {
            h = layer.on_tape(tape, h, false)?;
        }
        Ok(h)
    }

    pub fn predict(&self, store: &ParamStore, labels: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new(store);
        let h = self.predict_on_tape(&mut tape, labels)?;
        Ok(tape.value(h).clone())
    }

    pub fn project_enc_on_tape(&self, tape: &mut Tape<'_>, enc: NodeId, path: EncoderPath) -> Result<NodeId> {
        self.joint_enc(path).on_tape(tape, enc)
    }

    pub fn project_pred_on_tape(&self, tape: &mut Tape<'_>, pred: NodeId) -> Result<NodeId> {
        self.joint_pred.on_tape(tape, pred)
    }

    /// Transducer loss over joint-projected encodings `[T' × J]` and
    /// joint-projected predictor outputs `[(U+1) × J]`.
    pub fn loss_on_tape(&self, tape: &mut Tape<'_>, enc_proj: NodeId, pred_proj: NodeId, labels: &[usize]) -> Result<NodeId> {
        let w = tape.param(self.joint_out.w);
        let b = tape.param(self.joint_out.b.expect("joint output has a bias"));
        tape.rnnt_loss(enc_proj, pred_proj, w, b, labels, BLANK)
    }

    /// `-log P(labels | encodings)` for encodings given as consecutive
    /// segments, each produced by one encoder path.
    pub fn rnnt_loss(&self, store: &ParamStore, segments: &[(EncoderPath, &Tensor)], labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new(store);
        let mut parts = Vec::new();
        for (path, enc) in segments {
            if enc.rows() == 0 {
                continue;
            }
            if enc.cols() != self.enc_dim(*path) {
                return Err(Error::Shape(format!(
                    "{} encodings must have width {}, got {:?}",
                    path.tag(),
                    self.enc_dim(*path),
                    enc.shape()
                )));
            }
            let e = tape.constant((*enc).clone());
            parts.push(self.project_enc_on_tape(&mut tape, e, *path)?);
        }
        if parts.is_empty() {
            return Err(Error::Invalid("rnnt loss needs at least one encoder frame".into()));
        }
        let enc = tape.stack_rows(&parts)?;
        let pred = self.predict_on_tape(&mut tape, labels)?;
        let pred = self.project_pred_on_tape(&mut tape, pred)?;
        let loss = self.loss_on_tape(&mut tape, enc, pred, labels)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Joint-projects one encoder frame.
    pub fn project_enc(&self, store: &ParamStore, h_enc: &[f64], path: EncoderPath) -> Result<Vec<f64>> {
        if h_enc.len() != self.enc_dim(path) {
            return Err(Error::Shape(format!(
                "{} encoder frame must have width {}, got {}",
                path.tag(),
                self.enc_dim(path),
                h_enc.len()
            )));
        }
        let mut out = vec![0.0; self.cfg.joint_dim];
        self.joint_enc(path).apply(store, h_enc, &mut out);
        Ok(out)
    }

    pub fn project_pred(&self, store: &ParamStore, h_pred: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cfg.joint_dim];
        self.joint_pred.apply(store, h_pred, &mut out);
        out
    }

    /// Output logits from already projected encoder and predictor vectors.
    pub fn joint_projected(&self, store: &ParamStore, enc_proj: &[f64], pred_proj: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = enc_proj.iter().zip(pred_proj).map(|(a, b)| (a + b).tanh()).collect();
        let mut logits = vec![0.0; self.cfg.vocab_size];
        self.joint_out.apply(store, &z, &mut logits);
        logits
    }

    /// Vocabulary logits for one encoder frame and one predictor output.
    pub fn joint(&self, store: &ParamStore, h_enc: &[f64], h_pred: &[f64], path: EncoderPath) -> Result<Vec<f64>> {
        if h_pred.len() != self.cfg.pred_units {
            return Err(Error::Shape(format!(
                "predictor output must have width {}, got {}",
                self.cfg.pred_units,
                h_pred.len()
            )));
        }
        let e = self.project_enc(store, h_enc, path)?;
        let p = self.project_pred(store, h_pred);
        Ok(self.joint_projected(store, &e, &p))
    }

    pub fn initial_state(&self, store: &ParamStore) -> PredictorState {
        let u = self.cfg.pred_units;
        let mut st = PredictorState {
            labels: Vec::new(),
            h: vec![vec![0.0; u]; self.pred_layers.len()],
            c: vec![vec![0.0; u]; self.pred_layers.len()],
            h_pred: vec![0.0; u],
        };
        self.feed(store, &mut st, BLANK);
        st.labels.clear();
        st
    }

    fn feed(&self, store: &ParamStore, st: &mut PredictorState, label: usize) {
        let d = self.cfg.pred_embed_dim;
        let table = store.tensor(self.pred_embed).data();
        let mut x = table[label * d..(label + 1) * d].to_vec();
        let mut gates = vec![0.0; 4 * self.cfg.pred_units];
        for (k, layer) in self.pred_layers.iter().enumerate() {
            let w = layer.weights(store);
            lstm_cell(&w, &x, &mut st.h[k], &mut st.c[k], &mut gates);
            x.clone_from(&st.h[k]);
        }
        st.h_pred = x;
        st.labels.push(label);
    }

    /// Advances the predictor by one emitted label.
    pub fn advance(&self, store: &ParamStore, st: &PredictorState, label: usize) -> Result<PredictorState> {
        self.check_labels(&[label])?;
        let mut next = st.clone();
        self.feed(store, &mut next, label);
        Ok(next)
    }
}

/// One emitted label and the encoder frame it was emitted at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Emission {
    pub frame: usize,
    pub label: usize,
}

/// Frame-synchronous greedy search. Frames are pushed as they arrive.
pub struct GreedyDecoder<'m> {
    model: &'m Transducer,
    store: &'m ParamStore,
    state: PredictorState,
    pred_proj: Vec<f64>,
    max_symbols: usize,
    frame: usize,
    emitted: Vec<Emission>,
}

impl<'m> GreedyDecoder<'m> {
    pub fn new(model: &'m Transducer, store: &'m ParamStore, max_symbols_per_frame: usize) -> Result<Self> {
        if max_symbols_per_frame == 0 {
            return Err(Error::Invalid("max_symbols_per_frame must be ≥ 1".into()));
        }
        let state = model.initial_state(store);
        let pred_proj = model.project_pred(store, &state.h_pred);
        Ok(Self { model, store, state, pred_proj, max_symbols: max_symbols_per_frame, frame: 0, emitted: Vec::new() })
    }

    /// Consumes one joint-projected encoder frame; returns labels emitted on it.
    pub fn push_projected(&mut self, enc_proj: &[f64]) -> Result<&[Emission]> {
        let start = self.emitted.len();
        for _ in 0..self.max_symbols {
            let logits = self.model.joint_projected(self.store, enc_proj, &self.pred_proj);
            let best = kernels::argmax(&logits);
            if best == BLANK {
                break;
            }
            self.emitted.push(Emission { frame: self.frame, label: best });
            self.state = self.model.advance(self.store, &self.state, best)?;
            self.pred_proj = self.model.project_pred(self.store, &self.state.h_pred);
        }
        self.frame += 1;
        Ok(&self.emitted[start..])
    }

    pub fn push_frame(&mut self, h_enc: &[f64], path: EncoderPath) -> Result<&[Emission]> {
        let proj = self.model.project_enc(self.store, h_enc, path)?;
        self.push_projected(&proj)
    }

    pub fn emissions(&self) -> &[Emission] {
        &self.emitted
    }

    pub fn labels(&self) -> Vec<usize> {
        self.emitted.iter().map(|e| e.label).collect()
    }

    pub fn frames_consumed(&self) -> usize {
        self.frame
    }
}

/// Decodes a whole sequence of single-path encodings.
pub fn greedy_decode(
    model: &Transducer,
    store: &ParamStore,
    encodings: &Tensor,
    path: EncoderPath,
    max_symbols_per_frame: usize,
) -> Result<Vec<usize>> {
    let mut dec = GreedyDecoder::new(model, store, max_symbols_per_frame)?;
    for t in 0..encodings.rows() {
        dec.push_frame(encodings.row(t), path)?;
    }
    Ok(dec.labels())
}
