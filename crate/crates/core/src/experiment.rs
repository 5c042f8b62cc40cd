//! End-to-end experiment: corpus generation, pretraining, biasing
//! fine-tuning, decoding and evaluation against the ablated baseline.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::biasing::BiasMode;
use crate::datagen::{generate_corpus, Corpus, CorpusSpec, Utterance, UtteranceKind};
use crate::error::Result;
use crate::evalkit::{self, MetricsReport, RelativeReport, WwDecision};
use crate::model::{Model, ModelConfig};
use crate::runtime::{process_stream, AudioStream, DecodeOptions, OracleBoundary, StreamOutput};
use crate::text;
use crate::training::{finetune_biasing, pretrain, Optimizer, TrainConfig, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub max_symbols_per_frame: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            model: ModelConfig::default(),
            model_seed: 11,
            pretrain: TrainConfig { learning_rate: 2.0, epochs: 15, ..TrainConfig::default() },
            finetune: TrainConfig {
                learning_rate: 0.003,
                epochs: 16,
                optimizer: Optimizer::Adam,
                catalog_dropout: 0.5,
                ..TrainConfig::default()
            },
            max_symbols_per_frame: 4,
        }
    }
}

impl ExperimentConfig {
    /// Configuration of the model trained in the first stage.
    pub fn pretrain_model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.biasing.mode = BiasMode::PretrainedBase;
        m
    }
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub id: String,
    pub text: String,
    /// Text emitted on post-wake-word frames.
    pub post_ww_text: String,
    pub output: StreamOutput,
}

pub fn decode_utterance(model: &Model, u: &Utterance, wake_words: &[String], opts: DecodeOptions) -> Result<Decoded> {
    let stream = AudioStream { id: u.id.clone(), frames: u.frames.clone(), ww_end_frame: u.ww_end_frame };
    let cache = match model.biasing() {
        Some(b) => Some(b.build_cache(&model.store, &u.catalog(wake_words)?)?),
        None => None,
    };
    let output = process_stream(model, &stream, &OracleBoundary, cache.as_ref(), opts)?;
    Ok(Decoded {
        id: u.id.clone(),
        text: text::detokenize(&output.labels),
        post_ww_text: text::detokenize(&output.post_ww_labels()),
        output,
    })
}

/// Scores decoded utterances (paired by position with `utts`).
pub fn score(utts: &[Utterance], decoded: &[Decoded], wake_words: &[String], fillers: &[String]) -> Result<MetricsReport> {
    let mut decisions = Vec::new();
    let mut general = Vec::new();
    let mut names = Vec::new();
    let mut name_hits = 0usize;
    for (u, d) in utts.iter().zip(decoded) {
        decisions.push(WwDecision {
            id: u.id.clone(),
            ground_truth_positive: u.is_true_ww,
            accepted: evalkit::ww_accept(&d.text, wake_words, fillers),
        });
        match u.kind {
            UtteranceKind::General => general.push((u.command.clone(), d.post_ww_text.clone())),
            UtteranceKind::ProperName => {
                names.push((u.command.clone(), d.post_ww_text.clone()));
                let name = u.proper_name.as_deref().unwrap_or_default();
                if evalkit::words(&d.post_ww_text).contains(&name) {
                    name_hits += 1;
                }
            }
        }
    }
    let ww = evalkit::ww_metrics(&decisions)?;
    Ok(MetricsReport {
        wer: evalkit::corpus_wer(&general)?,
        tar: ww.tar,
        trr: ww.trr,
        f1: ww.f1,
        n_pos: ww.n_pos,
        n_neg: ww.n_neg,
        accepts: ww.accepts,
        rejects: ww.rejects,
        proper_name_wer: evalkit::corpus_wer(&names)?,
        proper_name_accuracy: name_hits as f64 / names.len().max(1) as f64,
        n_general: general.len(),
        n_proper_name: names.len(),
    })
}

pub fn decode_all(model: &Model, utts: &[Utterance], wake_words: &[String], opts: DecodeOptions) -> Result<Vec<Decoded>> {
    utts.iter().map(|u| decode_utterance(model, u, wake_words, opts)).collect()
}

pub fn evaluate(model: &Model, utts: &[Utterance], spec: &CorpusSpec, max_symbols: usize) -> Result<MetricsReport> {
    let opts = DecodeOptions { max_symbols_per_frame: max_symbols, trace: false };
    let decoded = decode_all(model, utts, &spec.wake_words, opts)?;
    score(utts, &decoded, &spec.wake_words, &spec.fillers)
}

pub struct PipelineResult {
    pub corpus: Corpus,
    pub pretrain_corpus: Corpus,
    pub pretrained: Model,
    pub finetuned: Model,
    pub pretrain_log: TrainLog,
    pub finetune_log: TrainLog,
    pub baseline: MetricsReport,
    pub candidate: MetricsReport,
    pub relative: RelativeReport,
    pub seconds: f64,
}

/// Runs both training stages and evaluates the fine-tuned model against the
/// same weights with biasing removed.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineResult> {
    let start = Instant::now();
    let corpus = generate_corpus(&cfg.corpus)?;
    let pretrain_corpus = generate_corpus(&cfg.corpus.pretraining())?;
    let mut pretrained = Model::new(&cfg.pretrain_model_config(), cfg.model_seed)?;
    let pretrain_log = pretrain(&mut pretrained, &pretrain_corpus.train, &cfg.pretrain)?;
    let mut finetuned = Model::from_pretrained(&pretrained, &cfg.model, cfg.model_seed)?;
    let finetune_log = finetune_biasing(&mut finetuned, &corpus.train, &cfg.corpus.wake_words, &cfg.finetune)?;
    let baseline = evaluate(&pretrained, &corpus.held_out, &cfg.corpus, cfg.max_symbols_per_frame)?;
    let candidate = evaluate(&finetuned, &corpus.held_out, &cfg.corpus, cfg.max_symbols_per_frame)?;
    let relative = evalkit::relative_report(&baseline, &candidate);
    Ok(PipelineResult {
        corpus,
        pretrain_corpus,
        pretrained,
        finetuned,
        pretrain_log,
        finetune_log,
        baseline,
        candidate,
        relative,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// How often the spoken wake word wins the attention on lead-in frames that
/// overlap it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionFocus {
    pub frames: usize,
    /// Spoken wake word has the largest weight among all active rows,
    /// no-bias included.
    pub argmax_hits: usize,
    /// Spoken wake word outweighs every other wake-word row.
    pub ww_hits: usize,
}

impl AttentionFocus {
    pub fn argmax_rate(&self) -> f64 {
        self.argmax_hits as f64 / self.frames.max(1) as f64
    }

    pub fn ww_rate(&self) -> f64 {
        self.ww_hits as f64 / self.frames.max(1) as f64
    }
}

pub fn attention_focus(model: &Model, utts: &[Utterance], spec: &CorpusSpec) -> Result<AttentionFocus> {
    let mut focus = AttentionFocus::default();
    let factor = model.config().transducer.time_reduction_factor;
    for u in utts.iter().filter(|u| u.is_true_ww) {
        let Some(ww) = &u.lead else { continue };
        let opts = DecodeOptions { max_symbols_per_frame: 4, trace: true };
        let d = decode_utterance(model, u, &spec.wake_words, opts)?;
        let Some(trace) = d.output.trace else { continue };
        let Some(row) = spec.wake_words.iter().position(|w| w == ww) else { continue };
        let ww_frames = ww.chars().count() * spec.frames_per_token;
        let first = (u.ww_end_frame + 1) as usize - ww_frames;
        let last = u.ww_end_frame as usize;
        for k in 0..d.output.small_frames {
            let (lo, hi) = (k * factor, k * factor + factor - 1);
            if hi < first || lo > last {
                continue;
            }
            let w = trace.weights.row(k);
            focus.frames += 1;
            let best = crate::nn::kernels::argmax(w);
            focus.argmax_hits += usize::from(best == row);
            let ww_rows = spec.wake_words.len();
            focus.ww_hits += usize::from((0..ww_rows).all(|j| j == row || w[j] < w[row]));
        }
    }
    Ok(focus)
}
