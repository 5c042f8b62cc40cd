//! Deterministic synthetic corpus: `[filler] <wake word> <command>` utterances
//! whose frames are per-character prototypes plus gaussian noise.
//!
//! Characters come in acoustic confusion pairs (b/p, d/t, ...) whose
//! prototypes sit close together, so spelling a rare word from acoustics alone
//! is error-prone while frequent words are rescued by the predictor.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::biasing::CatalogEntry;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::text::{self, ALPHABET, VOCAB_SIZE};

/// Acoustically confusable letter pairs.
pub const CONFUSION_PAIRS: [(char, char); 11] = [
    ('b', 'p'),
    ('d', 't'),
    ('g', 'k'),
    ('f', 'v'),
    ('s', 'z'),
    ('m', 'n'),
    ('a', 'e'),
    ('i', 'y'),
    ('o', 'u'),
    ('c', 'q'),
    ('l', 'r'),
];

/// Largest noise level at which nearest-prototype classification of single
/// frames stays at or above 99% under the default acoustics.
pub const SEPARABLE_NOISE_STD: f64 = 0.1;

/// Class index of a character: one per confusion pair, one per other symbol.
pub fn acoustic_class(c: char) -> usize {
    if let Some(i) = CONFUSION_PAIRS.iter().position(|&(a, b)| a == c || b == c) {
        return i;
    }
    let singles: Vec<char> = ALPHABET.chars().filter(|&a| CONFUSION_PAIRS.iter().all(|&(x, y)| x != a && y != a)).collect();
    CONFUSION_PAIRS.len() + singles.iter().position(|&a| a == c).unwrap_or(singles.len())
}

/// Per-token prototype vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Acoustics {
    prototypes: Tensor,
}

impl Acoustics {
    /// Class centres are standard normal; pair members sit `pair_spread`
    /// either side of their centre along a random unit direction.
    pub fn new(feat_dim: usize, pair_spread: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centre = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..feat_dim).map(|_| StandardNormal.sample(rng)).collect() };
        let mut protos = Tensor::zeros(&[VOCAB_SIZE, feat_dim]);
        for &(a, b) in &CONFUSION_PAIRS {
            let c = centre(&mut rng);
            let mut u = centre(&mut rng);
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter_mut().for_each(|x| *x /= norm);
            for (ch, sign) in [(a, 1.0), (b, -1.0)] {
                let id = text::token_id(ch).expect("pair letters are in the alphabet");
                for (k, v) in protos.row_mut(id).iter_mut().enumerate() {
                    *v = c[k] + sign * pair_spread * u[k];
                }
            }
        }
        for ch in ALPHABET.chars() {
            if CONFUSION_PAIRS.iter().all(|&(x, y)| x != ch && y != ch) {
                let c = centre(&mut rng);
                let id = text::token_id(ch).expect("alphabet symbol");
                protos.row_mut(id).copy_from_slice(&c);
            }
        }
        Self { prototypes: protos }
    }

    pub fn feat_dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn prototype(&self, token: usize) -> &[f64] {
        self.prototypes.row(token)
    }

    /// `frames_per_token` noisy copies of each token's prototype.
    pub fn featurize(&self, tokens: &[usize], frames_per_token: usize, noise_std: f64, seed: u64) -> Result<Tensor> {
        if let Some(&t) = tokens.iter().find(|&&t| t == 0 || t >= VOCAB_SIZE) {
            return Err(Error::Invalid(format!("token {t} has no prototype")));
        }
        let noise = Normal::new(0.0, noise_std.max(0.0)).map_err(|e| Error::Invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.feat_dim();
        let mut data = Vec::with_capacity(tokens.len() * frames_per_token * d);
        for &t in tokens {
            for _ in 0..frames_per_token {
                data.extend(self.prototype(t).iter().map(|&p| p + noise.sample(&mut rng)));
            }
        }
        Tensor::matrix(tokens.len() * frames_per_token, d, data)
    }

    /// Token whose prototype is nearest to `frame`.
    pub fn nearest(&self, frame: &[f64]) -> usize {
        (1..VOCAB_SIZE)
            .map(|t| {
                let d: f64 = self.prototype(t).iter().zip(frame).map(|(p, x)| (p - x) * (p - x)).sum();
                (t, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(t, _)| t)
            .expect("non-empty vocabulary")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub seed: u64,
    /// Seeds the prototypes; corpora meant to be used together must share it.
    pub acoustic_seed: u64,
    pub n_train: usize,
    pub n_held_out: usize,
    pub feat_dim: usize,
    pub frames_per_token: usize,
    pub noise_std: f64,
    pub pair_spread: f64,
    pub wake_words: Vec<String>,
    /// Share of wake-word utterances that use `wake_words`; the rest use a
    /// freshly generated pseudo-word.
    pub custom_ww_fraction: f64,
    /// Proper-name pool; generated from `name_pool_seed` when empty.
    pub proper_names: Vec<String>,
    pub name_pool_size: usize,
    pub name_pool_seed: u64,
    pub carrier_phrases: Vec<String>,
    pub general_phrases: Vec<String>,
    pub fillers: Vec<String>,
    pub filler_prob: f64,
    pub negative_ww_fraction: f64,
    /// Utterances with no wake word at all (`ww_end_frame = -1`).
    pub no_ww_fraction: f64,
    /// Proper-name utterances per general utterance.
    pub name_to_general_ratio: f64,
    /// Proper names in each utterance's catalog, spoken name included.
    pub catalog_names: usize,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 17,
            acoustic_seed: 1234,
            n_train: 1600,
            n_held_out: 400,
            feat_dim: 16,
            frames_per_token: 2,
            noise_std: 0.5,
            pair_spread: 0.35,
            wake_words: strings(&["hey shaq", "ziggy", "computer", "jarvis", "amigo", "nova"]),
            custom_ww_fraction: 1.0,
            proper_names: Vec::new(),
            name_pool_size: 60,
            name_pool_seed: 5,
            carrier_phrases: strings(&["call", "message", "text", "ring"]),
            general_phrases: strings(&[
                "turn on the lights",
                "turn off the lights",
                "what time is it",
                "play some music",
                "set a timer",
                "stop",
                "what's the weather today",
                "volume up",
                "volume down",
                "lock the door",
                "read my messages",
                "add milk to my list",
                "tell me a joke",
                "good morning",
                "open the garage",
                "how cold is it outside",
            ]),
            fillers: strings(&["um", "so", "okay", "well"]),
            filler_prob: 0.3,
            negative_ww_fraction: 0.25,
            no_ww_fraction: 0.05,
            name_to_general_ratio: 0.4,
            catalog_names: 30,
        }
    }
}

impl CorpusSpec {
    /// The variant used to pretrain the transducer: generic pseudo-word wake
    /// words and an unrelated proper-name pool.
    pub fn pretraining(&self) -> Self {
        Self {
            seed: self.seed ^ 0x9e37_79b9,
            custom_ww_fraction: 0.0,
            proper_names: Vec::new(),
            name_pool_seed: self.name_pool_seed.wrapping_add(1_000_003),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |x: f64, name: &str| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {x}")))
            }
        };
        frac(self.custom_ww_fraction, "custom_ww_fraction")?;
        frac(self.filler_prob, "filler_prob")?;
        frac(self.negative_ww_fraction, "negative_ww_fraction")?;
        frac(self.no_ww_fraction, "no_ww_fraction")?;
        if self.wake_words.is_empty() {
            return Err(Error::Config("at least one wake word is required".into()));
        }
        if self.carrier_phrases.is_empty() || self.general_phrases.is_empty() {
            return Err(Error::Config("carrier and general phrase lists must be non-empty".into()));
        }
        if self.proper_names.is_empty() && self.name_pool_size == 0 {
            return Err(Error::Config("proper-name pool is empty".into()));
        }
        if self.frames_per_token == 0 || self.feat_dim == 0 {
            return Err(Error::Config("frames_per_token and feat_dim must be positive".into()));
        }
        if self.name_to_general_ratio < 0.0 || !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Config("ratios and noise_std must be non-negative".into()));
        }
        for s in self.wake_words.iter().chain(&self.proper_names).chain(&self.carrier_phrases).chain(&self.general_phrases).chain(&self.fillers) {
            if text::tokenize(s)?.is_empty() {
                return Err(Error::Config("lexicon entries must be non-empty".into()));
            }
        }
        Ok(())
    }

    pub fn acoustics(&self) -> Acoustics {
        Acoustics::new(self.feat_dim, self.pair_spread, self.acoustic_seed)
    }

    pub fn name_pool(&self) -> Vec<String> {
        if !self.proper_names.is_empty() {
            return self.proper_names.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.name_pool_seed);
        let taken: HashSet<&str> = self.wake_words.iter().map(|s| s.as_str()).collect();
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        while out.len() < self.name_pool_size {
            let n = pseudo_word(&mut rng, 2, 3);
            if !taken.contains(n.as_str()) && seen.insert(n.clone()) {
                out.push(n);
            }
        }
        out
    }
}

const CONSONANTS: &[char] = &['b', 'c', 'd', 'f', 'g', 'h', 'j', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'w', 'z'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u', 'y'];

fn pseudo_word(rng: &mut ChaCha8Rng, min_syl: usize, max_syl: usize) -> String {
    let n = rng.gen_range(min_syl..=max_syl);
    let mut s = String::new();
    for _ in 0..n {
        s.push(*CONSONANTS.choose(rng).expect("non-empty"));
        s.push(*VOWELS.choose(rng).expect("non-empty"));
    }
    s
}

/// True when `text` starts with one of `wake_words` followed by a word
/// boundary.
pub fn starts_with_wake_word(text: &str, wake_words: &[String]) -> bool {
    wake_words.iter().any(|w| {
        text.strip_prefix(w.as_str()).is_some_and(|rest| rest.is_empty() || rest.starts_with(' '))
    })
}

/// A one- or two-edit perturbation of `ww` that is acoustically distinct:
/// substitutions and insertions use letters outside the edited letter's
/// confusion class.
pub fn confusable(ww: &str, wake_words: &[String], rng: &mut ChaCha8Rng) -> String {
    let letters: Vec<char> = "abcdefghijklmnopqrstuvwxyz".chars().collect();
    loop {
        let mut chars: Vec<char> = ww.chars().collect();
        let edits = rng.gen_range(1..=2);
        for _ in 0..edits {
            let pos: Vec<usize> = (0..chars.len()).filter(|&i| chars[i] != ' ').collect();
            let Some(&i) = pos.choose(rng) else { break };
            let far: Vec<char> = letters.iter().copied().filter(|&c| acoustic_class(c) != acoustic_class(chars[i])).collect();
            match rng.gen_range(0..3) {
                0 => chars[i] = *far.choose(rng).expect("non-empty"),
                1 => chars.insert(i + 1, *far.choose(rng).expect("non-empty")),
                _ if pos.len() > 2 => {
                    chars.remove(i);
                }
                _ => chars[i] = *far.choose(rng).expect("non-empty"),
            }
        }
        let s: String = chars.into_iter().collect();
        if s != ww && !s.contains("  ") && !starts_with_wake_word(&s, wake_words) {
            return s;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtteranceKind {
    ProperName,
    General,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub transcript: String,
    pub tokens: Vec<usize>,
    pub frames: Tensor,
    pub ww_end_frame: i64,
    pub is_true_ww: bool,
    pub kind: UtteranceKind,
    pub filler: Option<String>,
    /// Spoken wake word or confusable phrase; `None` when there is no lead-in.
    pub lead: Option<String>,
    /// Post-wake-word command text.
    pub command: String,
    pub proper_name: Option<String>,
    pub catalog_names: Vec<String>,
}

impl Utterance {
    /// The catalog presented with this utterance: every enabled wake word
    /// followed by its proper names.
    pub fn catalog(&self, wake_words: &[String]) -> Result<Vec<CatalogEntry>> {
        let mut out = Vec::with_capacity(wake_words.len() + self.catalog_names.len());
        for w in wake_words {
            out.push(CatalogEntry::wake_word(w)?);
        }
        for n in &self.catalog_names {
            out.push(CatalogEntry::proper_name(n)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub train: Vec<Utterance>,
    pub held_out: Vec<Utterance>,
}

fn stream_rng(seed: u64, split: u64, index: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split << 48) | ((index as u64) << 4) | purpose);
    rng
}

struct Lexicon {
    names: Vec<String>,
    acoustics: Acoustics,
}

struct Composition {
    filler: Option<String>,
    lead: Option<String>,
    is_true_ww: bool,
    kind: UtteranceKind,
    command: String,
    proper_name: Option<String>,
    catalog_names: Vec<String>,
}

fn compose(spec: &CorpusSpec, lex: &Lexicon, rng: &mut ChaCha8Rng) -> Composition {
    let name_share = spec.name_to_general_ratio / (1.0 + spec.name_to_general_ratio);
    let kind = if rng.gen_bool(name_share) { UtteranceKind::ProperName } else { UtteranceKind::General };
    let no_ww = rng.gen_bool(spec.no_ww_fraction);
    let negative = !no_ww && rng.gen_bool(spec.negative_ww_fraction);
    let ww = if rng.gen_bool(spec.custom_ww_fraction) {
        spec.wake_words.choose(rng).expect("validated").clone()
    } else {
        pseudo_word(rng, 2, 3)
    };
    let lead = if no_ww {
        None
    } else if negative {
        Some(confusable(&ww, &spec.wake_words, rng))
    } else {
        Some(ww)
    };
    let filler = if lead.is_some() && !spec.fillers.is_empty() && rng.gen_bool(spec.filler_prob) {
        spec.fillers.choose(rng).cloned()
    } else {
        None
    };
    let n_cat = spec.catalog_names.min(lex.names.len());
    let mut catalog: Vec<String> = lex.names.choose_multiple(rng, n_cat).cloned().collect();
    let (command, name) = match kind {
        UtteranceKind::ProperName => {
            let name = lex.names.choose(rng).expect("validated").clone();
            if !catalog.contains(&name) {
                if catalog.is_empty() {
                    catalog.push(name.clone());
                } else {
                    let k = rng.gen_range(0..catalog.len());
                    catalog[k] = name.clone();
                }
            }
            let carrier = spec.carrier_phrases.choose(rng).expect("validated");
            (format!("{carrier} {name}"), Some(name))
        }
        UtteranceKind::General => (spec.general_phrases.choose(rng).expect("validated").clone(), None),
    };
    Composition { filler, lead, is_true_ww: !no_ww && !negative, kind, command, proper_name: name, catalog_names: catalog }
}

fn build(spec: &CorpusSpec, lex: &Lexicon, split: u64, index: usize, attempt: u64, prefix: &str) -> Result<Utterance> {
    let mut rng = stream_rng(spec.seed, split, index, 2 * attempt);
    let Composition { filler, lead, is_true_ww, kind, command, proper_name, catalog_names } = compose(spec, lex, &mut rng);
    let mut lead_text = String::new();
    if let Some(f) = &filler {
        lead_text.push_str(f);
        lead_text.push(' ');
    }
    if let Some(l) = &lead {
        lead_text.push_str(l);
    }
    let transcript = if lead_text.is_empty() { command.clone() } else { format!("{lead_text} {command}") };
    let tokens = text::tokenize(&transcript)?;
    let lead_tokens = lead_text.chars().count();
    let ww_end_frame = (lead_tokens * spec.frames_per_token) as i64 - 1;
    let noise_seed = stream_rng(spec.seed, split, index, 2 * attempt + 1).gen();
    let frames = lex.acoustics.featurize(&tokens, spec.frames_per_token, spec.noise_std, noise_seed)?;
    Ok(Utterance {
        id: format!("{prefix}-{index:06}"),
        transcript,
        tokens,
        frames,
        ww_end_frame,
        is_true_ww,
        kind,
        filler,
        lead,
        command,
        proper_name,
        catalog_names,
    })
}

/// Transcript plus presented catalog.
fn composition_key(u: &Utterance) -> (String, Vec<String>) {
    (u.transcript.clone(), u.catalog_names.clone())
}

/// Train and held-out sets. No held-out (transcript, catalog) composition
/// occurs in training and every utterance has its own noise stream.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let lex = Lexicon { names: spec.name_pool(), acoustics: spec.acoustics() };
    let mut train = Vec::with_capacity(spec.n_train);
    let mut seen = HashSet::new();
    for i in 0..spec.n_train {
        let u = build(spec, &lex, 0, i, 0, "train")?;
        seen.insert(composition_key(&u));
        train.push(u);
    }
    let mut held_out = Vec::with_capacity(spec.n_held_out);
    for i in 0..spec.n_held_out {
        let mut attempt = 0;
        let u = loop {
            let u = build(spec, &lex, 1, i, attempt, "heldout")?;
            if !seen.contains(&composition_key(&u)) {
                break u;
            }
            attempt += 1;
            if attempt > 1000 {
                return Err(Error::Config("lexicon too small for a disjoint held-out set".into()));
            }
        };
        held_out.push(u);
    }
    Ok(Corpus { spec: spec.clone(), train, held_out })
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    id: String,
    transcript: String,
    is_true_ww: bool,
    ww_end_frame: i64,
    frames: Vec<Vec<f64>>,
    kind: UtteranceKind,
    filler: Option<String>,
    lead: Option<String>,
    command: String,
    proper_name: Option<String>,
    catalog_names: Vec<String>,
}

pub fn write_jsonl<W: Write>(utts: &[Utterance], mut out: W) -> Result<()> {
    for u in utts {
        let rec = UtteranceRecord {
            id: u.id.clone(),
            transcript: u.transcript.clone(),
            is_true_ww: u.is_true_ww,
            ww_end_frame: u.ww_end_frame,
            frames: u.frames.row_vecs(),
            kind: u.kind,
            filler: u.filler.clone(),
            lead: u.lead.clone(),
            command: u.command.clone(),
            proper_name: u.proper_name.clone(),
            catalog_names: u.catalog_names.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: UtteranceRecord = serde_json::from_str(&line)?;
        let tokens = text::tokenize(&r.transcript)?;
        let frames = Tensor::from_rows(&r.frames)?;
        out.push(Utterance {
            id: r.id,
            transcript: r.transcript,
            tokens,
            frames,
            ww_end_frame: r.ww_end_frame,
            is_true_ww: r.is_true_ww,
            kind: r.kind,
            filler: r.filler,
            lead: r.lead,
            command: r.command,
            proper_name: r.proper_name,
            catalog_names: r.catalog_names,
        });
    }
    Ok(out)
}
