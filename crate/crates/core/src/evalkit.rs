//! Word error rate, wake-word accept/reject rates and relative deltas.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Levenshtein distance between two sequences.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Word-level edit distance over the reference length.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Metric("WER needs a non-empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Corpus WER: total edits over total reference words.
pub fn corpus_wer<S: AsRef<str>>(pairs: &[(S, S)]) -> Result<f64> {
    let (mut edits, mut n) = (0usize, 0usize);
    for (r, h) in pairs {
        let (r, h) = (words(r.as_ref()), words(h.as_ref()));
        edits += edit_distance(&r, &h);
        n += r.len();
    }
    if n == 0 {
        return Err(Error::Metric("WER needs a non-empty reference".into()));
    }
    Ok(edits as f64 / n as f64)
}

/// `(WER_B − WER_A) / WER_B`; positive is an improvement.
pub fn werr(wer_b: f64, wer_a: f64) -> Result<f64> {
    if wer_b == 0.0 {
        return Err(Error::Metric("WERR undefined for a zero baseline WER".into()));
    }
    Ok((wer_b - wer_a) / wer_b)
}

/// `(new − base) / base`.
pub fn relative_change(base: f64, new: f64) -> Result<f64> {
    if base == 0.0 {
        return Err(Error::Metric("relative change undefined for a zero baseline".into()));
    }
    Ok((new - base) / base)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WwDecision {
    pub id: String,
    pub ground_truth_positive: bool,
    pub accepted: bool,
}

/// Accepts when the decoded text, after dropping at most one leading filler
/// word, starts with an enabled wake word followed by a word boundary.
pub fn ww_accept(decoded: &str, wake_words: &[String], fillers: &[String]) -> bool {
    let text = decoded.trim_start();
    let hit = |t: &str| {
        wake_words.iter().any(|w| t.strip_prefix(w.as_str()).is_some_and(|r| r.is_empty() || r.starts_with(' ')))
    };
    if hit(text) {
        return true;
    }
    match text.split_once(' ') {
        Some((first, rest)) if fillers.iter().any(|f| f == first) => hit(rest.trim_start()),
        _ => false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WwMetrics {
    pub tar: f64,
    pub trr: f64,
    pub f1: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub accepts: usize,
    pub rejects: usize,
}

pub fn f1(tar: f64, trr: f64) -> f64 {
    if tar + trr == 0.0 {
        0.0
    } else {
        2.0 * tar * trr / (tar + trr)
    }
}

pub fn ww_metrics(decisions: &[WwDecision]) -> Result<WwMetrics> {
    let n_pos = decisions.iter().filter(|d| d.ground_truth_positive).count();
    let n_neg = decisions.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(format!("need positives and negatives, got {n_pos} and {n_neg}")));
    }
    let tp = decisions.iter().filter(|d| d.ground_truth_positive && d.accepted).count();
    let tn = decisions.iter().filter(|d| !d.ground_truth_positive && !d.accepted).count();
    let accepts = decisions.iter().filter(|d| d.accepted).count();
    let tar = tp as f64 / n_pos as f64;
    let trr = tn as f64 / n_neg as f64;
    Ok(WwMetrics { tar, trr, f1: f1(tar, trr), n_pos, n_neg, accepts, rejects: decisions.len() - accepts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// WER of post-wake-word general commands.
    pub wer: f64,
    pub tar: f64,
    pub trr: f64,
    pub f1: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub accepts: usize,
    pub rejects: usize,
    /// WER of post-wake-word proper-name commands.
    pub proper_name_wer: f64,
    /// Share of proper-name utterances whose name is decoded as a whole word.
    pub proper_name_accuracy: f64,
    pub n_general: usize,
    pub n_proper_name: usize,
}

/// Signed relative deltas; `None` where the baseline denominator is zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeReport {
    pub f1r: Option<f64>,
    pub tarr: Option<f64>,
    pub trrr: Option<f64>,
    pub werr: Option<f64>,
    pub proper_name_werr: Option<f64>,
    pub proper_name_accuracy_r: Option<f64>,
}

pub fn relative_report(base: &MetricsReport, new: &MetricsReport) -> RelativeReport {
    RelativeReport {
        f1r: relative_change(base.f1, new.f1).ok(),
        tarr: relative_change(base.tar, new.tar).ok(),
        trrr: relative_change(base.trr, new.trr).ok(),
        werr: werr(base.wer, new.wer).ok(),
        proper_name_werr: werr(base.proper_name_wer, new.proper_name_wer).ok(),
        proper_name_accuracy_r: relative_change(base.proper_name_accuracy, new.proper_name_accuracy).ok(),
    }
}

/// Signed percentage with two decimals, or `n/a`.
pub fn pct(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{:+.2}%", 100.0 * v),
        None => "n/a".to_string(),
    }
}

/// Text table with one row per candidate, relative to the baseline.
pub fn format_table(baseline: &str, rows: &[(String, RelativeReport)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "relative to {baseline}");
    let _ = writeln!(s, "{:<28} {:>9} {:>9} {:>9} {:>9} {:>9}", "model", "F1R", "TARR", "TRRR", "WERR", "PN-WERR");
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{:<28} {:>9} {:>9} {:>9} {:>9} {:>9}",
            name,
            pct(r.f1r),
            pct(r.tarr),
            pct(r.trrr),
            pct(r.werr),
            pct(r.proper_name_werr)
        );
    }
    s
}
