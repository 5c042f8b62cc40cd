//! Transducer lattice recursions in log space.
//!
//! The lattice has `T` frames and `U + 1` label positions. Node `(t, u)`
//! carries a blank log-probability (advance `t`) and, for `u < U`, the
//! log-probability of emitting `labels[u]` (advance `u`).

use super::kernels::log_sum_exp;

/// Forward variables and the total log-likelihood.
#[derive(Clone, Debug)]
pub struct Lattice {
    pub frames: usize,
    pub labels: usize,
    /// `log_alpha[t * (U + 1) + u]`.
    pub log_alpha: Vec<f64>,
    pub log_likelihood: f64,
}

/// `lp_blank` is `T × (U+1)`, `lp_label` is `T × U`, both row-major.
pub fn forward_lattice(lp_blank: &[f64], lp_label: &[f64], frames: usize, labels: usize) -> Lattice {
    let w = labels + 1;
    let mut alpha = vec![f64::NEG_INFINITY; frames * w];
    alpha[0] = 0.0;
    for t in 0..frames {
        for u in 0..w {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = f64::NEG_INFINITY;
            if t > 0 {
                a = alpha[(t - 1) * w + u] + lp_blank[(t - 1) * w + u];
            }
            if u > 0 {
                a = log_sum_exp(a, alpha[t * w + u - 1] + lp_label[t * labels + u - 1]);
            }
            alpha[t * w + u] = a;
        }
    }
    let ll = alpha[(frames - 1) * w + labels] + lp_blank[(frames - 1) * w + labels];
    Lattice { frames, labels, log_alpha: alpha, log_likelihood: ll }
}

/// Backward variables: `log_beta[t * (U+1) + u]` is the log-probability of
/// completing the alignment from node `(t, u)`.
pub fn backward_lattice(lp_blank: &[f64], lp_label: &[f64], frames: usize, labels: usize) -> Vec<f64> {
    let w = labels + 1;
    let mut beta = vec![f64::NEG_INFINITY; frames * w];
    for t in (0..frames).rev() {
        for u in (0..w).rev() {
            let i = t * w + u;
            if t == frames - 1 && u == labels {
                beta[i] = lp_blank[i];
                continue;
            }
            let mut b = f64::NEG_INFINITY;
            if t + 1 < frames {
                b = lp_blank[i] + beta[(t + 1) * w + u];
            }
            if u < labels {
                b = log_sum_exp(b, lp_label[t * labels + u] + beta[t * w + u + 1]);
            }
            beta[i] = b;
        }
    }
    beta
}

/// Gradients of the negative log-likelihood with respect to every blank and
/// label log-probability, laid out like the inputs.
pub fn nll_grads(
    lp_blank: &[f64],
    lp_label: &[f64],
    lattice: &Lattice,
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (frames, labels) = (lattice.frames, lattice.labels);
    let w = labels + 1;
    let ll = lattice.log_likelihood;
    let alpha = &lattice.log_alpha;
    let mut g_blank = vec![0.0; frames * w];
    let mut g_label = vec![0.0; frames * labels];
    for t in 0..frames {
        for u in 0..w {
            let i = t * w + u;
            if t + 1 < frames {
                g_blank[i] = -(alpha[i] + lp_blank[i] + beta[(t + 1) * w + u] - ll).exp();
            } else if u == labels {
                g_blank[i] = -(alpha[i] + lp_blank[i] - ll).exp();
            }
            if u < labels {
                g_label[t * labels + u] =
                    -(alpha[i] + lp_label[t * labels + u] + beta[i + 1] - ll).exp();
            }
        }
    }
    (g_blank, g_label)
}
