//! Plain forward kernels shared by the tape ops and the streaming decoder.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `out = W x (+ b)` with `W` row-major `[out.len() × x.len()]`.
#[inline]
pub fn affine(w: &[f64], x: &[f64], b: Option<&[f64]>, out: &mut [f64]) {
    let n = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let mut v = dot(&w[i * n..(i + 1) * n], x);
        if let Some(b) = b {
            v += b[i];
        }
        *o = v;
    }
}

/// `out += Wᵀ g` with `W` row-major `[g.len() × out.len()]`.
#[inline]
pub fn affine_transpose_acc(w: &[f64], g: &[f64], out: &mut [f64]) {
    let n = out.len();
    for (i, &gi) in g.iter().enumerate() {
        if gi == 0.0 {
            continue;
        }
        let row = &w[i * n..(i + 1) * n];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += gi * wv;
        }
    }
}

/// `dW += g ⊗ x`.
#[inline]
pub fn outer_acc(dw: &mut [f64], g: &[f64], x: &[f64]) {
    let n = x.len();
    for (i, &gi) in g.iter().enumerate() {
        if gi == 0.0 {
            continue;
        }
        let row = &mut dw[i * n..(i + 1) * n];
        for (d, &xv) in row.iter_mut().zip(x) {
            *d += gi * xv;
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Numerically stable softmax in place.
pub fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

/// Log-softmax in place; returns nothing, leaves log-probabilities in `z`.
pub fn log_softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
    let lse = m + s.ln();
    for v in z.iter_mut() {
        *v -= lse;
    }
}

pub fn softmax(z: &Tensor) -> Result<Tensor> {
    if z.numel() == 0 {
        return Err(Error::Invalid("softmax of an empty vector".into()));
    }
    let mut out = z.data().to_vec();
    softmax_in_place(&mut out);
    Tensor::new(z.shape().to_vec(), out)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `W x + b` for a single vector.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n_out, n_in) = match w.shape() {
        [o, i] => (*o, *i),
        s => return Err(Error::Shape(format!("dense weight must be 2-D, got {s:?}"))),
    };
    if x.numel() != n_in || b.numel() != n_out {
        return Err(Error::Shape(format!(
            "dense weight {:?} incompatible with input {:?} and bias {:?}",
            w.shape(),
            x.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; n_out];
    affine(w.data(), x.data(), Some(b.data()), &mut out);
    Ok(Tensor::vector(out))
}

/// Borrowed weights of one LSTM layer. Gate order along the `4u` axis is
/// input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights<'a> {
    pub w_ih: &'a [f64],
    pub w_hh: &'a [f64],
    pub b: &'a [f64],
    pub input: usize,
    pub units: usize,
}

impl<'a> LstmWeights<'a> {
    pub fn from_tensors(w_ih: &'a Tensor, w_hh: &'a Tensor, b: &'a Tensor) -> Result<Self> {
        let (g, input) = match w_ih.shape() {
            [g, i] => (*g, *i),
            s => return Err(Error::Shape(format!("w_ih must be 2-D, got {s:?}"))),
        };
        if g % 4 != 0 || g == 0 {
            return Err(Error::Shape(format!("w_ih rows {g} not a positive multiple of 4")));
        }
        let units = g / 4;
        if w_hh.shape() != [g, units] || b.numel() != g {
            return Err(Error::Shape(format!(
                "lstm shapes disagree: w_ih {:?}, w_hh {:?}, b {:?}",
                w_ih.shape(),
                w_hh.shape(),
                b.shape()
            )));
        }
        Ok(Self { w_ih: w_ih.data(), w_hh: w_hh.data(), b: b.data(), input, units })
    }
}

/// One LSTM step. `gates` receives the post-activation gate values
/// `[i, f, g, o]`; `h` and `c` are updated in place.
pub fn lstm_cell(w: &LstmWeights<'_>, x: &[f64], h: &mut [f64], c: &mut [f64], gates: &mut [f64]) {
    let u = w.units;
    for r in 0..4 * u {
        gates[r] = dot(&w.w_ih[r * w.input..(r + 1) * w.input], x)
            + dot(&w.w_hh[r * u..(r + 1) * u], h)
            + w.b[r];
    }
    for j in 0..u {
        let i = sigmoid(gates[j]);
        let f = sigmoid(gates[u + j]);
        let g = gates[2 * u + j].tanh();
        let o = sigmoid(gates[3 * u + j]);
        gates[j] = i;
        gates[u + j] = f;
        gates[2 * u + j] = g;
        gates[3 * u + j] = o;
        c[j] = f * c[j] + i * g;
        h[j] = o * c[j].tanh();
    }
}

/// Standard LSTM step returning the new `(h, c)`.
pub fn lstm_step(
    x: &Tensor,
    state: (&Tensor, &Tensor),
    w: &LstmWeights<'_>,
) -> Result<(Tensor, Tensor)> {
    let (h, c) = state;
    if x.numel() != w.input || h.numel() != w.units || c.numel() != w.units {
        return Err(Error::Shape(format!(
            "lstm step expects x[{}], h[{}], c[{}]; got {:?}, {:?}, {:?}",
            w.input,
            w.units,
            w.units,
            x.shape(),
            h.shape(),
            c.shape()
        )));
    }
    let mut h = h.data().to_vec();
    let mut c = c.data().to_vec();
    let mut gates = vec![0.0; 4 * w.units];
    lstm_cell(w, x.data(), &mut h, &mut c, &mut gates);
    Ok((Tensor::vector(h), Tensor::vector(c)))
}

/// Runs an LSTM over every row of `seq` from zero state. With `reverse` the
/// rows are consumed last to first, and output row `t` is the state after
/// consuming rows `T-1..=t`.
pub fn lstm_sequence(w: &LstmWeights<'_>, seq: &Tensor, reverse: bool) -> Result<Tensor> {
    if seq.cols() != w.input {
        return Err(Error::Shape(format!(
            "lstm input width {} does not match sequence {:?}",
            w.input,
            seq.shape()
        )));
    }
    let t_len = seq.rows();
    let u = w.units;
    let mut out = vec![0.0; t_len * u];
    let mut h = vec![0.0; u];
    let mut c = vec![0.0; u];
    let mut gates = vec![0.0; 4 * u];
    for k in 0..t_len {
        let t = if reverse { t_len - 1 - k } else { k };
        lstm_cell(w, seq.row(t), &mut h, &mut c, &mut gates);
        out[t * u..(t + 1) * u].copy_from_slice(&h);
    }
    Tensor::matrix(t_len, u, out)
}

/// Bidirectional LSTM: returns `(forward_states, backward_states)`, both
/// indexed by input position.
pub fn bilstm_forward(
    seq: &Tensor,
    fwd: &LstmWeights<'_>,
    bwd: &LstmWeights<'_>,
) -> Result<(Tensor, Tensor)> {
    if seq.rows() == 0 || seq.numel() == 0 {
        return Err(Error::Invalid("bilstm over an empty sequence".into()));
    }
    Ok((lstm_sequence(fwd, seq, false)?, lstm_sequence(bwd, seq, true)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_identity_and_hand_sum() {
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::vector(vec![0.0, 0.0]);
        let out = dense_forward(&Tensor::vector(vec![3.0, 4.0]), &w, &b).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0]);

        let w = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let out = dense_forward(&Tensor::vector(vec![1.0, 1.0]), &w, &Tensor::vector(vec![1.0])).unwrap();
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn dense_shape_error_names_both_shapes() {
        let w = Tensor::zeros(&[2, 3]);
        let err = dense_forward(&Tensor::zeros(&[2]), &w, &Tensor::zeros(&[2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::vector(vec![1.0, -1.0])).unwrap();
        let e = 1f64.exp() / (1f64.exp() + (-1f64).exp());
        assert!((s.data()[0] - 0.8808).abs() < 1e-4 && (s.data()[0] - e).abs() < 1e-15);
        assert!((s.data()[1] - 0.1192).abs() < 1e-4);
        let s = softmax(&Tensor::vector(vec![1000.0, 0.0])).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
    }

    #[test]
    fn zero_lstm_gives_zero_state() {
        let w_ih = Tensor::zeros(&[8, 3]);
        let w_hh = Tensor::zeros(&[8, 2]);
        let b = Tensor::zeros(&[8]);
        let w = LstmWeights::from_tensors(&w_ih, &w_hh, &b).unwrap();
        let (h, c) = lstm_step(
            &Tensor::vector(vec![0.3, -2.0, 5.0]),
            (&Tensor::zeros(&[2]), &Tensor::zeros(&[2])),
            &w,
        )
        .unwrap();
        assert_eq!(h.data(), &[0.0, 0.0]);
        assert_eq!(c.data(), &[0.0, 0.0]);
    }

    #[test]
    fn single_unit_cell_matches_hand_gates() {
        // Gate rows i, f, g, o with scalar weights.
        let w_ih = Tensor::matrix(4, 1, vec![0.5, -0.25, 1.0, 0.75]).unwrap();
        let w_hh = Tensor::matrix(4, 1, vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let b = Tensor::vector(vec![0.0, 1.0, 0.0, -0.5]);
        let w = LstmWeights::from_tensors(&w_ih, &w_hh, &b).unwrap();
        let (x, h0, c0) = (2.0f64, 0.5f64, -1.0f64);
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = s(0.5 * x + 0.1 * h0);
        let f = s(-0.25 * x + 0.2 * h0 + 1.0);
        let g = (1.0 * x - 0.3 * h0).tanh();
        let o = s(0.75 * x + 0.4 * h0 - 0.5);
        let c1 = f * c0 + i * g;
        let h1 = o * c1.tanh();
        let (h, c) = lstm_step(
            &Tensor::vector(vec![x]),
            (&Tensor::vector(vec![h0]), &Tensor::vector(vec![c0])),
            &w,
        )
        .unwrap();
        assert!((h.data()[0] - h1).abs() < 1e-14);
        assert!((c.data()[0] - c1).abs() < 1e-14);
    }

    #[test]
    fn repeated_steps_stay_bounded_and_settle() {
        let w_ih = Tensor::matrix(8, 1, vec![3.0, -2.0, 4.0, 1.0, 2.0, 0.5, -1.0, 3.0]).unwrap();
        let w_hh = Tensor::matrix(8, 2, (0..16).map(|k| (k as f64 - 8.0) / 5.0).collect()).unwrap();
        let b = Tensor::vector(vec![0.1; 8]);
        let w = LstmWeights::from_tensors(&w_ih, &w_hh, &b).unwrap();
        let x = Tensor::vector(vec![1.5]);
        let mut h = Tensor::zeros(&[2]);
        let mut c = Tensor::zeros(&[2]);
        let mut last = h.clone();
        for _ in 0..500 {
            last = h.clone();
            let (h2, c2) = lstm_step(&x, (&h, &c), &w).unwrap();
            assert!(h2.data().iter().all(|v| v.abs() <= 1.0));
            h = h2;
            c = c2;
        }
        let delta: f64 = h.data().iter().zip(last.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(delta < 1e-9, "not settled: {delta}");
    }

    #[test]
    fn bilstm_rejects_empty() {
        let w_ih = Tensor::zeros(&[4, 2]);
        let w_hh = Tensor::zeros(&[4, 1]);
        let b = Tensor::zeros(&[4]);
        let w = LstmWeights::from_tensors(&w_ih, &w_hh, &b).unwrap();
        assert!(bilstm_forward(&Tensor::zeros(&[0, 2]), &w, &w).is_err());
    }
}
