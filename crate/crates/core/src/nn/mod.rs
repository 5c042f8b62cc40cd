//! Dense kernels, parameters, and a reverse-mode tape.

pub mod kernels;
pub mod params;
pub mod rnnt;
pub mod tape;
pub mod tensor;

pub use kernels::{bilstm_forward, dense_forward, lstm_step, softmax, LstmWeights};
pub use params::{Gradients, Init, ParamId, ParamStore, ParamTensor};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Concatenates each run of `factor` adjacent frames; a final partial group
/// is zero padded. Output is `[ceil(T/factor) × d·factor]`.
pub fn time_reduce(seq: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::Invalid("time reduction factor must be ≥ 1".into()));
    }
    if seq.shape().len() != 2 {
        return Err(Error::Shape(format!("time_reduce needs [T × d], got {:?}", seq.shape())));
    }
    let (t_len, d) = (seq.rows(), seq.cols());
    let out_rows = t_len.div_ceil(factor);
    let mut data = seq.data().to_vec();
    data.resize(out_rows * factor * d, 0.0);
    Tensor::matrix(out_rows, d * factor, data)
}
