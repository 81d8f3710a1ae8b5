//! Dense tensors, a reverse-mode tape, the layers the generator is built
//! from, and the Adam optimizer. Everything runs in `f64`.

mod adam;
pub mod gradcheck;
mod layers;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use layers::{gru_step, Activation, Embedding, GruCellParams, Linear};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// `a · b` for `[m,k]` and `[k,n]` matrices.
pub fn matmul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    tape.matmul(a, b)
}

/// Cross-entropy (nats) of a single logit vector `[C]` or `[1, C]` against
/// `target`, as a scalar.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, target: usize) -> Result<Var> {
    let c = tape.value(logits).cols();
    let row = tape.reshape(logits, [1, c])?;
    let per_row = tape.cross_entropy(row, &[target])?;
    Ok(tape.sum(per_row))
}

/// Runs the reverse pass and adds the gradients into every parameter of
/// `store` bound through `bound`.
pub fn backward(tape: &Tape, loss: Var, store: &mut ParamStore, bound: &Bound) -> Result<()> {
    let grads = tape.backward(loss)?;
    store.accumulate(bound, &grads)
}
