//! Linear, embedding and GRU layers over a [`ParamStore`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Affine map `x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), in_dim, out_dim, rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[out_dim]);
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, p[self.weight])?;
        tape.add_bias(xw, p[self.bias])
    }
}

/// Lookup table `[num, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub table: ParamId,
    pub num: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, num: usize, dim: usize, rng: &mut impl Rng) -> Self {
        // fan_in of a one-hot lookup is 1
        let data = (0..num * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let table = store.add(format!("{name}.table"), Tensor::new([num, dim], data).expect("positive dims"));
        Embedding { table, num, dim }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, indices: Vec<usize>) -> Result<Var> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.num) {
            return Err(Error::Index(format!("embedding index {bad} with {} rows", self.num)));
        }
        tape.gather_rows(p[self.table], indices)
    }
}

/// GRU cell parameters. Gates are packed in the order update (z), reset (r),
/// candidate (h):
///
/// ```text
/// z  = σ(x·W_z + h·U_z + b_z)
/// r  = σ(x·W_r + h·U_r + b_r)
/// h̃  = tanh(x·W_h + (r⊙h)·U_h + b_h)
/// h' = (1−z)⊙h + z⊙h̃
/// ```
///
/// `w_x` is `[input, 3·hidden]`, `u_zr` is `[hidden, 2·hidden]`, `u_h` is
/// `[hidden, hidden]` and `bias` is `[3·hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCellParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_x: ParamId,
    pub u_zr: ParamId,
    pub u_h: ParamId,
    pub bias: ParamId,
}

impl GruCellParams {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let w_x = store.add_uniform(format!("{name}.w_x"), input_dim, 3 * hidden_dim, rng);
        let u_zr = store.add_uniform(format!("{name}.u_zr"), hidden_dim, 2 * hidden_dim, rng);
        let u_h = store.add_uniform(format!("{name}.u_h"), hidden_dim, hidden_dim, rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[3 * hidden_dim]);
        GruCellParams { input_dim, hidden_dim, w_x, u_zr, u_h, bias }
    }

    /// `x · W_x + b` for any number of rows; each row is one (step, batch) input.
    pub fn project_inputs(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.input_dim {
            return Err(Error::Dimension(format!(
                "gru input has {} columns, cell expects {}",
                tape.value(x).cols(),
                self.input_dim
            )));
        }
        let xw = tape.matmul(x, p[self.w_x])?;
        tape.add_bias(xw, p[self.bias])
    }

    /// One recurrence step given pre-projected inputs `xp: [B, 3H]` and `h: [B, H]`.
    pub fn step_projected(&self, tape: &mut Tape, p: &Bound, xp: Var, h: Var) -> Result<Var> {
        let hd = self.hidden_dim;
        if tape.value(h).cols() != hd || tape.value(xp).cols() != 3 * hd || tape.value(h).rows() != tape.value(xp).rows() {
            return Err(Error::Dimension(format!(
                "gru step: state {:?} / projected input {:?} for hidden size {hd}",
                tape.shape(h),
                tape.shape(xp)
            )));
        }
        let hzr = tape.matmul(h, p[self.u_zr])?;
        let xzr = tape.slice_cols(xp, 0, 2 * hd)?;
        let pre_zr = tape.add(xzr, hzr)?;
        let zr = tape.sigmoid(pre_zr);
        let z = tape.slice_cols(zr, 0, hd)?;
        let r = tape.slice_cols(zr, hd, hd)?;
        let rh = tape.mul(r, h)?;
        let hh = tape.matmul(rh, p[self.u_h])?;
        let xh = tape.slice_cols(xp, 2 * hd, hd)?;
        let pre_h = tape.add(xh, hh)?;
        let cand = tape.tanh(pre_h);
        let delta = tape.sub(cand, h)?;
        let gated = tape.mul(z, delta)?;
        tape.add(h, gated)
    }

    /// Runs the cell over `steps` consecutive row blocks of `x` (`[steps·B, input]`,
    /// step-major) from `h0: [B, H]`; returns the state after every step.
    pub fn scan(&self, tape: &mut Tape, p: &Bound, x: Var, h0: Var) -> Result<Vec<Var>> {
        let batch = tape.value(h0).rows();
        let rows = tape.value(x).rows();
        if rows % batch != 0 {
            return Err(Error::Dimension(format!("{rows} input rows for batch {batch}")));
        }
        let xp = self.project_inputs(tape, p, x)?;
        let mut h = h0;
        let mut out = Vec::with_capacity(rows / batch);
        for step in 0..rows / batch {
            let xs = tape.slice_rows(xp, step * batch, batch)?;
            h = self.step_projected(tape, p, xs, h)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Single GRU step `h' = GRU(x, h)`; `x: [B, input]`, `h: [B, hidden]`.
pub fn gru_step(tape: &mut Tape, cell: &GruCellParams, p: &Bound, x: Var, h: Var) -> Result<Var> {
    if tape.value(x).rows() != tape.value(h).rows() {
        return Err(Error::Dimension(format!(
            "gru step: input {:?} and state {:?} disagree on batch",
            tape.shape(x),
            tape.shape(h)
        )));
    }
    let xp = cell.project_inputs(tape, p, x)?;
    cell.step_projected(tape, p, xp, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cell(input: usize, hidden: usize, seed: u64) -> (ParamStore, GruCellParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = GruCellParams::new(&mut store, "gru", input, hidden, &mut rng);
        // random biases too, so the oracle exercises them
        for id in [c.bias] {
            for v in store.get_mut(id).data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        (store, c)
    }

    /// Scalar-loop reference written directly from the gate equations.
    fn oracle_gru(store: &ParamStore, c: &GruCellParams, x: &[f64], h: &[f64]) -> Vec<f64> {
        let (n, hd) = (c.input_dim, c.hidden_dim);
        let wx = store.get(c.w_x).data();
        let uzr = store.get(c.u_zr).data();
        let uh = store.get(c.u_h).data();
        let b = store.get(c.bias).data();
        let w = |i: usize, col: usize| wx[i * 3 * hd + col];
        let mut z = vec![0.0; hd];
        let mut r = vec![0.0; hd];
        for j in 0..hd {
            let mut az = b[j];
            let mut ar = b[hd + j];
            for i in 0..n {
                az += x[i] * w(i, j);
                ar += x[i] * w(i, hd + j);
            }
            for i in 0..hd {
                az += h[i] * uzr[i * 2 * hd + j];
                ar += h[i] * uzr[i * 2 * hd + hd + j];
            }
            z[j] = sigmoid(az);
            r[j] = sigmoid(ar);
        }
        (0..hd)
            .map(|j| {
                let mut a = b[2 * hd + j];
                for i in 0..n {
                    a += x[i] * w(i, 2 * hd + j);
                }
                for i in 0..hd {
                    a += r[i] * h[i] * uh[i * hd + j];
                }
                (1.0 - z[j]) * h[j] + z[j] * a.tanh()
            })
            .collect()
    }

    #[test]
    fn gru_matches_scalar_oracle() {
        let (store, c) = cell(5, 4, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant([1, 5], x.clone()).unwrap();
        let hv = tape.constant([1, 4], h.clone()).unwrap();
        let out = gru_step(&mut tape, &c, &p, xv, hv).unwrap();
        let expected = oracle_gru(&store, &c, &x, &h);
        for (a, b) in tape.value(out).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_cell_keeps_zero_state() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = GruCellParams::new(&mut store, "gru", 3, 2, &mut rng);
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant([1, 3], vec![0.7, -2.0, 5.0]).unwrap();
        let h = tape.constant([1, 2], vec![0.0, 0.0]).unwrap();
        let out = gru_step(&mut tape, &c, &p, x, h).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0]);
    }

    #[test]
    fn closed_update_gate_carries_state() {
        let (mut store, c) = cell(3, 2, 5);
        let hd = c.hidden_dim;
        let wx = store.get_mut(c.w_x).data_mut();
        for i in 0..c.input_dim {
            wx[i * 3 * hd..i * 3 * hd + hd].iter_mut().for_each(|v| *v = 0.0);
        }
        let uzr = store.get_mut(c.u_zr).data_mut();
        for i in 0..hd {
            uzr[i * 2 * hd..i * 2 * hd + hd].iter_mut().for_each(|v| *v = 0.0);
        }
        store.get_mut(c.bias).data_mut()[..hd].iter_mut().for_each(|v| *v = -800.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant([1, 3], vec![0.3, 0.1, -0.9]).unwrap();
        let h = tape.constant([1, 2], vec![0.25, -0.6]).unwrap();
        let out = gru_step(&mut tape, &c, &p, x, h).unwrap();
        assert_eq!(tape.value(out).data(), &[0.25, -0.6]);
    }

    #[test]
    fn gru_rejects_wrong_dims() {
        let (store, c) = cell(3, 2, 1);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant([1, 4], vec![0.0; 4]).unwrap();
        let h = tape.constant([1, 2], vec![0.0; 2]).unwrap();
        assert!(matches!(gru_step(&mut tape, &c, &p, x, h), Err(Error::Dimension(_))));
        let x = tape.constant([1, 3], vec![0.0; 3]).unwrap();
        let h = tape.constant([1, 3], vec![0.0; 3]).unwrap();
        assert!(matches!(gru_step(&mut tape, &c, &p, x, h), Err(Error::Dimension(_))));
    }

    #[test]
    fn gate_ranges_hold_for_large_inputs() {
        let (store, c) = cell(3, 4, 9);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant([1, 3], vec![40.0, -55.0, 80.0]).unwrap();
        let h = tape.constant([1, 4], vec![0.9, -0.9, 0.5, 0.0]).unwrap();
        let out = gru_step(&mut tape, &c, &p, x, h).unwrap();
        assert!(tape.value(out).data().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }
}
