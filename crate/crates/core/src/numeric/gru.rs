//! Gated recurrent unit.
//!
//! Gate layout follows the common convention with separate input and
//! recurrent biases, gates stacked in the order reset, update, candidate:
//!
//! ```text
//! r  = σ(x·W_ir + b_ir + h·W_hr + b_hr)
//! z  = σ(x·W_iz + b_iz + h·W_hz + b_hz)
//! n  = tanh(x·W_in + b_in + r ⊙ (h·W_hn + b_hn))
//! h' = (1 − z) ⊙ n + z ⊙ h
//! ```
//!
//! `W_i*` are stacked column-wise into `w_ih: [d_in × 3·d_h]`, and likewise
//! for `w_hh: [d_h × 3·d_h]`, `b_ih`, `b_hh: [3·d_h]`.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Tape handles for one GRU layer.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

/// Owned weights for one GRU layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub b_ih: Tensor,
    pub b_hh: Tensor,
}

impl GruWeights {
    pub fn zeros(d_in: usize, d_h: usize) -> Self {
        Self {
            w_ih: Tensor::zeros(&[d_in, 3 * d_h]),
            w_hh: Tensor::zeros(&[d_h, 3 * d_h]),
            b_ih: Tensor::zeros(&[3 * d_h]),
            b_hh: Tensor::zeros(&[3 * d_h]),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_ih.shape()[0]
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let d_h = self.hidden_size();
        let ok = self.w_ih.shape().len() == 2
            && self.w_ih.cols() == 3 * d_h
            && self.w_hh.shape() == [d_h, 3 * d_h]
            && self.b_ih.len() == 3 * d_h
            && self.b_hh.len() == 3 * d_h;
        if ok {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "inconsistent GRU weights: w_ih {:?}, w_hh {:?}, b_ih {:?}, b_hh {:?}",
                self.w_ih.shape(),
                self.w_hh.shape(),
                self.b_ih.shape(),
                self.b_hh.shape()
            )))
        }
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> GruVars {
        GruVars {
            w_ih: tape.leaf(&self.w_ih),
            w_hh: tape.leaf(&self.w_hh),
            b_ih: tape.leaf(&self.b_ih),
            b_hh: tape.leaf(&self.b_hh),
        }
    }
}

/// Records one GRU step for a batch: `x: [B × d_in]`, `h: [B × d_h]`.
pub fn gru_step(tape: &mut Tape<'_>, x: Var, h: Var, w: &GruVars) -> Var {
    let d_h = tape.value(h).cols();
    let gi = tape.affine(x, w.w_ih, w.b_ih);
    let gh = tape.affine(h, w.w_hh, w.b_hh);

    let gi_r = tape.slice_cols(gi, 0, d_h);
    let gh_r = tape.slice_cols(gh, 0, d_h);
    let r_pre = tape.add(gi_r, gh_r);
    let r = tape.sigmoid(r_pre);

    let gi_z = tape.slice_cols(gi, d_h, d_h);
    let gh_z = tape.slice_cols(gh, d_h, d_h);
    let z_pre = tape.add(gi_z, gh_z);
    let z = tape.sigmoid(z_pre);

    let gi_n = tape.slice_cols(gi, 2 * d_h, d_h);
    let gh_n = tape.slice_cols(gh, 2 * d_h, d_h);
    let gated = tape.mul(r, gh_n);
    let n_pre = tape.add(gi_n, gated);
    let n = tape.tanh(n_pre);

    // h' = n + z ⊙ (h − n)
    let diff = tape.sub(h, n);
    let carried = tape.mul(z, diff);
    tape.add(n, carried)
}

/// Single GRU update on plain vectors.
pub fn gru_cell(x: &Tensor, h: &Tensor, weights: &GruWeights) -> Result<Tensor> {
    weights.validate()?;
    if x.len() != weights.input_size() {
        return Err(Error::shape(format!(
            "GRU input has {} values, weights expect {}",
            x.len(),
            weights.input_size()
        )));
    }
    if h.len() != weights.hidden_size() {
        return Err(Error::shape(format!(
            "GRU state has {} values, weights expect {}",
            h.len(),
            weights.hidden_size()
        )));
    }
    let xm = x.as_matrix().reshape(&[1, x.len()])?;
    let hm = h.as_matrix().reshape(&[1, h.len()])?;
    let mut tape = Tape::new();
    let w = weights.bind(&mut tape);
    let xv = tape.constant(xm);
    let hv = tape.constant(hm);
    let out = gru_step(&mut tape, xv, hv, &w);
    Ok(Tensor::vector(tape.value(out).data().to_vec()))
}
