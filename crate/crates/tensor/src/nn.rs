//! Composite layers built from graph primitives.

use crate::{Graph, Result, TensorError, Var};

/// Weight and bias of one convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: Var,
    pub bias: Option<Var>,
}

/// `x @ weight^T + bias` for `x: [rows, in]`, `weight: [out, in]`.
pub fn linear(g: &mut Graph, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let wt = g.transpose(weight)?;
    let y = g.matmul(x, wt)?;
    match bias {
        Some(b) => g.add_bias(y, b),
        None => Ok(y),
    }
}

/// WaveNet gated activation `tanh(filter * x) ⊙ sigmoid(gate * x)` with both
/// branches as dilated causal convolutions.
pub fn gated_activation(
    g: &mut Graph,
    x: Var,
    filter: ConvParams,
    gate: ConvParams,
    dilation: usize,
) -> Result<Var> {
    let (fs, gs) = (g.shape(filter.weight), g.shape(gate.weight));
    if fs.first() != gs.first() {
        return Err(TensorError::ShapeMismatch {
            op: "gated_activation",
            lhs: fs.to_vec(),
            rhs: gs.to_vec(),
        });
    }
    let f = g.conv1d_causal(x, filter.weight, filter.bias, dilation)?;
    let f = g.tanh(f);
    let s = g.conv1d_causal(x, gate.weight, gate.bias, dilation)?;
    let s = g.sigmoid(s);
    g.mul(f, s)
}

/// LSTM weights, gate order input, forget, cell, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    /// `[4 * hidden, input]`
    pub w_ih: Var,
    /// `[4 * hidden, hidden]`
    pub w_hh: Var,
    /// `[4 * hidden]`
    pub bias: Var,
}

/// One LSTM step on row vectors `x: [1, in]`, `h_prev, c_prev: [1, hidden]`.
pub fn lstm_cell(
    g: &mut Graph,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    w: LstmParams,
) -> Result<(Var, Var)> {
    let (hs, cs) = (g.shape(h_prev).to_vec(), g.shape(c_prev).to_vec());
    if hs != cs || hs.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "lstm_cell",
            lhs: hs,
            rhs: cs,
        });
    }
    let hidden = hs[1];
    if g.shape(w.w_hh) != [4 * hidden, hidden] {
        return Err(TensorError::ShapeMismatch {
            op: "lstm_cell",
            lhs: hs,
            rhs: g.shape(w.w_hh).to_vec(),
        });
    }
    let xi = linear(g, x, w.w_ih, Some(w.bias))?;
    let hh = linear(g, h_prev, w.w_hh, None)?;
    let gates = g.add(xi, hh)?;
    let i = g.narrow(gates, 1, 0, hidden)?;
    let f = g.narrow(gates, 1, hidden, hidden)?;
    let c_hat = g.narrow(gates, 1, 2 * hidden, hidden)?;
    let o = g.narrow(gates, 1, 3 * hidden, hidden)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let c_hat = g.tanh(c_hat);
    let o = g.sigmoid(o);
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, c_hat)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}
