//! Two-layer bidirectional LSTM over an embedded segment.

use crate::error::{Error, Result};
use crate::tape::{Axis, Tape, Var};

/// Parameter names for one LSTM direction. Gate blocks are laid out
/// `[input, forget, cell, output]` along the 4u columns.
#[derive(Debug, Clone)]
pub struct LstmDirection {
    /// in × 4u
    pub w_ih: String,
    /// u × 4u
    pub w_hh: String,
    /// 1 × 4u
    pub bias: String,
}

impl LstmDirection {
    pub fn named(prefix: &str) -> Self {
        LstmDirection {
            w_ih: format!("{prefix}.w_ih"),
            w_hh: format!("{prefix}.w_hh"),
            bias: format!("{prefix}.bias"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
}

#[derive(Debug, Clone)]
pub struct LstmParams {
    pub hidden: usize,
    pub layers: Vec<LstmLayer>,
}

impl LstmParams {
    pub fn named(prefix: &str, hidden: usize, layers: usize) -> Self {
        LstmParams {
            hidden,
            layers: (0..layers)
                .map(|l| LstmLayer {
                    forward: LstmDirection::named(&format!("{prefix}.l{l}.fwd")),
                    backward: LstmDirection::named(&format!("{prefix}.l{l}.bwd")),
                })
                .collect(),
        }
    }

    /// (name, rows, cols) of every tensor, layer by layer.
    pub fn shapes(&self, input_dim: usize) -> Vec<(String, usize, usize)> {
        let u = self.hidden;
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let in_dim = if l == 0 { input_dim } else { 2 * u };
            for d in [&layer.forward, &layer.backward] {
                out.push((d.w_ih.clone(), in_dim, 4 * u));
                out.push((d.w_hh.clone(), u, 4 * u));
                out.push((d.bias.clone(), 1, 4 * u));
            }
        }
        out
    }
}

/// Runs one direction over the rows of `x` (n × in) from zero state and
/// returns the hidden states in input order (n × u). With `reverse` the
/// recurrence starts at the last row.
pub fn run_direction(tape: &mut Tape, x: Var, dir: &LstmDirection, hidden: usize, reverse: bool) -> Result<Var> {
    let (n, _) = tape.shape(x);
    let u = hidden;
    let w_ih = tape.param(&dir.w_ih)?;
    let w_hh = tape.param(&dir.w_hh)?;
    let bias = tape.param(&dir.bias)?;
    if tape.shape(w_ih).1 != 4 * u {
        return Err(Error::dim("lstm", format!("{} has {} columns, expected {}", dir.w_ih, tape.shape(w_ih).1, 4 * u)));
    }
    // input projections for every step at once
    let xw = tape.matmul(x, w_ih)?;
    let pre = tape.add_row(xw, bias)?;

    let mut h = tape.zeros(1, u)?;
    let mut c = tape.zeros(1, u)?;
    let mut outputs = vec![h; n];
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        let row = tape.slice_rows(pre, t, 1)?;
        let rec = tape.matmul(h, w_hh)?;
        let z = tape.add(row, rec)?;
        let zi = tape.slice_cols(z, 0, u)?;
        let zf = tape.slice_cols(z, u, u)?;
        let zg = tape.slice_cols(z, 2 * u, u)?;
        let zo = tape.slice_cols(z, 3 * u, u)?;
        let i = tape.sigmoid(zi)?;
        let f = tape.sigmoid(zf)?;
        let g = tape.tanh(zg)?;
        let o = tape.sigmoid(zo)?;
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        h = tape.mul(o, tc)?;
        outputs[t] = h;
    }
    tape.concat(&outputs, Axis::Rows)
}

/// Encodes an embedded segment `e` (n × in) into H (n × 2u).
pub fn bilstm_encode(tape: &mut Tape, e: Var, params: &LstmParams) -> Result<Var> {
    let (n, width) = tape.shape(e);
    if n == 0 {
        return Err(Error::Contract("segment has no tokens".into()));
    }
    let Some(first) = params.layers.first() else {
        return Err(Error::Config("LSTM needs at least one layer".into()));
    };
    let expected_in = tape.params().get(&first.forward.w_ih)?.dims2()?.0;
    if width != expected_in {
        return Err(Error::dim("bilstm_encode", format!("embedding width {width}, expected {expected_in}")));
    }
    let mut x = e;
    for layer in &params.layers {
        let fwd = run_direction(tape, x, &layer.forward, params.hidden, false)?;
        let bwd = run_direction(tape, x, &layer.backward, params.hidden, true)?;
        x = tape.concat(&[fwd, bwd], Axis::Cols)?;
    }
    Ok(x)
}
