//! Attention-based multimodal fusion of attended text (M) and visual (N)
//! features into one vector per segment.

use crate::error::{Error, Result};
use crate::tape::{Axis, Tape, Var};

#[derive(Debug, Clone)]
pub struct DenseLayer {
    /// in × out
    pub weight: String,
    /// 1 × out; the scoring layer has none since a bias shared by both
    /// modality logits cancels in their softmax.
    pub bias: Option<String>,
    pub input: usize,
    pub output: usize,
}

#[derive(Debug, Clone)]
pub struct AtmfParams {
    /// Shared modality-scoring tower; tanh between layers, linear last layer.
    pub tower: Vec<DenseLayer>,
    /// f × f projection applied as `Q · W_Fᵀ`.
    pub w_proj: String,
    /// f × 1 scoring vector.
    pub w_score: String,
}

impl AtmfParams {
    /// Tower widths must end in 1.
    pub fn named(prefix: &str, width: usize, tower: &[usize]) -> Result<Self> {
        if tower.last() != Some(&1) {
            return Err(Error::Config(format!("fusion tower must end in a single unit, got {tower:?}")));
        }
        let mut input = width;
        let layers = tower
            .iter()
            .enumerate()
            .map(|(i, &output)| {
                let l = DenseLayer {
                    weight: format!("{prefix}.tower.{i}.weight"),
                    bias: (i + 1 < tower.len()).then(|| format!("{prefix}.tower.{i}.bias")),
                    input,
                    output,
                };
                input = output;
                l
            })
            .collect();
        Ok(AtmfParams {
            tower: layers,
            w_proj: format!("{prefix}.w_proj"),
            w_score: format!("{prefix}.w_score"),
        })
    }

    pub fn shapes(&self, width: usize) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for l in &self.tower {
            out.push((l.weight.clone(), l.input, l.output));
            if let Some(b) = &l.bias {
                out.push((b.clone(), 1, l.output));
            }
        }
        out.push((self.w_proj.clone(), width, width));
        out.push((self.w_score.clone(), width, 1));
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusedSegment {
    /// 1 × f
    pub x: Var,
    /// 1 × 2: `[s_t, s_v]`
    pub modality_scores: Var,
    /// 1 × 2k distribution over the scaled hop rows
    pub gamma: Var,
    /// 2k × f scaled rows `[(1+s_t)M ; (1+s_v)N]`
    pub stacked: Var,
}

fn tower(tape: &mut Tape, input: Var, layers: &[DenseLayer]) -> Result<Var> {
    let mut h = input;
    for (i, l) in layers.iter().enumerate() {
        let w = tape.param(&l.weight)?;
        h = tape.matmul(h, w)?;
        if let Some(name) = &l.bias {
            let b = tape.param(name)?;
            h = tape.add_row(h, b)?;
        }
        if i + 1 < layers.len() {
            h = tape.tanh(h)?;
        }
    }
    Ok(h)
}

pub fn atmf_fuse(tape: &mut Tape, m: Var, n: Var, params: &AtmfParams) -> Result<FusedSegment> {
    let (k, width) = tape.shape(m);
    if tape.shape(n) != (k, width) {
        let (nk, nw) = tape.shape(n);
        return Err(Error::ShapeMismatch {
            op: "atmf_fuse",
            left: vec![k, width],
            right: vec![nk, nw],
        });
    }
    let inv_k = 1.0 / k as f64;
    let m_sum = tape.sum_rows(m)?;
    let m_mean = tape.scale(m_sum, inv_k)?;
    let n_sum = tape.sum_rows(n)?;
    let n_mean = tape.scale(n_sum, inv_k)?;
    let z_t = tower(tape, m_mean, &params.tower)?;
    let z_v = tower(tape, n_mean, &params.tower)?;
    let z = tape.concat(&[z_t, z_v], Axis::Cols)?;
    let scores = tape.softmax_rows(z)?;

    let s_t = tape.slice_cols(scores, 0, 1)?;
    let s_v = tape.slice_cols(scores, 1, 1)?;
    let r_t = tape.add_scalar(s_t, 1.0)?;
    let r_v = tape.add_scalar(s_v, 1.0)?;
    let m_scaled = tape.scale_by(m, r_t)?;
    let n_scaled = tape.scale_by(n, r_v)?;
    let q = tape.concat(&[m_scaled, n_scaled], Axis::Rows)?;

    let w_proj = tape.param(&params.w_proj)?;
    let w_score = tape.param(&params.w_score)?;
    let wt = tape.transpose(w_proj)?;
    let proj = tape.matmul(q, wt)?;
    let p_f = tape.tanh(proj)?;
    let logits = tape.matmul(p_f, w_score)?;
    let logits_row = tape.transpose(logits)?;
    let gamma = tape.softmax_rows(logits_row)?;
    let x = tape.matmul(gamma, q)?;
    Ok(FusedSegment {
        x,
        modality_scores: scores,
        gamma,
        stacked: q,
    })
}
