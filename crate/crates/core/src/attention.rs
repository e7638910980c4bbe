//! k-hop structured self-attention: `A = softmax_rows(W2 · tanh(W1 · Xᵀ))`,
//! `M = A · X`.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionRole {
    Text,
    Visual,
    Segment,
}

impl AttentionRole {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionRole::Text => "text",
            AttentionRole::Visual => "visual",
            AttentionRole::Segment => "segment",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MhaParams {
    pub role: AttentionRole,
    pub hops: usize,
    pub hidden: usize,
    /// hidden × width
    pub w1: String,
    /// hops × hidden
    pub w2: String,
}

impl MhaParams {
    pub fn named(prefix: &str, role: AttentionRole, hops: usize, hidden: usize) -> Self {
        MhaParams {
            role,
            hops,
            hidden,
            w1: format!("{prefix}.{}.w1", role.as_str()),
            w2: format!("{prefix}.{}.w2", role.as_str()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttendedFeatures {
    /// hops × rows(input)
    pub weights: Var,
    /// hops × width
    pub features: Var,
}

pub fn multihop_attend(tape: &mut Tape, x: Var, params: &MhaParams) -> Result<AttendedFeatures> {
    let (rows, width) = tape.shape(x);
    if rows == 0 {
        return Err(Error::Contract("attention over zero rows".into()));
    }
    let w1 = tape.param(&params.w1)?;
    let w2 = tape.param(&params.w2)?;
    let expected = tape.shape(w1).1;
    if width != expected {
        return Err(Error::dim("multihop_attend", format!("input width {width}, expected {expected}")));
    }
    let xt = tape.transpose(x)?;
    let proj = tape.matmul(w1, xt)?;
    let act = tape.tanh(proj)?;
    let logits = tape.matmul(w2, act)?;
    let weights = tape.softmax_rows(logits)?;
    let features = tape.matmul(weights, x)?;
    Ok(AttendedFeatures { weights, features })
}

/// `‖A·Aᵀ − I‖²_F`; zero unless the redundancy penalty is switched on.
pub fn redundancy_penalty(tape: &mut Tape, weights: Var) -> Result<Var> {
    let (k, _) = tape.shape(weights);
    let at = tape.transpose(weights)?;
    let gram = tape.matmul(weights, at)?;
    let mut eye = vec![0.0; k * k];
    (0..k).for_each(|i| eye[i * k + i] = 1.0);
    let eye = tape.constant(k, k, eye)?;
    let diff = tape.sub(gram, eye)?;
    let sq = tape.mul(diff, diff)?;
    tape.sum_all(sq)
}
