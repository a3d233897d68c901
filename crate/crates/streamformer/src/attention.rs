//! Scaled dot-product attention, multi-head attention, and the visibility
//! masks that realize context windows and chunk structure.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Mask, Scalar};

/// One side of a context window: a finite number of frames or unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extent {
    Finite(u64),
    Unbounded,
}

impl Extent {
    pub fn map_finite(self, f: impl FnOnce(u64) -> u64) -> Extent {
        match self {
            Extent::Finite(v) => Extent::Finite(f(v)),
            Extent::Unbounded => Extent::Unbounded,
        }
    }

    pub fn plus(self, other: Extent) -> Extent {
        match (self, other) {
            (Extent::Finite(a), Extent::Finite(b)) => Extent::Finite(a + b),
            _ => Extent::Unbounded,
        }
    }

    pub fn as_finite(self) -> Option<u64> {
        match self {
            Extent::Finite(v) => Some(v),
            Extent::Unbounded => None,
        }
    }
}

/// Per-layer visible range around a frame. `past` and `future` are
/// magnitudes, so offset zero (the frame itself) is always contained; the
/// usual bracket notation's `[-2, 1]` is `past = 2, future = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextWindow {
    pub past: Extent,
    pub future: Extent,
}

impl ContextWindow {
    pub fn new(past: Extent, future: Extent) -> Self {
        ContextWindow { past, future }
    }

    pub fn unbounded() -> Self {
        ContextWindow {
            past: Extent::Unbounded,
            future: Extent::Unbounded,
        }
    }

    pub fn is_unbounded(&self) -> bool {
        self.past == Extent::Unbounded && self.future == Extent::Unbounded
    }
}

impl fmt::Display for ContextWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.past {
            Extent::Finite(p) => write!(f, "[-{p}, ")?,
            Extent::Unbounded => write!(f, "[-inf, ")?,
        }
        match self.future {
            Extent::Finite(r) => write!(f, "{r}]"),
            Extent::Unbounded => write!(f, "inf]"),
        }
    }
}

/// Window flag grammar `L:R`, mirroring the bracket notation of context
/// tables:
/// `-2:1`, `-inf:inf`, `0:0`. The left token must be `-inf`, zero or
/// negative; the right token `inf`, zero or positive.
impl FromStr for ContextWindow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: String| Error::config("window", msg);
        let (l, r) = s
            .split_once(':')
            .ok_or_else(|| bad(format!("expected L:R, got {s:?}")))?;
        let past = match l.trim() {
            "-inf" => Extent::Unbounded,
            tok => {
                let v: i64 = tok
                    .parse()
                    .map_err(|_| bad(format!("bad left context {tok:?}")))?;
                if v > 0 {
                    return Err(bad(format!(
                        "left context must be <= 0 (frames of past), got {v}"
                    )));
                }
                Extent::Finite(v.unsigned_abs())
            }
        };
        let future = match r.trim() {
            "inf" => Extent::Unbounded,
            tok => {
                let v: i64 = tok
                    .parse()
                    .map_err(|_| bad(format!("bad right context {tok:?}")))?;
                if v < 0 {
                    return Err(bad(format!(
                        "right context must be >= 0 (frames of future), got {v}"
                    )));
                }
                Extent::Finite(v as u64)
            }
        };
        Ok(ContextWindow { past, future })
    }
}

/// Boolean visibility matrix for a length-`t` sequence under a per-layer
/// context window: `(q, k)` is visible iff `q - past <= k <= q + future`.
pub fn build_mask(t: usize, w: &ContextWindow) -> Mask {
    let mut mask = Mask::new(t, t, vec![false; t * t]);
    for q in 0..t {
        let lo = match w.past {
            Extent::Finite(p) => q.saturating_sub(p as usize),
            Extent::Unbounded => 0,
        };
        let hi = match w.future {
            Extent::Finite(f) => (q + f as usize).min(t - 1),
            Extent::Unbounded => t - 1,
        };
        for k in lo..=hi {
            mask.set(q, k, true);
        }
    }
    mask
}

/// Offline equivalent of chunk recurrence: `(q, k)` visible iff `k`
/// falls in the same chunk as `q` or the immediately preceding one.
pub fn build_chunk_mask(t: usize, chunk: usize) -> Result<Mask> {
    if chunk == 0 {
        return Err(Error::config("build_chunk_mask", "chunk size must be >= 1"));
    }
    let mut mask = Mask::new(t, t, vec![false; t * t]);
    for q in 0..t {
        let cq = q / chunk;
        for k in 0..t {
            let ck = k / chunk;
            if ck == cq || ck + 1 == cq {
                mask.set(q, k, true);
            }
        }
    }
    Ok(mask)
}

/// Softmax(Q K^T / sqrt(d)) V with optional visibility mask; the scale is
/// the feature dimension of the queries handed in (the per-head dimension
/// once multi-head splitting has happened).
pub fn scaled_dot_attention<S: Scalar>(
    tape: &mut Tape<S>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
) -> Result<Var> {
    let (sq, sk, sv) = (
        tape.shape(q).to_vec(),
        tape.shape(k).to_vec(),
        tape.shape(v).to_vec(),
    );
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            lhs: sq,
            rhs: sk,
        });
    }
    if sv.len() != 2 || sv[0] != sk[0] {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            lhs: sk,
            rhs: sv,
        });
    }
    let d = sq[1];
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax_last(scaled, mask)?;
    tape.matmul(weights, v)
}

/// Projection parameters of one multi-head attention: combined per-head
/// projections stored as `d_model x d_model` matrices whose column block
/// `i` is head `i`, plus the output projection.
#[derive(Debug, Clone, Copy)]
pub struct MhaVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub n_heads: usize,
}

/// Multi-head attention: heads run scaled dot-product attention at
/// dimension `d_model / n_heads` (scale `sqrt(d_model / n_heads)`), their
/// outputs are concatenated and passed through the output projection.
///
/// `q_in` has `t_q` rows; `kv_in` provides keys and values and may be
/// longer (chunk recurrence hands in previous-chunk history here).
pub fn multi_head<S: Scalar>(
    tape: &mut Tape<S>,
    q_in: Var,
    kv_in: Var,
    p: &MhaVars,
    mask: Option<&Mask>,
) -> Result<Var> {
    let d_model = tape.shape(q_in)[1];
    if tape.shape(p.wq).first().copied() != Some(d_model) {
        return Err(Error::ShapeMismatch {
            op: "multi_head",
            lhs: tape.shape(q_in).to_vec(),
            rhs: tape.shape(p.wq).to_vec(),
        });
    }
    if !d_model.is_multiple_of(p.n_heads) {
        return Err(Error::config(
            "multi_head",
            format!("d_model {d_model} not divisible by {} heads", p.n_heads),
        ));
    }
    let d_head = d_model / p.n_heads;

    let qp = tape.matmul(q_in, p.wq)?;
    let qp = tape.add_row_bias(qp, p.bq)?;
    let kp = tape.matmul(kv_in, p.wk)?;
    let kp = tape.add_row_bias(kp, p.bk)?;
    let vp = tape.matmul(kv_in, p.wv)?;
    let vp = tape.add_row_bias(vp, p.bv)?;

    let mut joined: Option<Var> = None;
    for h in 0..p.n_heads {
        let qh = tape.slice_cols(qp, h * d_head, d_head)?;
        let kh = tape.slice_cols(kp, h * d_head, d_head)?;
        let vh = tape.slice_cols(vp, h * d_head, d_head)?;
        let out = scaled_dot_attention(tape, qh, kh, vh, mask)?;
        joined = Some(match joined {
            Some(acc) => tape.concat_cols(acc, out)?,
            None => out,
        });
    }
    let heads = joined.expect("n_heads >= 1");
    let projected = tape.matmul(heads, p.wo)?;
    tape.add_row_bias(projected, p.bo)
}
