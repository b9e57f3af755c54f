//! Decoder score functions, negative sampling and the self-adversarial
//! negative-sampling loss.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::Triple;
use crate::tensor::{log_sigmoid, softmax_in_place};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    TransE,
    DistMult,
    ComplEx,
    RotatE,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 4] = [ScoreKind::TransE, ScoreKind::DistMult, ScoreKind::ComplEx, ScoreKind::RotatE];

    pub fn is_complex(self) -> bool {
        matches!(self, ScoreKind::ComplEx | ScoreKind::RotatE)
    }

    /// Width of a relation embedding row for entity width `dim`.
    /// RotatE stores one phase per complex component.
    pub fn relation_width(self, dim: usize) -> usize {
        match self {
            ScoreKind::RotatE => dim / 2,
            _ => dim,
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::TransE => "transe",
            ScoreKind::DistMult => "distmult",
            ScoreKind::ComplEx => "complex",
            ScoreKind::RotatE => "rotate",
        })
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "transe" => Ok(ScoreKind::TransE),
            "distmult" => Ok(ScoreKind::DistMult),
            "complex" => Ok(ScoreKind::ComplEx),
            "rotate" => Ok(ScoreKind::RotatE),
            other => Err(Error::Config(format!(
                "unknown score kind `{other}` (expected transe, distmult, complex or rotate)"
            ))),
        }
    }
}

/// Score of a single triple given its embeddings.
///
/// Complex kinds read `h`, `t` (and `r` for ComplEx) as interleaved
/// `(re, im)` pairs; RotatE's `r` holds one phase per component.
pub fn score(h: &[f64], r: &[f64], t: &[f64], kind: ScoreKind) -> Result<f64> {
    let d = h.len();
    if t.len() != d || r.len() != kind.relation_width(d) || (kind.is_complex() && d % 2 != 0) {
        return Err(TensorError::Shape {
            op: "score",
            detail: format!("{kind}: h={}, r={}, t={}", h.len(), r.len(), t.len()),
        }
        .into());
    }
    let s = match kind {
        ScoreKind::TransE => -h
            .iter()
            .zip(r)
            .zip(t)
            .map(|((h, r), t)| (h + r - t) * (h + r - t))
            .sum::<f64>()
            .sqrt(),
        ScoreKind::DistMult => h.iter().zip(r).zip(t).map(|((h, r), t)| (h * t) * r).sum(),
        ScoreKind::ComplEx => h
            .chunks(2)
            .zip(r.chunks(2))
            .zip(t.chunks(2))
            .map(|((h, r), t)| {
                let re = h[0] * r[0] - h[1] * r[1];
                let im = h[0] * r[1] + h[1] * r[0];
                re * t[0] + im * t[1]
            })
            .sum(),
        ScoreKind::RotatE => -h
            .chunks(2)
            .zip(r)
            .zip(t.chunks(2))
            .map(|((h, phase), t)| {
                let (c, s) = (phase.cos(), phase.sin());
                let re = h[0] * c - h[1] * s - t[0];
                let im = h[0] * s + h[1] * c - t[1];
                re * re + im * im
            })
            .sum::<f64>()
            .sqrt(),
    };
    if !s.is_finite() {
        return Err(TensorError::NonFinite { op: "score" }.into());
    }
    Ok(s)
}

/// Score a list of `(head, relation, tail)` index triples on the tape.
/// Returns an `m x 1` column.
pub fn score_on_tape(
    tape: &mut Tape,
    entities: Var,
    relations: Var,
    triples: &[Triple],
    kind: ScoreKind,
) -> Result<Var, TensorError> {
    let h = tape.gather_rows(entities, triples.iter().map(|t| t.head).collect())?;
    let r = tape.gather_rows(relations, triples.iter().map(|t| t.relation).collect())?;
    let t = tape.gather_rows(entities, triples.iter().map(|t| t.tail).collect())?;
    match kind {
        ScoreKind::TransE => {
            let hr = tape.add(h, r)?;
            let diff = tape.sub(hr, t)?;
            let n = tape.row_norm(diff)?;
            tape.scale(n, -1.0)
        }
        ScoreKind::DistMult => {
            let ht = tape.mul(h, t)?;
            let htr = tape.mul(ht, r)?;
            tape.row_sum(htr)
        }
        ScoreKind::ComplEx => {
            // Re(<h∘r, conj(t)>) = Σ (h∘r).re·t.re + (h∘r).im·t.im
            let hr = tape.complex_mul(h, r)?;
            let prod = tape.mul(hr, t)?;
            tape.row_sum(prod)
        }
        ScoreKind::RotatE => {
            let rot = tape.phase_to_complex(r)?;
            let hr = tape.complex_mul(h, rot)?;
            let diff = tape.sub(hr, t)?;
            let n = tape.row_norm(diff)?;
            tape.scale(n, -1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub k: usize,
    pub beta: f64,
    /// Resample negatives that coincide with a known positive triple.
    #[serde(default)]
    pub filter_negatives: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 10.0,
            k: 32,
            beta: 1.0,
            filter_negatives: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.k < 1 {
            return Err(Error::Config("k (negatives per positive) must be >= 1".into()));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Positive scores and the `k` negative scores of each positive.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredBatch {
    pub positive: Vec<f64>,
    /// Row-major `positive.len() x k`.
    pub negative: Vec<f64>,
    pub k: usize,
}

impl ScoredBatch {
    pub fn new(positive: Vec<f64>, negative: Vec<f64>, k: usize) -> Result<Self> {
        if k == 0 || negative.len() != positive.len() * k {
            return Err(Error::Contract(format!(
                "{} negative scores for {} positives with k = {k}",
                negative.len(),
                positive.len()
            )));
        }
        if positive.iter().chain(&negative).any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "self_adv_loss" }.into());
        }
        Ok(ScoredBatch { positive, negative, k })
    }

    pub fn negatives_of(&self, q: usize) -> &[f64] {
        &self.negative[q * self.k..(q + 1) * self.k]
    }
}

/// Self-adversarial weights: softmax of `beta * score` over one positive's negatives.
pub fn adversarial_weights(neg_scores: &[f64], beta: f64) -> Vec<f64> {
    let mut w: Vec<f64> = neg_scores.iter().map(|s| beta * s).collect();
    softmax_in_place(&mut w);
    w
}

/// Summed self-adversarial loss over the batch's positives.
pub fn self_adv_loss(batch: &ScoredBatch, cfg: &LossConfig) -> Result<f64> {
    let mut total = 0.0;
    for (q, &pos) in batch.positive.iter().enumerate() {
        let neg = batch.negatives_of(q);
        let weights = adversarial_weights(neg, cfg.beta);
        total -= log_sigmoid(cfg.gamma + pos);
        for (w, s) in weights.iter().zip(neg) {
            total -= w * log_sigmoid(-cfg.gamma - s);
        }
    }
    Ok(total)
}

/// Taped version of [`self_adv_loss`]. `positive` is `q x 1`, `negative` is
/// `q x k`. The self-adversarial weights are constants on the tape; pass
/// `weights` to reuse a previously computed set, otherwise they are computed
/// from the current negative scores. Returns the loss and the weights used.
pub fn self_adv_loss_on_tape(
    tape: &mut Tape,
    positive: Var,
    negative: Var,
    cfg: &LossConfig,
    weights: Option<&Tensor>,
) -> Result<(Var, Tensor), TensorError> {
    let q = tape.shape(positive)[0];
    let neg_shape = tape.shape(negative).to_vec();
    if tape.shape(positive) != [q, 1] || neg_shape.len() != 2 || neg_shape[0] != q {
        return Err(TensorError::Shape {
            op: "self_adv_loss",
            detail: format!("positive {:?}, negative {:?}", tape.shape(positive), neg_shape),
        });
    }
    let weights = match weights {
        Some(w) if w.shape() == neg_shape.as_slice() => w.clone(),
        Some(w) => {
            return Err(TensorError::Shape {
                op: "self_adv_loss",
                detail: format!("weights {:?} for negatives {neg_shape:?}", w.shape()),
            })
        }
        None => {
            let neg = tape.value(negative);
            let k = neg_shape[1];
            let mut data = Vec::with_capacity(q * k);
            for i in 0..q {
                data.extend(adversarial_weights(neg.row(i), cfg.beta));
            }
            Tensor::matrix(q, k, data)?
        }
    };
    let pos_shift = tape.add_scalar(positive, cfg.gamma)?;
    let pos_term = tape.log_sigmoid(pos_shift)?;
    let pos_sum = tape.sum(pos_term)?;
    let neg_flip = tape.scale(negative, -1.0)?;
    let neg_shift = tape.add_scalar(neg_flip, -cfg.gamma)?;
    let neg_term = tape.log_sigmoid(neg_shift)?;
    let w = tape.constant(weights.clone());
    let weighted = tape.mul(neg_term, w)?;
    let neg_sum = tape.sum(weighted)?;
    let both = tape.add(pos_sum, neg_sum)?;
    Ok((tape.scale(both, -1.0)?, weights))
}

fn corrupt<R: Rng + ?Sized>(triple: &Triple, entity_count: usize, rng: &mut R) -> Triple {
    let corrupt_head = rng.gen_bool(0.5);
    let original = if corrupt_head { triple.head } else { triple.tail };
    let mut e = rng.gen_range(0..entity_count - 1);
    if e >= original {
        e += 1;
    }
    if corrupt_head {
        Triple::new(e, triple.relation, triple.tail)
    } else {
        Triple::new(triple.head, triple.relation, e)
    }
}

/// `k` corrupted copies of `triple`: each replaces the head or the tail (fair
/// coin) with a uniformly drawn different entity.
pub fn sample_negatives<R: Rng + ?Sized>(
    triple: &Triple,
    entity_count: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Triple>> {
    if entity_count < 2 {
        return Err(Error::Contract(format!(
            "negative sampling needs at least 2 entities, got {entity_count}"
        )));
    }
    Ok((0..k).map(|_| corrupt(triple, entity_count, rng)).collect())
}

/// Like [`sample_negatives`] but redraws (up to a bounded number of times)
/// negatives that are in `known`.
pub fn sample_negatives_filtered<R: Rng + ?Sized>(
    triple: &Triple,
    entity_count: usize,
    k: usize,
    known: &HashSet<Triple>,
    rng: &mut R,
) -> Result<Vec<Triple>> {
    const MAX_REDRAWS: usize = 32;
    if entity_count < 2 {
        return Err(Error::Contract(format!(
            "negative sampling needs at least 2 entities, got {entity_count}"
        )));
    }
    Ok((0..k)
        .map(|_| {
            let mut neg = corrupt(triple, entity_count, rng);
            for _ in 0..MAX_REDRAWS {
                if !known.contains(&neg) {
                    break;
                }
                neg = corrupt(triple, entity_count, rng);
            }
            neg
        })
        .collect())
}
