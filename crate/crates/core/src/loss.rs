//! Training objectives: masked BCE over known or pseudo labels, the
//! second student's combined classification loss, Gaussian-kernel MMD
//! feature consistency, one-sided KL prediction consistency, the
//! adversarial objective for the noise scales, and the total.
//!
//! Teacher-side quantities enter as plain values (already detached), so
//! gradients only ever reach student paths. Every probability is clamped
//! to [1e-7, 1 - 1e-7] before a logarithm. Losses over an empty mask are
//! defined as 0 with no gradient.

use crate::error::{Error, Result};
use crate::labels::{PartialLabels, PseudoLabels, POSITIVE, UNKNOWN};
use crate::tensor::{Tape, Tensor, TensorId};

/// Clamp applied to probabilities before logs.
pub const PROB_EPS: f64 = 1e-7;

/// Weights of the second student's loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.6,
            lambda2: 0.05,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArg(format!("{name}={v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Bandwidth choice for the MMD kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelBandwidth {
    Fixed(f64),
    /// Median of the per-(sample, task) feature distances in the batch,
    /// floored at 1e-3, recomputed per call.
    MedianHeuristic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    pub bandwidth: KernelBandwidth,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            bandwidth: KernelBandwidth::MedianHeuristic,
        }
    }
}

pub const BANDWIDTH_FLOOR: f64 = 1e-3;

/// Which mask a partial BCE uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    Known,
    Pseudo,
}

fn clamp_probs(tape: &mut Tape, probs: TensorId) -> TensorId {
    tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)
}

/// Masked binary cross-entropy:
/// -(1/|mask|) sum mask * (y ln p + (1-y) ln(1-p)).
///
/// `values` supplies the targets (entries outside the mask ignored); 0 with
/// no gradient when the mask is empty.
pub fn masked_bce(
    tape: &mut Tape,
    probs: TensorId,
    values: &[i8],
    mask: &[f64],
) -> Result<TensorId> {
    let n = tape.data(probs).len();
    if values.len() != n || mask.len() != n {
        return Err(Error::Shape(format!(
            "masked_bce: probs {n}, values {}, mask {}",
            values.len(),
            mask.len()
        )));
    }
    if values
        .iter()
        .any(|v| ![POSITIVE, crate::labels::NEGATIVE, UNKNOWN].contains(v))
    {
        return Err(Error::InvalidArg("labels outside {1, 0, -1}".into()));
    }
    let m: f64 = mask.iter().sum();
    if m == 0.0 {
        return Ok(tape.constant_scalar(0.0));
    }
    let shape = tape.shape(probs).to_vec();
    let w_pos: Vec<f64> = values
        .iter()
        .zip(mask)
        .map(|(&v, &mk)| if v == POSITIVE { mk } else { 0.0 })
        .collect();
    let w_neg: Vec<f64> = values
        .iter()
        .zip(mask)
        .map(|(&v, &mk)| if v == crate::labels::NEGATIVE { mk } else { 0.0 })
        .collect();

    let p = clamp_probs(tape, probs);
    let ln_p = tape.ln(p);
    let neg_p = tape.mul_scalar(p, -1.0);
    let one_minus = tape.add_scalar(neg_p, 1.0);
    let ln_q = tape.ln(one_minus);

    let wp = tape.constant(&Tensor::new(shape.clone(), w_pos)?);
    let wn = tape.constant(&Tensor::new(shape, w_neg)?);
    let pos_term = tape.mul(wp, ln_p);
    let neg_term = tape.mul(wn, ln_q);
    let total = {
        let s = tape.add(pos_term, neg_term);
        tape.sum_all(s)
    };
    Ok(tape.mul_scalar(total, -1.0 / m))
}

/// Partial BCE over a known- or pseudo-label mask.
pub fn partial_bce(
    tape: &mut Tape,
    probs: TensorId,
    labels: &PartialLabels,
    pseudo: Option<&PseudoLabels>,
    source: MaskSource,
) -> Result<TensorId> {
    match source {
        MaskSource::Known => masked_bce(tape, probs, labels.values(), &labels.delta()),
        MaskSource::Pseudo => {
            let p = pseudo.ok_or_else(|| {
                Error::InvalidArg("pseudo mask requested without pseudo labels".into())
            })?;
            masked_bce(tape, probs, p.values(), &p.zeta())
        }
    }
}

pub fn partial_bce_known(
    tape: &mut Tape,
    probs: TensorId,
    labels: &PartialLabels,
) -> Result<TensorId> {
    masked_bce(tape, probs, labels.values(), &labels.delta())
}

pub fn partial_bce_pseudo(
    tape: &mut Tape,
    probs: TensorId,
    pseudo: &PseudoLabels,
) -> Result<TensorId> {
    masked_bce(tape, probs, pseudo.values(), &pseudo.zeta())
}

/// Known-label BCE plus lambda1 times pseudo-label BCE.
pub fn s2_classification_loss(
    tape: &mut Tape,
    probs: TensorId,
    labels: &PartialLabels,
    pseudo: &PseudoLabels,
    weights: &LossWeights,
) -> Result<TensorId> {
    let known = partial_bce_known(tape, probs, labels)?;
    let psd = partial_bce_pseudo(tape, probs, pseudo)?;
    let scaled = tape.mul_scalar(psd, weights.lambda1);
    Ok(tape.add(known, scaled))
}

fn resolve_bandwidth(
    kernel: &KernelConfig,
    student: &[&[f64]],
    teacher: &[&Tensor],
) -> Result<f64> {
    match kernel.bandwidth {
        KernelBandwidth::Fixed(h) => {
            if !(h > 0.0) {
                return Err(Error::InvalidArg(format!("kernel bandwidth {h} must be > 0")));
            }
            Ok(h)
        }
        KernelBandwidth::MedianHeuristic => {
            let mut dists = Vec::new();
            for (s, t) in student.iter().zip(teacher) {
                let tc = t.shape()[1];
                for ti in 0..t.shape()[0] {
                    let d2: f64 = s[ti * tc..(ti + 1) * tc]
                        .iter()
                        .zip(&t.data()[ti * tc..(ti + 1) * tc])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if !d2.is_finite() {
                        return Err(Error::NonFinite("mmd feature distance".into()));
                    }
                    dists.push(d2.sqrt());
                }
            }
            dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            let n = dists.len();
            let median = if n == 0 {
                0.0
            } else if n % 2 == 1 {
                dists[n / 2]
            } else {
                0.5 * (dists[n / 2 - 1] + dists[n / 2])
            };
            Ok(median.max(BANDWIDTH_FLOOR))
        }
    }
}

/// Gaussian-kernel MMD between per-sample task feature matrices, expanded
/// per (sample, task) as k(f,f) + k(g,g) - 2 k(f,g) = 2 (1 - exp(-d^2/2h^2))
/// and averaged over the batch and tasks.
///
/// Teacher features are plain values; gradients reach student features only.
pub fn mmd_loss(
    tape: &mut Tape,
    student_feats: &[TensorId],
    teacher_feats: &[&Tensor],
    kernel: &KernelConfig,
) -> Result<TensorId> {
    if student_feats.len() != teacher_feats.len() || student_feats.is_empty() {
        return Err(Error::Shape("mmd_loss: batch size mismatch or empty".into()));
    }
    let student_values: Vec<&[f64]> = student_feats.iter().map(|&id| tape.data(id)).collect();
    // Leak-free: the slices borrow tape data; bandwidth resolution happens
    // before any new node is pushed.
    let h = {
        let views: Vec<&[f64]> = student_values.to_vec();
        resolve_bandwidth(kernel, &views, teacher_feats)?
    };
    let scale = -1.0 / (2.0 * h * h);

    let mut rows = Vec::with_capacity(student_feats.len());
    for (&sid, t) in student_feats.iter().zip(teacher_feats) {
        if tape.shape(sid) != t.shape() {
            return Err(Error::Shape(format!(
                "mmd_loss: student {:?} vs teacher {:?}",
                tape.shape(sid),
                t.shape()
            )));
        }
        let tconst = tape.constant(t);
        let diff = tape.sub(sid, tconst);
        let sq = tape.square(diff);
        let d2 = tape.sum_axis1(sq); // [T]
        rows.push(d2);
    }
    let d2_all = tape.concat_rows(&rows); // [B, T]
    let exparg = tape.mul_scalar(d2_all, scale);
    let k = tape.exp(exparg);
    let neg2k = tape.mul_scalar(k, -2.0);
    let term = tape.add_scalar(neg2k, 2.0);
    Ok(tape.mean_all(term))
}

/// One-sided KL over known entries:
/// (1/|delta|) sum delta * yhat ln(yhat / ybar), teacher side constant.
pub fn kl_known(
    tape: &mut Tape,
    teacher_probs: &Tensor,
    student_probs: TensorId,
    delta: &[f64],
) -> Result<TensorId> {
    let n = tape.data(student_probs).len();
    if teacher_probs.numel() != n || delta.len() != n {
        return Err(Error::Shape("kl_known: shape mismatch".into()));
    }
    let m: f64 = delta.iter().sum();
    if m == 0.0 {
        return Ok(tape.constant_scalar(0.0));
    }
    let clamp = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let w: Vec<f64> = teacher_probs
        .data()
        .iter()
        .zip(delta)
        .map(|(&p, &d)| d * clamp(p))
        .collect();
    let const_part: f64 = teacher_probs
        .data()
        .iter()
        .zip(delta)
        .map(|(&p, &d)| {
            let pc = clamp(p);
            d * pc * pc.ln()
        })
        .sum();

    let shape = tape.shape(student_probs).to_vec();
    let sp = clamp_probs(tape, student_probs);
    let ln_s = tape.ln(sp);
    let wc = tape.constant(&Tensor::new(shape, w)?);
    let cross = {
        let prod = tape.mul(wc, ln_s);
        tape.sum_all(prod)
    };
    let neg = tape.mul_scalar(cross, -1.0 / m);
    Ok(tape.add_scalar(neg, const_part / m))
}

/// Adversarial objective: -(1/|delta|) sum delta * y ln(y / ybar), which by
/// the 0 ln 0 = 0 convention reduces to the mean log-probability the student
/// assigns to known positives. Always <= 0; minimized when the student is
/// confidently wrong on them.
pub fn adversarial_loss(
    tape: &mut Tape,
    labels: &PartialLabels,
    student_probs: TensorId,
) -> Result<TensorId> {
    let n = tape.data(student_probs).len();
    if labels.values().len() != n {
        return Err(Error::Shape("adversarial_loss: shape mismatch".into()));
    }
    let delta = labels.delta();
    let m: f64 = delta.iter().sum();
    if m == 0.0 {
        return Ok(tape.constant_scalar(0.0));
    }
    let w: Vec<f64> = labels
        .values()
        .iter()
        .map(|&v| if v == POSITIVE { 1.0 } else { 0.0 })
        .collect();
    let shape = tape.shape(student_probs).to_vec();
    let sp = clamp_probs(tape, student_probs);
    let ln_s = tape.ln(sp);
    let wc = tape.constant(&Tensor::new(shape, w)?);
    let s = {
        let prod = tape.mul(wc, ln_s);
        tape.sum_all(prod)
    };
    Ok(tape.mul_scalar(s, 1.0 / m))
}

/// Second student's total: classification + lambda2 MMD + lambda3 KL.
pub fn s2_total_loss(
    tape: &mut Tape,
    s2_classification: TensorId,
    mmd: TensorId,
    kl: TensorId,
    weights: &LossWeights,
) -> TensorId {
    let m = tape.mul_scalar(mmd, weights.lambda2);
    let k = tape.mul_scalar(kl, weights.lambda3);
    let a = tape.add(s2_classification, m);
    tape.add(a, k)
}

/// Overall loss (adversarial term excluded): teacher known-label BCE +
/// first student's pseudo-label BCE + second student's total.
pub fn total_loss(
    tape: &mut Tape,
    teacher_ce: TensorId,
    s1_pseudo_ce: TensorId,
    s2_total: TensorId,
) -> TensorId {
    let a = tape.add(teacher_ce, s1_pseudo_ce);
    tape.add(a, s2_total)
}
