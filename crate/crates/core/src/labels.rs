//! Partial-label bookkeeping and pseudo-label generation.
//!
//! Labels take values in {1, 0, -1}: positive, negative, unknown. The known
//! indicator delta marks entries carrying a ground-truth value. Pseudo labels
//! fill unknown entries by thresholding teacher confidence; zeta marks where
//! one was assigned, and an assigned pseudo label never overlaps a known one.

use crate::error::{Error, Result};

pub const POSITIVE: i8 = 1;
pub const NEGATIVE: i8 = 0;
pub const UNKNOWN: i8 = -1;

/// A batch of per-sample label vectors over `tasks` tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialLabels {
    y: Vec<i8>,
    batch: usize,
    tasks: usize,
}

impl PartialLabels {
    pub fn new(batch: usize, tasks: usize, y: Vec<i8>) -> Result<Self> {
        if y.len() != batch * tasks {
            return Err(Error::Shape(format!(
                "labels: {} entries for batch {batch} x tasks {tasks}",
                y.len()
            )));
        }
        if let Some(bad) = y.iter().find(|v| ![POSITIVE, NEGATIVE, UNKNOWN].contains(v)) {
            return Err(Error::InvalidArg(format!("label value {bad} outside {{1, 0, -1}}")));
        }
        Ok(PartialLabels { y, batch, tasks })
    }

    pub fn single(y: Vec<i8>) -> Result<Self> {
        let t = y.len();
        Self::new(1, t, y)
    }

    pub fn from_rows(rows: &[&[i8]]) -> Result<Self> {
        let batch = rows.len();
        let tasks = rows.first().map_or(0, |r| r.len());
        let mut y = Vec::with_capacity(batch * tasks);
        for r in rows {
            if r.len() != tasks {
                return Err(Error::Shape("ragged label rows".into()));
            }
            y.extend_from_slice(r);
        }
        Self::new(batch, tasks, y)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn values(&self) -> &[i8] {
        &self.y
    }

    pub fn get(&self, b: usize, t: usize) -> i8 {
        self.y[b * self.tasks + t]
    }

    /// Known indicator: 1.0 where the label is 1 or 0.
    pub fn delta(&self) -> Vec<f64> {
        self.y.iter().map(|&v| if v == UNKNOWN { 0.0 } else { 1.0 }).collect()
    }

    pub fn known_count(&self) -> usize {
        self.y.iter().filter(|&&v| v != UNKNOWN).count()
    }
}

/// Pseudo labels for unknown entries, with assignment indicator zeta.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    labels: PartialLabels,
}

impl PseudoLabels {
    /// Wraps label values as pseudo labels, enforcing that no assigned entry
    /// coincides with a known entry of `delta_source`.
    pub fn new(labels: PartialLabels, delta_source: &PartialLabels) -> Result<Self> {
        if labels.batch != delta_source.batch || labels.tasks != delta_source.tasks {
            return Err(Error::Shape("pseudo labels shape mismatch".into()));
        }
        for (psd, known) in labels.y.iter().zip(&delta_source.y) {
            if *psd != UNKNOWN && *known != UNKNOWN {
                return Err(Error::InvalidArg(
                    "pseudo label assigned to a known entry".into(),
                ));
            }
        }
        Ok(PseudoLabels { labels })
    }

    pub fn values(&self) -> &[i8] {
        &self.labels.y
    }

    pub fn batch(&self) -> usize {
        self.labels.batch
    }

    pub fn tasks(&self) -> usize {
        self.labels.tasks
    }

    /// Assignment indicator: 1.0 where a pseudo label exists.
    pub fn zeta(&self) -> Vec<f64> {
        self.labels.delta()
    }

    pub fn assigned_count(&self) -> usize {
        self.labels.known_count()
    }
}

/// Threshold detached teacher probabilities into pseudo labels.
///
/// For an unknown entry: 1 if p > tau, 0 if p < 1 - tau, otherwise -1.
/// Known entries are never pseudo-labelled. Strict inequalities: a
/// probability exactly at a band edge stays unassigned.
pub fn generate_pseudo_labels(
    probs: &[f64],
    labels: &PartialLabels,
    tau: f64,
) -> Result<PseudoLabels> {
    if !(tau > 0.5 && tau < 1.0) {
        return Err(Error::InvalidArg(format!(
            "tau={tau} must lie in (0.5, 1); otherwise the bands overlap"
        )));
    }
    if probs.len() != labels.values().len() {
        return Err(Error::Shape(format!(
            "probs len {} vs labels len {}",
            probs.len(),
            labels.values().len()
        )));
    }
    let y: Vec<i8> = probs
        .iter()
        .zip(labels.values())
        .map(|(&p, &known)| {
            if known != UNKNOWN {
                UNKNOWN
            } else if p > tau {
                POSITIVE
            } else if p < 1.0 - tau {
                NEGATIVE
            } else {
                UNKNOWN
            }
        })
        .collect();
    let pl = PartialLabels::new(labels.batch(), labels.tasks(), y)?;
    PseudoLabels::new(pl, labels)
}
