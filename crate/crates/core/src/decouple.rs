//! Text-guided semantic decoupling: attention between spatial features and
//! fixed per-task text embeddings, producing one feature vector per task.
//!
//! For feature map F and task embedding d, the attention logit at location
//! (h, w) is v' tanh((W1 F_hw) .* (W2 d)); scores are softmax-normalized over
//! all locations and used to aggregate F into a task-aware vector.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Fixed per-task text embeddings, `[T, d_text]`. Frozen: registered on
/// tapes as constants only.
#[derive(Debug, Clone)]
pub struct DiseaseEmbeddings {
    matrix: Tensor,
}

impl DiseaseEmbeddings {
    pub fn new(matrix: Tensor) -> Result<Self> {
        if matrix.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "embeddings must be [T, d_text], got {:?}",
                matrix.shape()
            )));
        }
        matrix.ensure_finite("disease embeddings")?;
        Ok(DiseaseEmbeddings { matrix })
    }

    /// Deterministic default: Gaussian rows orthogonalized against each
    /// other (as far as the dimension allows) and normalized to unit length.
    pub fn deterministic(tasks: usize, d_text: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = (0..tasks)
            .map(|_| (0..d_text).map(|_| standard_normal(&mut rng)).collect())
            .collect();
        for i in 0..tasks {
            for j in 0..i.min(d_text) {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let prev = rows[j].clone();
                for (a, b) in rows[i].iter_mut().zip(prev) {
                    *a -= dot * b;
                }
            }
            let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in rows[i].iter_mut() {
                *v /= norm;
            }
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        DiseaseEmbeddings {
            matrix: Tensor::new(vec![tasks, d_text], data).expect("shape consistent"),
        }
    }

    pub fn tasks(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let d = self.dim();
        &self.matrix.data()[t * d..(t + 1) * d]
    }

    /// Text format: header line "T d_text", then T rows of d_text reals.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut it = text.split_whitespace();
        let t: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Config("embedding file: missing task count".into()))?;
        let d: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Config("embedding file: missing dimension".into()))?;
        let mut data = Vec::with_capacity(t * d);
        for tok in it {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::Config(format!("embedding file: bad number {tok:?}")))?;
            data.push(v);
        }
        if data.len() != t * d {
            return Err(Error::Config(format!(
                "embedding file: expected {} values, got {}",
                t * d,
                data.len()
            )));
        }
        Self::new(Tensor::new(vec![t, d], data)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!("{} {}\n", self.tasks(), self.dim());
        for t in 0..self.tasks() {
            let row = self.row(t);
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{v:.17e}");
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one value per draw keeps the stream simple to reason about.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Attention parameters shared by all branches: W1 [d_att, C],
/// W2 [d_att, d_text], v [d_att]. No bias terms.
#[derive(Debug, Clone)]
pub struct DecoupleParams {
    pub w1: Tensor,
    pub w2: Tensor,
    pub v: Tensor,
}

impl DecoupleParams {
    pub fn init(d_att: usize, channels: usize, d_text: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = |rows: usize, cols: usize| {
            let scale = (2.0 / (rows + cols) as f64).sqrt();
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| standard_normal(&mut rng) * scale)
                .collect();
            Tensor::new(vec![rows, cols], data).expect("shape consistent")
        };
        let w1 = gen(d_att, channels);
        let w2 = gen(d_att, d_text);
        let v = {
            let data: Vec<f64> = (0..d_att)
                .map(|_| standard_normal(&mut rng) * (1.0 / (d_att as f64).sqrt()))
                .collect();
            Tensor::new(vec![d_att], data).expect("shape consistent")
        };
        DecoupleParams { w1, w2, v }
    }
}

/// Tape handles of registered decoupling parameters.
#[derive(Debug, Clone, Copy)]
pub struct DecoupleIds {
    pub w1: TensorId,
    pub w2: TensorId,
    pub v: TensorId,
}

impl DecoupleParams {
    pub fn register(&self, tape: &mut Tape) -> DecoupleIds {
        DecoupleIds {
            w1: tape.leaf(&self.w1),
            w2: tape.leaf(&self.w2),
            v: tape.leaf(&self.v),
        }
    }

    pub fn register_frozen(&self, tape: &mut Tape) -> DecoupleIds {
        DecoupleIds {
            w1: tape.constant(&self.w1),
            w2: tape.constant(&self.w2),
            v: tape.constant(&self.v),
        }
    }
}

/// Per-task projected embeddings W2 d_t, each `[d_att]`. Shared by every
/// sample and branch on a tape; compute once per forward pass.
pub fn project_embeddings(
    tape: &mut Tape,
    embeddings: &DiseaseEmbeddings,
    params: DecoupleIds,
) -> Vec<TensorId> {
    let d_att = tape.shape(params.w1)[0];
    let d_text = embeddings.dim();
    (0..embeddings.tasks())
        .map(|t| {
            let d_col = tape.constant(
                &Tensor::new(vec![d_text, 1], embeddings.row(t).to_vec()).expect("row shape"),
            );
            let col = tape.matmul(params.w2, d_col); // [d_att, 1]
            tape.reshape(col, &[d_att])
        })
        .collect()
}

/// Attention logits for every task at once: `[T, H*W]`, before softmax.
fn attention_logits(
    tape: &mut Tape,
    feat: TensorId,
    projected: &[TensorId],
    params: DecoupleIds,
) -> TensorId {
    let s = tape.shape(feat).to_vec();
    assert_eq!(s.len(), 3, "decouple expects [C,H,W], got {s:?}");
    let (c, h, w) = (s[0], s[1], s[2]);
    let flat = tape.reshape(feat, &[c, h * w]);
    let w1f = tape.matmul(params.w1, flat); // [d_att, HW]
    let d_att = tape.shape(params.w1)[0];
    let v_row = tape.reshape(params.v, &[1, d_att]);

    let mut rows = Vec::with_capacity(projected.len());
    for &w2d_t in projected {
        let gated = tape.mul_col(w1f, w2d_t); // [d_att, HW]
        let act = tape.tanh(gated);
        let logits = tape.matmul(v_row, act); // [1, HW]
        rows.push(tape.reshape(logits, &[h * w]));
    }
    tape.concat_rows(&rows) // [T, HW]
}

/// Normalized attention map for a single task embedding, `[H, W]`.
pub fn attention_scores(
    tape: &mut Tape,
    feat: TensorId,
    embedding: &[f64],
    params: DecoupleIds,
) -> Result<TensorId> {
    let s = tape.shape(feat).to_vec();
    if s.len() != 3 {
        return Err(Error::Shape(format!("attention expects [C,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let emb = DiseaseEmbeddings::new(Tensor::new(vec![1, embedding.len()], embedding.to_vec())?)?;
    let projected = project_embeddings(tape, &emb, params);
    let logits = attention_logits(tape, feat, &projected, params);
    let alpha = tape.softmax_rows(logits);
    Ok(tape.reshape(alpha, &[h, w]))
}

/// Like [`decouple_traced`], with the embedding projections precomputed.
pub fn decouple_projected(
    tape: &mut Tape,
    feat: TensorId,
    projected: &[TensorId],
    params: DecoupleIds,
) -> (TensorId, TensorId) {
    let s = tape.shape(feat).to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let logits = attention_logits(tape, feat, projected, params);
    let alpha = tape.softmax_rows(logits); // [T, HW]
    let flat = tape.reshape(feat, &[c, h * w]);
    let flat_t = tape.transpose2d(flat); // [HW, C]
    let f = tape.matmul(alpha, flat_t); // [T, C]
    (f, alpha)
}

/// Task-aware feature vectors `[T, C]` plus the attention maps `[T, H*W]`.
pub fn decouple_traced(
    tape: &mut Tape,
    feat: TensorId,
    embeddings: &DiseaseEmbeddings,
    params: DecoupleIds,
) -> (TensorId, TensorId) {
    let projected = project_embeddings(tape, embeddings, params);
    decouple_projected(tape, feat, &projected, params)
}

pub fn decouple(
    tape: &mut Tape,
    feat: TensorId,
    embeddings: &DiseaseEmbeddings,
    params: DecoupleIds,
) -> TensorId {
    decouple_traced(tape, feat, embeddings, params).0
}
