//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(sizes: &[usize], lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update. `params` and `grads` must follow the construction order.
    ///
    /// theta <- theta - lr * ( m_hat / (sqrt(v_hat) + eps) + wd * theta )
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer built for {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.numel() != g.len() {
                return Err(Error::Shape("gradient size mismatch".into()));
            }
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                let w = p.data()[k];
                p.data_mut()[k] = w - self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * w);
            }
        }
        Ok(())
    }

    /// Moment buffers as named tensors for checkpointing.
    pub fn state_tensors(&self, prefix: &str, shapes: &[&Tensor]) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            let shape = shapes[i].shape().to_vec();
            out.push((
                format!("{prefix}.m.{i}"),
                Tensor::new(shape.clone(), m.clone()).expect("moment shape"),
            ));
            out.push((
                format!("{prefix}.v.{i}"),
                Tensor::new(shape, v.clone()).expect("moment shape"),
            ));
        }
        out.push((format!("{prefix}.step"), Tensor::scalar(self.step_count as f64)));
        out
    }

    pub fn restore_state(&mut self, prefix: &str, tensors: &std::collections::BTreeMap<String, Tensor>) -> Result<()> {
        for i in 0..self.m.len() {
            let m = tensors
                .get(&format!("{prefix}.m.{i}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}.m.{i}")))?;
            let v = tensors
                .get(&format!("{prefix}.v.{i}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}.v.{i}")))?;
            if m.numel() != self.m[i].len() || v.numel() != self.v[i].len() {
                return Err(Error::Checkpoint("moment size mismatch".into()));
            }
            self.m[i] = m.data().to_vec();
            self.v[i] = v.data().to_vec();
        }
        let step = tensors
            .get(&format!("{prefix}.step"))
            .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}.step")))?;
        self.step_count = step.item() as u64;
        Ok(())
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}
