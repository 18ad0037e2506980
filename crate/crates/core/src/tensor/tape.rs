//! Operation tape for reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so the tape itself is a valid
//! topological order and backward traversal is a single reverse scan.
//! Gradients accumulate into per-node buffers; leaves registered with
//! `requires_grad` keep theirs readable after [`Tape::backward`].

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

pub(crate) enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    AddScalar(TensorId),
    MulScalar(TensorId, f64),
    Exp(TensorId),
    Ln(TensorId),
    Sqrt(TensorId),
    Square(TensorId),
    Tanh(TensorId),
    Sigmoid(TensorId),
    Silu(TensorId),
    Softplus(TensorId),
    ClampMin(TensorId, f64),
    Clamp(TensorId, f64, f64),
    MatMul {
        lhs: TensorId,
        rhs: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose2d(TensorId),
    Reshape(TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    SumAxis1(TensorId),
    MeanAxis1(TensorId),
    /// `x[r, c] op v[r]`, the vector broadcast along the second axis.
    AddCol(TensorId, TensorId),
    SubCol(TensorId, TensorId),
    MulCol(TensorId, TensorId),
    DivCol(TensorId, TensorId),
    SoftmaxRows(TensorId),
    ConcatRows(Vec<TensorId>),
    GatherRegion {
        src: TensorId,
        rows: Vec<usize>,
        cols: Vec<usize>,
    },
    ScatterRegion {
        base: TensorId,
        values: TensorId,
        rows: Vec<usize>,
        cols: Vec<usize>,
    },
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    },
    Fft2Centered(TensorId),
    Ifft2CenteredReal(TensorId),
    ComplexAbs(TensorId),
    ComplexArg(TensorId),
    PolarToComplex {
        amp: TensorId,
        phase: TensorId,
    },
    /// z * (amp / |z|): amplitude replaced, phase kept. At |z| = 0 the
    /// result is (amp, 0), matching the atan2(0, 0) = 0 convention of the
    /// polar route.
    RescaleAmp {
        z: TensorId,
        amp: TensorId,
    },
}

pub(crate) struct Node {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    pub op: Op,
}

/// Records a forward trace and differentiates it.
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            requires_grad,
            op,
        });
        id
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Register a differentiable leaf (parameter or checked input).
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(t.data().to_vec(), t.shape().to_vec(), true, Op::Leaf)
    }

    /// Register a constant; gradients never flow into it.
    pub fn constant(&mut self, t: &Tensor) -> TensorId {
        self.push(t.data().to_vec(), t.shape().to_vec(), false, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![v], vec![], false, Op::Leaf)
    }

    /// Copy of a node's value as a new constant leaf, cutting gradient flow.
    pub fn detach(&mut self, id: TensorId) -> TensorId {
        let data = self.nodes[id.0].data.clone();
        let shape = self.nodes[id.0].shape.clone();
        self.push(data, shape, false, Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn value(&self, id: TensorId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("node shape consistent")
    }

    pub fn item(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Gradient of the last `backward` target with respect to `id`.
    ///
    /// `None` if backward has not run or no gradient reached the node.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn assert_same_shape(&self, a: TensorId, b: TensorId, what: &str) {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "{what}: shape mismatch {:?} vs {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "add");
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push(data, shape, rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "sub");
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push(data, shape, rg, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "mul");
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push(data, shape, rg, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(data, shape, rg, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(data, shape, rg, Op::MulScalar(a, c))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.exp()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(data, shape, rg, Op::Exp(a))
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(data, shape, rg, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.sqrt()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(data, shape, rg, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * x).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(data, shape, rg, Op::Square(a))
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.tanh()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(data, shape, rg, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(data, shape, rg, Op::Sigmoid(a))
    }

    /// x * sigmoid(x); smooth non-saturating activation.
    pub fn silu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|x| x / (1.0 + (-x).exp()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(data, shape, rg, Op::Silu(a))
    }

    /// ln(1 + e^x), computed stably for large |x|.
    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| softplus(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(data, shape, rg, Op::Softplus(a))
    }

    pub fn clamp_min(&mut self, a: TensorId, lo: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.max(lo)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(data, shape, rg, Op::ClampMin(a, lo))
    }

    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|x| x.max(lo).min(hi))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(data, shape, rg, Op::Clamp(a, lo, hi))
    }

    // ---- matrix / shape ----

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert_eq!(sa.len(), 2, "matmul lhs must be 2-d, got {sa:?}");
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-d, got {sb:?}");
        assert_eq!(sa[1], sb[0], "matmul inner dims: {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_2d(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(data, vec![m, n], rg, Op::MatMul { lhs: a, rhs: b, m, k, n })
    }

    pub fn transpose2d(&mut self, a: TensorId) -> TensorId {
        let s = &self.nodes[a.0].shape;
        assert_eq!(s.len(), 2, "transpose2d needs 2-d, got {s:?}");
        let (r, c) = (s[0], s[1]);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(data, vec![c, r], rg, Op::Transpose2d(a))
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> TensorId {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            self.nodes[a.0].data.len(),
            "reshape to {shape:?} from {:?}",
            self.nodes[a.0].shape
        );
        let data = self.nodes[a.0].data.clone();
        let rg = self.rg(a);
        self.push(data, shape.to_vec(), rg, Op::Reshape(a))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.rg(a);
        self.push(vec![s], vec![], rg, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.rg(a);
        self.push(vec![s / n], vec![], rg, Op::MeanAll(a))
    }

    pub fn sum_axis1(&mut self, a: TensorId) -> TensorId {
        let s = &self.nodes[a.0].shape;
        assert_eq!(s.len(), 2, "sum_axis1 needs 2-d, got {s:?}");
        let (r, c) = (s[0], s[1]);
        let src = &self.nodes[a.0].data;
        let data: Vec<f64> = (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.rg(a);
        self.push(data, vec![r], rg, Op::SumAxis1(a))
    }

    pub fn mean_axis1(&mut self, a: TensorId) -> TensorId {
        let s = &self.nodes[a.0].shape;
        assert_eq!(s.len(), 2, "mean_axis1 needs 2-d, got {s:?}");
        let (r, c) = (s[0], s[1]);
        let src = &self.nodes[a.0].data;
        let data: Vec<f64> = (0..r)
            .map(|i| src[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
            .collect();
        let rg = self.rg(a);
        self.push(data, vec![r], rg, Op::MeanAxis1(a))
    }

    // ---- column-vector broadcast over rows of a 2-d tensor ----

    fn col_op(
        &mut self,
        a: TensorId,
        v: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> TensorId {
        let s = &self.nodes[a.0].shape;
        assert_eq!(s.len(), 2, "col op needs 2-d lhs, got {s:?}");
        let (r, c) = (s[0], s[1]);
        assert_eq!(
            self.nodes[v.0].data.len(),
            r,
            "col op vector length {} vs rows {r}",
            self.nodes[v.0].data.len()
        );
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let vi = self.nodes[v.0].data[i];
            for j in 0..c {
                data.push(f(self.nodes[a.0].data[i * c + j], vi));
            }
        }
        let rg = self.rg(a) || self.rg(v);
        self.push(data, vec![r, c], rg, op)
    }

    pub fn add_col(&mut self, a: TensorId, v: TensorId) -> TensorId {
        self.col_op(a, v, |x, y| x + y, Op::AddCol(a, v))
    }

    pub fn sub_col(&mut self, a: TensorId, v: TensorId) -> TensorId {
        self.col_op(a, v, |x, y| x - y, Op::SubCol(a, v))
    }

    pub fn mul_col(&mut self, a: TensorId, v: TensorId) -> TensorId {
        self.col_op(a, v, |x, y| x * y, Op::MulCol(a, v))
    }

    pub fn div_col(&mut self, a: TensorId, v: TensorId) -> TensorId {
        self.col_op(a, v, |x, y| x / y, Op::DivCol(a, v))
    }

    /// Row-wise softmax of a 2-d tensor, max-subtracted for stability.
    pub fn softmax_rows(&mut self, a: TensorId) -> TensorId {
        let s = &self.nodes[a.0].shape;
        assert_eq!(s.len(), 2, "softmax_rows needs 2-d, got {s:?}");
        let (r, c) = (s[0], s[1]);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                data[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                data[i * c + j] /= z;
            }
        }
        let rg = self.rg(a);
        self.push(data, vec![r, c], rg, Op::SoftmaxRows(a))
    }

    /// Stack 1-d tensors of equal length into a 2-d tensor, one per row.
    pub fn concat_rows(&mut self, rows: &[TensorId]) -> TensorId {
        assert!(!rows.is_empty(), "concat_rows needs at least one row");
        let c = self.nodes[rows[0].0].data.len();
        let mut data = Vec::with_capacity(rows.len() * c);
        let mut rg = false;
        for &r in rows {
            assert_eq!(self.nodes[r.0].data.len(), c, "concat_rows ragged rows");
            data.extend_from_slice(&self.nodes[r.0].data);
            rg |= self.rg(r);
        }
        self.push(data, vec![rows.len(), c], rg, Op::ConcatRows(rows.to_vec()))
    }

    /// Select `(row, col)` positions from every channel of a `[C, H, W]`
    /// tensor: output `[C, rows.len() * cols.len()]` in row-major region order.
    pub fn gather_region(&mut self, src: TensorId, rows: &[usize], cols: &[usize]) -> TensorId {
        let s = &self.nodes[src.0].shape;
        assert_eq!(s.len(), 3, "gather_region needs [C,H,W], got {s:?}");
        let (ch, h, w) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(ch * rows.len() * cols.len());
        for c in 0..ch {
            for &i in rows {
                debug_assert!(i < h);
                for &j in cols {
                    debug_assert!(j < w);
                    data.push(self.nodes[src.0].data[c * h * w + i * w + j]);
                }
            }
        }
        let rg = self.rg(src);
        self.push(
            data,
            vec![ch, rows.len() * cols.len()],
            rg,
            Op::GatherRegion {
                src,
                rows: rows.to_vec(),
                cols: cols.to_vec(),
            },
        )
    }

    /// Copy of `base` with the `(row, col)` grid of every channel replaced by
    /// `values` (`[C, rows.len() * cols.len()]`, same order as gather).
    pub fn scatter_region(
        &mut self,
        base: TensorId,
        values: TensorId,
        rows: &[usize],
        cols: &[usize],
    ) -> TensorId {
        let s = &self.nodes[base.0].shape;
        assert_eq!(s.len(), 3, "scatter_region needs [C,H,W], got {s:?}");
        let (ch, h, w) = (s[0], s[1], s[2]);
        assert_eq!(
            self.nodes[values.0].data.len(),
            ch * rows.len() * cols.len(),
            "scatter_region value count"
        );
        let mut data = self.nodes[base.0].data.clone();
        let mut vi = 0;
        for c in 0..ch {
            for &i in rows {
                for &j in cols {
                    data[c * h * w + i * w + j] = self.nodes[values.0].data[vi];
                    vi += 1;
                }
            }
        }
        let rg = self.rg(base) || self.rg(values);
        self.push(
            data,
            vec![ch, h, w],
            rg,
            Op::ScatterRegion {
                base,
                values,
                rows: rows.to_vec(),
                cols: cols.to_vec(),
            },
        )
    }

    /// 2-d convolution over `[C_in, H, W]` with `[C_out, C_in, kh, kw]`
    /// weights, `[C_out]` bias, zero padding.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    ) -> TensorId {
        let si = self.nodes[input.0].shape.clone();
        let sw = self.nodes[weight.0].shape.clone();
        assert_eq!(si.len(), 3, "conv2d input must be [C,H,W], got {si:?}");
        assert_eq!(sw.len(), 4, "conv2d weight must be [O,I,kh,kw], got {sw:?}");
        assert_eq!(si[0], sw[1], "conv2d channel mismatch");
        let (cin, h, w) = (si[0], si[1], si[2]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        assert_eq!(self.nodes[bias.0].data.len(), cout, "conv2d bias length");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;

        let x = &self.nodes[input.0].data;
        let wt = &self.nodes[weight.0].data;
        let b = &self.nodes[bias.0].data;
        let cols = im2col(x, cin, h, w, kh, kw, stride, pad, ho, wo);
        let mut data = matmul_2d(wt, &cols, cout, cin * kh * kw, ho * wo);
        for o in 0..cout {
            let bo = b[o];
            for v in &mut data[o * ho * wo..(o + 1) * ho * wo] {
                *v += bo;
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        self.push(
            data,
            vec![cout, ho, wo],
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
        )
    }

    // ---- backward ----

    /// Reverse-mode sweep seeding d(target)/d(target) = 1.
    ///
    /// `target` must be scalar. A tape supports exactly one backward pass.
    pub fn backward(&mut self, target: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        self.backward_done = true;
        if self.nodes[target.0].data.len() != 1 {
            return Err(Error::Shape(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[target.0].shape
            )));
        }
        self.nodes[target.0].grad = Some(vec![1.0]);

        for i in (0..=target.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let grad = self.nodes[i].grad.clone().expect("grad present");
            self.propagate(i, &grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, contrib: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let n = self.nodes[id.0].data.len();
        let g = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; n]);
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    fn propagate(&mut self, i: usize, grad: &[f64]) {
        // Ops carrying parent data are read before mutation; contributions are
        // built into fresh buffers and accumulated at the end of each arm.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, grad);
                self.accumulate(b, grad);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, grad);
                let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .map(|(g, y)| g * y)
                    .collect();
                let db: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, x)| g * x)
                    .collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::AddScalar(a) => {
                let a = *a;
                self.accumulate(a, grad);
            }
            Op::MulScalar(a, c) => {
                let (a, c) = (*a, *c);
                let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                self.accumulate(a, &da);
            }
            Op::Exp(a) => {
                let a = *a;
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(g, y)| g * y)
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Ln(a) => {
                let a = *a;
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, x)| g / x)
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Sqrt(a) => {
                let a = *a;
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(g, y)| if *y == 0.0 { 0.0 } else { g / (2.0 * y) })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Square(a) => {
                let a = *a;
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, x)| g * 2.0 * x)
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Tanh(a) => {
                let a = *a;
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Silu(a) => {
                let a = *a;
                // Recover sigmoid(x) from the stored output x*sigmoid(x)
                // instead of re-evaluating exp; Taylor fallback near 0.
                let da: Vec<f64> = grad
                    .iter()
                    .zip(self.nodes[a.0].data.iter().zip(&self.nodes[i].data))
                    .map(|(g, (&x, &y))| {
                        let s = if x.abs() > 1e-6 { y / x } else { 0.5 + 0.25 * x };
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Softplus(a) => {
                let a = *a;
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, &x)| g / (1.0 + (-x).exp()))
                    .collect();
                self.accumulate(a, &da);
            }
            Op::ClampMin(a, lo) => {
                let (a, lo) = (*a, *lo);
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, &x)| if x >= lo { *g } else { 0.0 })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Clamp(a, lo, hi) => {
                let (a, lo, hi) = (*a, *lo, *hi);
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, &x)| if x >= lo && x <= hi { *g } else { 0.0 })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::MatMul { lhs, rhs, m, k, n } => {
                let (lhs, rhs, m, k, n) = (*lhs, *rhs, *m, *k, *n);
                // dA = G B^T, dB = A^T G
                let bt = transpose_flat(&self.nodes[rhs.0].data, k, n);
                let da = matmul_2d(grad, &bt, m, n, k);
                let at = transpose_flat(&self.nodes[lhs.0].data, m, k);
                let db = matmul_2d(&at, grad, k, m, n);
                self.accumulate(lhs, &da);
                self.accumulate(rhs, &db);
            }
            Op::Transpose2d(a) => {
                let a = *a;
                let s = &self.nodes[i].shape;
                let (r, c) = (s[0], s[1]);
                let da = transpose_flat(grad, r, c);
                self.accumulate(a, &da);
            }
            Op::Reshape(a) => {
                let a = *a;
                self.accumulate(a, grad);
            }
            Op::SumAll(a) => {
                let a = *a;
                let da = vec![grad[0]; self.nodes[a.0].data.len()];
                self.accumulate(a, &da);
            }
            Op::MeanAll(a) => {
                let a = *a;
                let n = self.nodes[a.0].data.len();
                let da = vec![grad[0] / n as f64; n];
                self.accumulate(a, &da);
            }
            Op::SumAxis1(a) => {
                let a = *a;
                let s = &self.nodes[a.0].shape;
                let (r, c) = (s[0], s[1]);
                let mut da = vec![0.0; r * c];
                for ri in 0..r {
                    for ci in 0..c {
                        da[ri * c + ci] = grad[ri];
                    }
                }
                self.accumulate(a, &da);
            }
            Op::MeanAxis1(a) => {
                let a = *a;
                let s = &self.nodes[a.0].shape;
                let (r, c) = (s[0], s[1]);
                let mut da = vec![0.0; r * c];
                for ri in 0..r {
                    for ci in 0..c {
                        da[ri * c + ci] = grad[ri] / c as f64;
                    }
                }
                self.accumulate(a, &da);
            }
            Op::AddCol(a, v) => {
                let (a, v) = (*a, *v);
                let s = &self.nodes[a.0].shape;
                let (r, c) = (s[0], s[1]);
                self.accumulate(a, grad);
                let dv: Vec<f64> = (0..r).map(|ri| grad[ri * c..(ri + 1) * c].iter().sum()).collect();
                self.accumulate(v, &dv);
            }
            Op::SubCol(a, v) => {
                let (a, v) = (*a, *v);
                let s = &self.nodes[a.0].shape;
                let (r, c) = (s[0], s[1]);
                self.accumulate(a, grad);
                let dv: Vec<f64> = (0..r)
                    .map(|ri| -grad[ri * c..(ri + 1) * c].iter().sum::<f64>())
                    .collect();
                self.accumulate(v, &dv);
            }
            Op::MulCol(a, v) => {
                let (a, v) = (*a, *v);
                let s = &self.nodes[a.0].shape;
                let (r, c) = (s[0], s[1]);
                let mut da = vec![0.0; r * c];
                let mut dv = vec![0.0; r];
                for ri in 0..r {
                    let vi = self.nodes[v.0].data[ri];
                    for ci in 0..c {
                        let g = grad[ri * c + ci];
                        da[ri * c + ci] = g * vi;
                        dv[ri] += g * self.nodes[a.0].data[ri * c + ci];
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(v, &dv);
            }
            Op::DivCol(a, v) => {
                let (a, v) = (*a, *v);
                let s = &self.nodes[a.0].shape;
                let (r, c) = (s[0], s[1]);
                let mut da = vec![0.0; r * c];
                let mut dv = vec![0.0; r];
                for ri in 0..r {
                    let vi = self.nodes[v.0].data[ri];
                    for ci in 0..c {
                        let g = grad[ri * c + ci];
                        da[ri * c + ci] = g / vi;
                        dv[ri] -= g * self.nodes[a.0].data[ri * c + ci] / (vi * vi);
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(v, &dv);
            }
            Op::SoftmaxRows(a) => {
                let a = *a;
                let s = &self.nodes[i].shape;
                let (r, c) = (s[0], s[1]);
                let y = &self.nodes[i].data;
                let mut da = vec![0.0; r * c];
                for ri in 0..r {
                    let row_y = &y[ri * c..(ri + 1) * c];
                    let row_g = &grad[ri * c..(ri + 1) * c];
                    let dot: f64 = row_y.iter().zip(row_g).map(|(yi, gi)| yi * gi).sum();
                    for ci in 0..c {
                        da[ri * c + ci] = row_y[ci] * (row_g[ci] - dot);
                    }
                }
                self.accumulate(a, &da);
            }
            Op::ConcatRows(rows) => {
                let rows = rows.clone();
                let c = self.nodes[i].shape[1];
                for (ri, &row) in rows.iter().enumerate() {
                    self.accumulate(row, &grad[ri * c..(ri + 1) * c]);
                }
            }
            Op::GatherRegion { src, rows, cols } => {
                let src = *src;
                let (rows, cols) = (rows.clone(), cols.clone());
                let s = &self.nodes[src.0].shape;
                let (ch, h, w) = (s[0], s[1], s[2]);
                let mut da = vec![0.0; ch * h * w];
                let mut gi = 0;
                for c in 0..ch {
                    for &ri in &rows {
                        for &ci in &cols {
                            da[c * h * w + ri * w + ci] += grad[gi];
                            gi += 1;
                        }
                    }
                }
                self.accumulate(src, &da);
            }
            Op::ScatterRegion {
                base,
                values,
                rows,
                cols,
            } => {
                let (base, values) = (*base, *values);
                let (rows, cols) = (rows.clone(), cols.clone());
                let s = &self.nodes[i].shape;
                let (ch, h, w) = (s[0], s[1], s[2]);
                // base receives grad everywhere except overwritten positions
                let mut db = grad.to_vec();
                let mut dv = vec![0.0; ch * rows.len() * cols.len()];
                let mut vi = 0;
                for c in 0..ch {
                    for &ri in &rows {
                        for &ci in &cols {
                            let idx = c * h * w + ri * w + ci;
                            dv[vi] = grad[idx];
                            db[idx] = 0.0;
                            vi += 1;
                        }
                    }
                }
                self.accumulate(base, &db);
                self.accumulate(values, &dv);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let (input, weight, bias, stride, pad) = (*input, *weight, *bias, *stride, *pad);
                let si = self.nodes[input.0].shape.clone();
                let sw = self.nodes[weight.0].shape.clone();
                let (cin, h, w) = (si[0], si[1], si[2]);
                let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
                let so = self.nodes[i].shape.clone();
                let (ho, wo) = (so[1], so[2]);
                let (kk, s) = (cin * kh * kw, ho * wo);

                let need_dx = self.rg(input);
                let need_dw = self.rg(weight);
                let need_db = self.rg(bias);

                if need_db {
                    let db: Vec<f64> = (0..cout)
                        .map(|o| grad[o * s..(o + 1) * s].iter().sum())
                        .collect();
                    self.accumulate(bias, &db);
                }
                if need_dw {
                    let x = &self.nodes[input.0].data;
                    let cols = im2col(x, cin, h, w, kh, kw, stride, pad, ho, wo);
                    // dW[o, f] = sum_s G[o, s] * cols[f, s]; four output
                    // channels share each pass over a cols row.
                    let mut dw = vec![0.0; cout * kk];
                    let mut o = 0;
                    while o + 4 <= cout {
                        let g0 = &grad[o * s..(o + 1) * s];
                        let g1 = &grad[(o + 1) * s..(o + 2) * s];
                        let g2 = &grad[(o + 2) * s..(o + 3) * s];
                        let g3 = &grad[(o + 3) * s..(o + 4) * s];
                        for f in 0..kk {
                            let crow = &cols[f * s..(f + 1) * s];
                            let (mut a0, mut a1, mut a2, mut a3) = (0.0, 0.0, 0.0, 0.0);
                            for j in 0..s {
                                let cv = crow[j];
                                a0 += g0[j] * cv;
                                a1 += g1[j] * cv;
                                a2 += g2[j] * cv;
                                a3 += g3[j] * cv;
                            }
                            dw[o * kk + f] = a0;
                            dw[(o + 1) * kk + f] = a1;
                            dw[(o + 2) * kk + f] = a2;
                            dw[(o + 3) * kk + f] = a3;
                        }
                        o += 4;
                    }
                    while o < cout {
                        let grow = &grad[o * s..(o + 1) * s];
                        for f in 0..kk {
                            let crow = &cols[f * s..(f + 1) * s];
                            let mut acc = 0.0;
                            for (gv, cv) in grow.iter().zip(crow) {
                                acc += gv * cv;
                            }
                            dw[o * kk + f] = acc;
                        }
                        o += 1;
                    }
                    self.accumulate(weight, &dw);
                }
                if need_dx {
                    // dcols[f, s] = sum_o W[o, f] * G[o, s] = (W^T G)[f, s]
                    let wt = &self.nodes[weight.0].data;
                    let wt_t = transpose_flat(wt, cout, kk);
                    let dcols = matmul_2d(&wt_t, grad, kk, cout, s);
                    let mut dx = vec![0.0; cin * h * w];
                    col2im_add(&mut dx, &dcols, cin, h, w, kh, kw, stride, pad, ho, wo);
                    self.accumulate(input, &dx);
                }
            }
            Op::Fft2Centered(a) => {
                let a = *a;
                let da = super::fft::backward_fft2_centered(grad, &self.nodes[a.0].shape);
                self.accumulate(a, &da);
            }
            Op::Ifft2CenteredReal(a) => {
                let a = *a;
                let da = super::fft::backward_ifft2_centered_real(grad, &self.nodes[i].shape);
                self.accumulate(a, &da);
            }
            Op::ComplexAbs(a) => {
                let a = *a;
                let z = &self.nodes[a.0].data;
                let mut da = vec![0.0; z.len()];
                for (k, g) in grad.iter().enumerate() {
                    let re = z[2 * k];
                    let im = z[2 * k + 1];
                    let r = (re * re + im * im).sqrt();
                    // Subgradient 0 at the origin.
                    if r > 0.0 {
                        da[2 * k] = g * re / r;
                        da[2 * k + 1] = g * im / r;
                    }
                }
                self.accumulate(a, &da);
            }
            Op::ComplexArg(a) => {
                let a = *a;
                let z = &self.nodes[a.0].data;
                let mut da = vec![0.0; z.len()];
                for (k, g) in grad.iter().enumerate() {
                    let re = z[2 * k];
                    let im = z[2 * k + 1];
                    let r2 = re * re + im * im;
                    if r2 > 0.0 {
                        da[2 * k] = -g * im / r2;
                        da[2 * k + 1] = g * re / r2;
                    }
                }
                self.accumulate(a, &da);
            }
            Op::PolarToComplex { amp, phase } => {
                let (amp, phase) = (*amp, *phase);
                let a = &self.nodes[amp.0].data;
                let p = &self.nodes[phase.0].data;
                let n = a.len();
                let mut damp = vec![0.0; n];
                let mut dph = vec![0.0; n];
                for k in 0..n {
                    let (gc, gs) = (grad[2 * k], grad[2 * k + 1]);
                    let (cp, sp) = (p[k].cos(), p[k].sin());
                    damp[k] = gc * cp + gs * sp;
                    dph[k] = -gc * a[k] * sp + gs * a[k] * cp;
                }
                self.accumulate(amp, &damp);
                self.accumulate(phase, &dph);
            }
            Op::RescaleAmp { z, amp } => {
                let (z, amp) = (*z, *amp);
                let zv = &self.nodes[z.0].data;
                let uv = &self.nodes[amp.0].data;
                let n = uv.len();
                let mut dz = vec![0.0; 2 * n];
                let mut du = vec![0.0; n];
                for k in 0..n {
                    let (x, y) = (zv[2 * k], zv[2 * k + 1]);
                    let (gre, gim) = (grad[2 * k], grad[2 * k + 1]);
                    let a2 = x * x + y * y;
                    if a2 > 0.0 {
                        let a = a2.sqrt();
                        let a3 = a2 * a;
                        du[k] = (gre * x + gim * y) / a;
                        let u = uv[k];
                        dz[2 * k] = u * y * (gre * y - gim * x) / a3;
                        dz[2 * k + 1] = u * x * (gim * x - gre * y) / a3;
                    } else {
                        du[k] = gre;
                    }
                }
                self.accumulate(z, &dz);
                self.accumulate(amp, &du);
            }
        }
    }

    // FFT-family constructors live in fft.rs but need node access.
    pub(crate) fn push_node(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Op,
    ) -> TensorId {
        self.push(data, shape, requires_grad, op)
    }

    pub(crate) fn node_data(&self, id: TensorId) -> &[f64] {
        &self.node(id).data
    }

    pub(crate) fn node_requires_grad(&self, id: TensorId) -> bool {
        self.rg(id)
    }
}

/// Patch-extraction for convolution: output `[cin*kh*kw, ho*wo]`, zeros at
/// padded positions.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let s = ho * wo;
    let mut cols = vec![0.0; cin * kh * kw * s];
    for c in 0..cin {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for di in 0..kh {
            for dj in 0..kw {
                let f = (c * kh + di) * kw + dj;
                let crow = &mut cols[f * s..(f + 1) * s];
                for oi in 0..ho {
                    let ii = oi * stride + di;
                    if ii < pad || ii >= h + pad {
                        continue;
                    }
                    let xrow = &xc[(ii - pad) * w..(ii - pad + 1) * w];
                    let orow = &mut crow[oi * wo..(oi + 1) * wo];
                    for (oj, o) in orow.iter_mut().enumerate() {
                        let jj = oj * stride + dj;
                        if jj >= pad && jj < w + pad {
                            *o = xrow[jj - pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter-add column gradients back to the input.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    dx: &mut [f64],
    dcols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let s = ho * wo;
    for c in 0..cin {
        let xc = &mut dx[c * h * w..(c + 1) * h * w];
        for di in 0..kh {
            for dj in 0..kw {
                let f = (c * kh + di) * kw + dj;
                let crow = &dcols[f * s..(f + 1) * s];
                for oi in 0..ho {
                    let ii = oi * stride + di;
                    if ii < pad || ii >= h + pad {
                        continue;
                    }
                    let xrow = &mut xc[(ii - pad) * w..(ii - pad + 1) * w];
                    let orow = &crow[oi * wo..(oi + 1) * wo];
                    for (oj, &g) in orow.iter().enumerate() {
                        let jj = oj * stride + dj;
                        if jj >= pad && jj < w + pad {
                            xrow[jj - pad] += g;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn matmul_2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    // Process four output rows at a time so each streamed row of `b` is
    // loaded once per group instead of once per output row.
    let mut i = 0;
    while i + 4 <= m {
        let (c01, c23) = c[i * n..(i + 4) * n].split_at_mut(2 * n);
        let (c0, c1) = c01.split_at_mut(n);
        let (c2, c3) = c23.split_at_mut(n);
        for p in 0..k {
            let (a0, a1, a2, a3) = (
                a[i * k + p],
                a[(i + 1) * k + p],
                a[(i + 2) * k + p],
                a[(i + 3) * k + p],
            );
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
        i += 1;
    }
    c
}

fn transpose_flat(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
