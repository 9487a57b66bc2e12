//! Reverse-mode autodiff tape.
//!
//! Every differentiable primitive is a single node with a custom backward
//! rule; whole transforms (rfft, svd, conv) are one node each rather than
//! compositions of scalar ops. Nodes append in topological order, so the
//! backward pass is one reverse sweep over the node list. A graph and its
//! tensors belong to one thread; run independent graphs for parallelism.

use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fft;
use crate::linalg::{self, SvdFactors};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// sqrt(2/pi), the tanh-form gelu constant.
const GELU_C: f64 = 0.797_884_560_802_865_4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMode {
    Circular,
    SameZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Mae,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SvdPart {
    U,
    S,
    V,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    MaskedMatmul {
        w: NodeId,
        x: NodeId,
        mask: Arc<Tensor>,
    },
    MulDiag {
        mat: NodeId,
        diag: NodeId,
    },
    Transpose(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    Conv1d {
        x: NodeId,
        kernels: NodeId,
        mode: ConvMode,
    },
    Rfft {
        x: NodeId,
    },
    Irfft {
        spec: NodeId,
        out_len: usize,
    },
    ComplexApply {
        spec: NodeId,
        w_re: NodeId,
        w_im: NodeId,
    },
    Svd {
        x: NodeId,
        part: SvdPart,
        factors: Rc<SvdFactors>,
    },
    Activation {
        x: NodeId,
        kind: Activation,
    },
    Sum(NodeId),
    Loss {
        pred: NodeId,
        target: NodeId,
        kind: LossKind,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Matmul(..) => "matmul",
            Op::MaskedMatmul { .. } => "masked_matmul",
            Op::MulDiag { .. } => "mul_diag",
            Op::Transpose(..) => "transpose",
            Op::SliceCols { .. } => "slice_cols",
            Op::Conv1d { .. } => "conv1d",
            Op::Rfft { .. } => "rfft",
            Op::Irfft { .. } => "irfft",
            Op::ComplexApply { .. } => "complex_apply",
            Op::Svd { .. } => "svd",
            Op::Activation { .. } => "activation",
            Op::Sum(..) => "sum",
            Op::Loss { .. } => "loss",
        }
    }
}

struct Node {
    op: Op,
    value: Arc<Tensor>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::State(
                "tape already consumed by backward; record a fresh graph".into(),
            ));
        }
        Ok(())
    }

    fn push(&mut self, op: Op, mut value: Tensor, requires_grad: bool) -> NodeId {
        let id = self.nodes.len();
        value.debug_check_finite(op.name());
        value.node_id = Some(id);
        value.requires_grad = requires_grad;
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
            requires_grad,
        });
        id
    }

    fn push_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        id
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Registers an input tensor on the tape.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        self.check_open()?;
        Ok(self.push(Op::Leaf, value, requires_grad))
    }

    /// Registers a shared tensor without copying its data. Used for model
    /// parameters that many per-sample graphs reference at once.
    pub fn leaf_arc(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Result<NodeId> {
        self.check_open()?;
        Ok(self.push_shared(value, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, false)
    }

    fn shapes_equal(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_open()?;
        self.shapes_equal(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_open()?;
        self.shapes_equal(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), out, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_open()?;
        self.shapes_equal(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), out, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check_open()?;
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Scale(a, c), out, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let out = linalg::mat_mul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Matmul(a, b), out, rg))
    }

    /// `(w ⊙ mask) · x` with a fixed binary mask. Gradients for `w` are
    /// exactly zero wherever the mask is zero.
    pub fn masked_matmul(&mut self, w: NodeId, mask: Arc<Tensor>, x: NodeId) -> Result<NodeId> {
        self.check_open()?;
        if mask.shape() != self.value(w).shape() {
            return Err(Error::dim(format!(
                "mask shape {:?} does not match weights {:?}",
                mask.shape(),
                self.value(w).shape()
            )));
        }
        if let Some(bad) = mask.data().iter().find(|m| **m != 0.0 && **m != 1.0) {
            return Err(Error::invalid(format!(
                "mask entries must be 0 or 1, found {bad}"
            )));
        }
        let masked = {
            let wt = self.value(w);
            let data: Vec<f64> = wt
                .data()
                .iter()
                .zip(mask.data())
                .map(|(a, m)| a * m)
                .collect();
            Tensor::new(wt.shape().to_vec(), data)?
        };
        let out = linalg::mat_mul(&masked, self.value(x))?;
        let rg = self.rg(w) || self.rg(x);
        Ok(self.push(Op::MaskedMatmul { w, x, mask }, out, rg))
    }

    /// Column scaling `out[i][j] = mat[i][j] * diag[j]`.
    pub fn mul_diag(&mut self, mat: NodeId, diag: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let m = self.value(mat);
        let d = self.value(diag);
        if m.rank() != 2 || d.rank() != 1 || m.shape()[1] != d.shape()[0] {
            return Err(Error::dim(format!(
                "mul_diag: matrix {:?} vs diagonal {:?}",
                m.shape(),
                d.shape()
            )));
        }
        let (p, q) = (m.shape()[0], m.shape()[1]);
        let mut data = vec![0.0; p * q];
        for i in 0..p {
            for j in 0..q {
                data[i * q + j] = m.at2(i, j) * d.data()[j];
            }
        }
        let out = Tensor::new(vec![p, q], data)?;
        let rg = self.rg(mat) || self.rg(diag);
        Ok(self.push(Op::MulDiag { mat, diag }, out, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let out = self.value(a).transpose2()?;
        let rg = self.rg(a);
        Ok(self.push(Op::Transpose(a), out, rg))
    }

    /// Keeps columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check_open()?;
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(Error::dim("slice_cols expects a rank-2 tensor"));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        if start + len > c {
            return Err(Error::dim(format!(
                "slice {start}..{} out of {c} columns",
                start + len
            )));
        }
        let mut data = vec![0.0; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len].copy_from_slice(&v.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![r, len], data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::SliceCols { x: a, start }, out, rg))
    }

    /// Length-preserving 1D convolution of `(C_in, N)` by `(C_out, C_in, K)`
    /// kernels. The kernel is centered: a delta at the middle tap is the
    /// identity. Circular mode wraps indices; same-zero mode pads `(K-1)/2`
    /// zeros on each side.
    pub fn conv1d(&mut self, x: NodeId, kernels: NodeId, mode: ConvMode) -> Result<NodeId> {
        self.check_open()?;
        let out = conv1d_forward(self.value(x), self.value(kernels), mode)?;
        let rg = self.rg(x) || self.rg(kernels);
        Ok(self.push(Op::Conv1d { x, kernels, mode }, out, rg))
    }

    /// Real DFT of `(C, N)` packed as `(C, N/2+1, 2)` with re/im last.
    pub fn rfft(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(Error::dim("rfft node expects a (channels, time) tensor"));
        }
        let (c, n) = (v.shape()[0], v.shape()[1]);
        if n < 2 {
            return Err(Error::invalid("rfft needs time length >= 2"));
        }
        let f = fft::n_freq_for(n);
        let mut data = vec![0.0; c * f * 2];
        for ch in 0..c {
            let (re, im) = fft::rfft_channel(v.row(ch));
            for k in 0..f {
                data[(ch * f + k) * 2] = re[k];
                data[(ch * f + k) * 2 + 1] = im[k];
            }
        }
        let out = Tensor::new(vec![c, f, 2], data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Rfft { x }, out, rg))
    }

    /// Inverse real DFT of a packed `(C, F, 2)` spectrum to `(C, out_len)`.
    /// Keeps the real part of the full Hermitian-extended inverse, so the
    /// result is real for arbitrary learned spectra.
    pub fn irfft(&mut self, spec: NodeId, out_len: usize) -> Result<NodeId> {
        self.check_open()?;
        let v = self.value(spec);
        if v.rank() != 3 || v.shape()[2] != 2 {
            return Err(Error::dim("irfft node expects a packed (C, F, 2) spectrum"));
        }
        let (c, f) = (v.shape()[0], v.shape()[1]);
        if f != fft::n_freq_for(out_len) {
            return Err(Error::dim(format!(
                "spectrum has {f} bins but out_len {out_len} wants {}",
                fft::n_freq_for(out_len)
            )));
        }
        let mut data = vec![0.0; c * out_len];
        let mut re = vec![0.0; f];
        let mut im = vec![0.0; f];
        for ch in 0..c {
            for k in 0..f {
                re[k] = v.data()[(ch * f + k) * 2];
                im[k] = v.data()[(ch * f + k) * 2 + 1];
            }
            let y = fft::irfft_channel(&re, &im, out_len);
            data[ch * out_len..(ch + 1) * out_len].copy_from_slice(&y);
        }
        let out = Tensor::new(vec![c, out_len], data)?;
        let rg = self.rg(spec);
        Ok(self.push(Op::Irfft { spec, out_len }, out, rg))
    }

    /// Per-channel complex matrix-vector product in the frequency domain:
    /// `out[c] = W[c] · spec[c]` with `W = w_re + i w_im` of shape
    /// `(C, F_out, F_in)` applied to a packed `(C, F_in, 2)` spectrum.
    pub fn complex_apply(&mut self, spec: NodeId, w_re: NodeId, w_im: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let s = self.value(spec);
        let wr = self.value(w_re);
        let wi = self.value(w_im);
        if s.rank() != 3 || s.shape()[2] != 2 {
            return Err(Error::dim("complex_apply expects a packed (C, F, 2) spectrum"));
        }
        if wr.shape() != wi.shape() || wr.rank() != 3 {
            return Err(Error::dim("complex weights must both be (C, F_out, F_in)"));
        }
        let (c, f_in) = (s.shape()[0], s.shape()[1]);
        let (wc, f_out, wf_in) = (wr.shape()[0], wr.shape()[1], wr.shape()[2]);
        if wc != c || wf_in != f_in {
            return Err(Error::dim(format!(
                "weights (C={wc}, F_in={wf_in}) do not match spectrum (C={c}, F_in={f_in})"
            )));
        }
        let mut data = vec![0.0; c * f_out * 2];
        for ch in 0..c {
            for fo in 0..f_out {
                let mut acc_re = 0.0;
                let mut acc_im = 0.0;
                for fi in 0..f_in {
                    let re_w = wr.data()[(ch * f_out + fo) * f_in + fi];
                    let im_w = wi.data()[(ch * f_out + fo) * f_in + fi];
                    let re_x = s.data()[(ch * f_in + fi) * 2];
                    let im_x = s.data()[(ch * f_in + fi) * 2 + 1];
                    acc_re += re_w * re_x - im_w * im_x;
                    acc_im += re_w * im_x + im_w * re_x;
                }
                data[(ch * f_out + fo) * 2] = acc_re;
                data[(ch * f_out + fo) * 2 + 1] = acc_im;
            }
        }
        let out = Tensor::new(vec![c, f_out, 2], data)?;
        let rg = self.rg(spec) || self.rg(w_re) || self.rg(w_im);
        Ok(self.push(Op::ComplexApply { spec, w_re, w_im }, out, rg))
    }

    /// Singular value decomposition of a `(k, n)` matrix with `k <= n`;
    /// returns nodes for `U (k,k)`, `s (k,)` and `V (k,n)`. The factorization
    /// runs once and is shared by the three nodes.
    pub fn svd(&mut self, x: NodeId) -> Result<(NodeId, NodeId, NodeId)> {
        self.check_open()?;
        let factors = Rc::new(linalg::svd_factorize(self.value(x))?);
        let rg = self.rg(x);
        let k = factors.s.len();
        let u = self.push(
            Op::Svd {
                x,
                part: SvdPart::U,
                factors: Rc::clone(&factors),
            },
            factors.u.clone(),
            rg,
        );
        let s_tensor = Tensor::new(vec![k], factors.s.clone())?;
        let s = self.push(
            Op::Svd {
                x,
                part: SvdPart::S,
                factors: Rc::clone(&factors),
            },
            s_tensor,
            rg,
        );
        let v = self.push(
            Op::Svd {
                x,
                part: SvdPart::V,
                factors: Rc::clone(&factors),
            },
            factors.v.clone(),
            rg,
        );
        Ok((u, s, v))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        self.check_open()?;
        let v = self.value(x);
        let data = v.data().iter().map(|&t| kind.apply(t)).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Activation { x, kind }, out, rg))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let total: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        Ok(self.push(Op::Sum(x), Tensor::scalar(total), rg))
    }

    /// Mean squared or mean absolute error over all elements.
    pub fn loss(&mut self, pred: NodeId, target: NodeId, kind: LossKind) -> Result<NodeId> {
        self.check_open()?;
        self.shapes_equal(pred, target, "loss")?;
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let n = p.len() as f64;
        let total: f64 = match kind {
            LossKind::Mse => p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum(),
            LossKind::Mae => p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum(),
        };
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Op::Loss { pred, target, kind }, Tensor::scalar(total / n), rg))
    }

    /// Reverse sweep from a scalar node. Consumes the tape: a second call
    /// without re-recording is rejected.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State(
                "backward already ran on this tape; record a fresh graph".into(),
            ));
        }
        if loss >= self.nodes.len() {
            return Err(Error::invalid("backward from unknown node"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some({
            let mut seed = Tensor::scalar(1.0);
            if self.value(loss).rank() == 1 {
                seed = Tensor::new(vec![1], vec![1.0])?;
            }
            seed
        });

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &g, &mut grads)?;
            // leaves keep their gradient; interior nodes release theirs
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor>],
        id: NodeId,
        contribution: Tensor,
    ) -> Result<()> {
        if !self.nodes[id].requires_grad {
            return Ok(());
        }
        match &mut grads[id] {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), contribution.shape());
                for (a, b) in existing.data_mut().iter_mut().zip(contribution.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
        Ok(())
    }

    fn backprop_node(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let g = maybe_fault_flip(self.nodes[id].op.name(), g);
        let g = &g;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                let neg = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| -v).collect())?;
                self.accumulate(grads, *b, neg)?;
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.rg(*a) {
                    let data = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data)?)?;
                }
                if self.rg(*b) {
                    let data = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), data)?)?;
                }
            }
            Op::Scale(a, c) => {
                let data = g.data().iter().map(|v| v * c).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data)?)?;
            }
            Op::Matmul(a, b) => {
                if self.rg(*a) {
                    let gbt = linalg::mat_mul(g, &self.value(*b).transpose2()?)?;
                    self.accumulate(grads, *a, gbt)?;
                }
                if self.rg(*b) {
                    let atg = linalg::mat_mul(&self.value(*a).transpose2()?, g)?;
                    self.accumulate(grads, *b, atg)?;
                }
            }
            Op::MaskedMatmul { w, x, mask } => {
                let (p, q) = {
                    let ws = self.value(*w).shape();
                    (ws[0], ws[1])
                };
                if self.rg(*w) {
                    // accumulate only where the mask is set; everything else
                    // keeps an exact 0.0
                    let xv = self.value(*x);
                    let r = xv.shape()[1];
                    let mut dw = vec![0.0; p * q];
                    for i in 0..p {
                        for j in 0..q {
                            if mask.data()[i * q + j] == 0.0 {
                                continue;
                            }
                            let mut acc = 0.0;
                            for col in 0..r {
                                acc += g.at2(i, col) * xv.at2(j, col);
                            }
                            dw[i * q + j] = acc;
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new(vec![p, q], dw)?)?;
                }
                if self.rg(*x) {
                    let wv = self.value(*w);
                    let mut masked_t = vec![0.0; q * p];
                    for i in 0..p {
                        for j in 0..q {
                            masked_t[j * p + i] = wv.at2(i, j) * mask.data()[i * q + j];
                        }
                    }
                    let dx = linalg::mat_mul(&Tensor::new(vec![q, p], masked_t)?, g)?;
                    self.accumulate(grads, *x, dx)?;
                }
            }
            Op::MulDiag { mat, diag } => {
                let m = self.value(*mat);
                let d = self.value(*diag);
                let (p, q) = (m.shape()[0], m.shape()[1]);
                if self.rg(*mat) {
                    let mut dm = vec![0.0; p * q];
                    for i in 0..p {
                        for j in 0..q {
                            dm[i * q + j] = g.at2(i, j) * d.data()[j];
                        }
                    }
                    self.accumulate(grads, *mat, Tensor::new(vec![p, q], dm)?)?;
                }
                if self.rg(*diag) {
                    let mut dd = vec![0.0; q];
                    for i in 0..p {
                        for j in 0..q {
                            dd[j] += g.at2(i, j) * m.at2(i, j);
                        }
                    }
                    self.accumulate(grads, *diag, Tensor::new(vec![q], dd)?)?;
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose2()?)?;
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (r, c) = (xv.shape()[0], xv.shape()[1]);
                let len = g.shape()[1];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..len {
                        dx[i * c + start + j] = g.at2(i, j);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![r, c], dx)?)?;
            }
            Op::Conv1d { x, kernels, mode } => {
                let (dx, dk) = conv1d_backward(
                    self.value(*x),
                    self.value(*kernels),
                    *mode,
                    g,
                    self.rg(*x),
                    self.rg(*kernels),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx)?;
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *kernels, dk)?;
                }
            }
            Op::Rfft { x } => {
                let xv = self.value(*x);
                let (c, n) = (xv.shape()[0], xv.shape()[1]);
                let f = fft::n_freq_for(n);
                let mut dx = vec![0.0; c * n];
                let mut gre = vec![0.0; f];
                let mut gim = vec![0.0; f];
                for ch in 0..c {
                    for k in 0..f {
                        gre[k] = g.data()[(ch * f + k) * 2];
                        gim[k] = g.data()[(ch * f + k) * 2 + 1];
                    }
                    let d = fft::rfft_adjoint_channel(&gre, &gim, n);
                    dx[ch * n..(ch + 1) * n].copy_from_slice(&d);
                }
                self.accumulate(grads, *x, Tensor::new(vec![c, n], dx)?)?;
            }
            Op::Irfft { spec, out_len } => {
                let sv = self.value(*spec);
                let (c, f) = (sv.shape()[0], sv.shape()[1]);
                let mut dspec = vec![0.0; c * f * 2];
                for ch in 0..c {
                    let (dre, dim) = fft::irfft_adjoint_channel(g.row(ch), *out_len);
                    for k in 0..f {
                        dspec[(ch * f + k) * 2] = dre[k];
                        dspec[(ch * f + k) * 2 + 1] = dim[k];
                    }
                }
                self.accumulate(grads, *spec, Tensor::new(vec![c, f, 2], dspec)?)?;
            }
            Op::ComplexApply { spec, w_re, w_im } => {
                let sv = self.value(*spec);
                let wr = self.value(*w_re);
                let wi = self.value(*w_im);
                let (c, f_in) = (sv.shape()[0], sv.shape()[1]);
                let f_out = wr.shape()[1];
                let need_spec = self.rg(*spec);
                let need_w = self.rg(*w_re) || self.rg(*w_im);
                let mut dspec = vec![0.0; c * f_in * 2];
                let mut dwr = vec![0.0; c * f_out * f_in];
                let mut dwi = vec![0.0; c * f_out * f_in];
                for ch in 0..c {
                    for fo in 0..f_out {
                        let gre = g.data()[(ch * f_out + fo) * 2];
                        let gim = g.data()[(ch * f_out + fo) * 2 + 1];
                        for fi in 0..f_in {
                            let widx = (ch * f_out + fo) * f_in + fi;
                            let re_w = wr.data()[widx];
                            let im_w = wi.data()[widx];
                            let re_x = sv.data()[(ch * f_in + fi) * 2];
                            let im_x = sv.data()[(ch * f_in + fi) * 2 + 1];
                            if need_spec {
                                dspec[(ch * f_in + fi) * 2] += re_w * gre + im_w * gim;
                                dspec[(ch * f_in + fi) * 2 + 1] += -im_w * gre + re_w * gim;
                            }
                            if need_w {
                                dwr[widx] += gre * re_x + gim * im_x;
                                dwi[widx] += -gre * im_x + gim * re_x;
                            }
                        }
                    }
                }
                if need_spec {
                    self.accumulate(grads, *spec, Tensor::new(vec![c, f_in, 2], dspec)?)?;
                }
                if self.rg(*w_re) {
                    self.accumulate(grads, *w_re, Tensor::new(vec![c, f_out, f_in], dwr)?)?;
                }
                if self.rg(*w_im) {
                    self.accumulate(grads, *w_im, Tensor::new(vec![c, f_out, f_in], dwi)?)?;
                }
            }
            Op::Svd { x, part, factors } => {
                let dx = match part {
                    SvdPart::U => linalg::svd_vjp(factors, Some(g), None, None)?,
                    SvdPart::S => linalg::svd_vjp(factors, None, Some(g), None)?,
                    SvdPart::V => linalg::svd_vjp(factors, None, None, Some(g))?,
                };
                self.accumulate(grads, *x, dx)?;
            }
            Op::Activation { x, kind } => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, xv)| gv * kind.derivative(*xv))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?)?;
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                let av = self.value(*a);
                self.accumulate(
                    grads,
                    *a,
                    Tensor::new(av.shape().to_vec(), vec![s; av.len()])?,
                )?;
            }
            Op::Loss { pred, target, kind } => {
                let s = g.data()[0];
                let p = self.value(*pred);
                let t = self.value(*target);
                let n = p.len() as f64;
                let dp: Vec<f64> = match kind {
                    LossKind::Mse => p
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(a, b)| s * 2.0 * (a - b) / n)
                        .collect(),
                    LossKind::Mae => p
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(a, b)| {
                            let d = a - b;
                            s * if d > 0.0 {
                                1.0
                            } else if d < 0.0 {
                                -1.0
                            } else {
                                0.0
                            } / n
                        })
                        .collect(),
                };
                if self.rg(*pred) {
                    self.accumulate(
                        grads,
                        *pred,
                        Tensor::new(p.shape().to_vec(), dp.clone())?,
                    )?;
                }
                if self.rg(*target) {
                    let dt = dp.iter().map(|v| -v).collect();
                    self.accumulate(grads, *target, Tensor::new(t.shape().to_vec(), dt)?)?;
                }
            }
        }
        Ok(())
    }
}

/// Test hook: `TLNET_FAULT_INJECT=<op name>` flips the sign of that op's
/// backward output so fault-detection paths can be exercised end to end.
fn maybe_fault_flip(op_name: &str, g: &Tensor) -> Tensor {
    use std::sync::OnceLock;
    static TARGET: OnceLock<Option<String>> = OnceLock::new();
    let target = TARGET.get_or_init(|| std::env::var("TLNET_FAULT_INJECT").ok());
    match target {
        Some(t) if t == op_name => {
            Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| -v).collect()).unwrap()
        }
        _ => g.clone(),
    }
}

fn conv1d_forward(x: &Tensor, kernels: &Tensor, mode: ConvMode) -> Result<Tensor> {
    if x.rank() != 2 || kernels.rank() != 3 {
        return Err(Error::dim(
            "conv1d expects x (C_in, N) and kernels (C_out, C_in, K)",
        ));
    }
    let (c_in, n) = (x.shape()[0], x.shape()[1]);
    let (c_out, kc_in, k) = (kernels.shape()[0], kernels.shape()[1], kernels.shape()[2]);
    if kc_in != c_in {
        return Err(Error::dim(format!(
            "kernels expect {kc_in} input channels, signal has {c_in}"
        )));
    }
    if k % 2 == 0 {
        return Err(Error::invalid(format!("kernel size {k} must be odd")));
    }
    if k > n {
        return Err(Error::invalid(format!(
            "kernel size {k} exceeds signal length {n}"
        )));
    }
    let p = (k - 1) / 2;
    let mut out = vec![0.0; c_out * n];
    for o in 0..c_out {
        for i in 0..c_in {
            let xrow = x.row(i);
            for j in 0..k {
                let kv = kernels.at3(o, i, j);
                if kv == 0.0 {
                    continue;
                }
                // out[t] += kv * x[t + p - j], per mode
                match mode {
                    ConvMode::Circular => {
                        for t in 0..n {
                            let idx = (t + n + p - j) % n;
                            out[o * n + t] += kv * xrow[idx];
                        }
                    }
                    ConvMode::SameZero => {
                        let off = p as isize - j as isize;
                        let t_lo = (-off).max(0) as usize;
                        let t_hi = ((n as isize - off).min(n as isize)).max(0) as usize;
                        for t in t_lo..t_hi {
                            out[o * n + t] += kv * xrow[(t as isize + off) as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_out, n], out)
}

fn conv1d_backward(
    x: &Tensor,
    kernels: &Tensor,
    mode: ConvMode,
    g: &Tensor,
    need_dx: bool,
    need_dk: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let (c_in, n) = (x.shape()[0], x.shape()[1]);
    let (c_out, _, k) = (kernels.shape()[0], kernels.shape()[1], kernels.shape()[2]);
    let p = (k - 1) / 2;

    let dk = if need_dk {
        let mut dk = vec![0.0; c_out * c_in * k];
        for o in 0..c_out {
            let grow = g.row(o);
            for i in 0..c_in {
                let xrow = x.row(i);
                for j in 0..k {
                    let mut acc = 0.0;
                    match mode {
                        ConvMode::Circular => {
                            for t in 0..n {
                                acc += grow[t] * xrow[(t + n + p - j) % n];
                            }
                        }
                        ConvMode::SameZero => {
                            let off = p as isize - j as isize;
                            let t_lo = (-off).max(0) as usize;
                            let t_hi = ((n as isize - off).min(n as isize)).max(0) as usize;
                            for t in t_lo..t_hi {
                                acc += grow[t] * xrow[(t as isize + off) as usize];
                            }
                        }
                    }
                    dk[(o * c_in + i) * k + j] = acc;
                }
            }
        }
        Some(Tensor::new(vec![c_out, c_in, k], dk)?)
    } else {
        None
    };

    let dx = if need_dx {
        let mut dx = vec![0.0; c_in * n];
        for o in 0..c_out {
            let grow = g.row(o);
            for i in 0..c_in {
                for j in 0..k {
                    let kv = kernels.at3(o, i, j);
                    if kv == 0.0 {
                        continue;
                    }
                    // x[m] feeds out[t] at t = m - p + j
                    match mode {
                        ConvMode::Circular => {
                            for m in 0..n {
                                let t = (m + n + j - p) % n;
                                dx[i * n + m] += kv * grow[t];
                            }
                        }
                        ConvMode::SameZero => {
                            let off = j as isize - p as isize;
                            for m in 0..n {
                                let t = m as isize + off;
                                if t >= 0 && (t as usize) < n {
                                    dx[i * n + m] += kv * grow[t as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        Some(Tensor::new(vec![c_in, n], dx)?)
    } else {
        None
    };

    Ok((dx, dk))
}
