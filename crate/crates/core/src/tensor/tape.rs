//! Operation tape for reverse-mode differentiation.
//!
//! Each differentiable operation appends one node holding its output tensor
//! and enough saved context for the backward rule. The tape is a DAG in
//! append order, so a single reverse sweep visits every node exactly once in
//! reverse topological order. A tape is owned by one training thread; kernels
//! may parallelize internally over elements.

use crate::activations::{act_derivative, act_eval, ActivationKind};
use crate::error::{Error, Result};
use crate::tensor::{check_finite, kernels, Tensor};

/// Handle to a tensor stored on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

#[derive(Clone, Copy, Debug)]
pub struct Conv2dDims {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct PoolDims {
    pub batch: usize,
    pub ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// How batch-norm features map onto elements.
#[derive(Clone, Copy, Debug)]
pub enum BnLayout {
    /// [rows x cols], one feature per column.
    Rows { rows: usize, cols: usize },
    /// [b x c x h x w], one feature per channel.
    Channels { b: usize, c: usize, h: usize, w: usize },
}

impl BnLayout {
    pub fn features(&self) -> usize {
        match *self {
            BnLayout::Rows { cols, .. } => cols,
            BnLayout::Channels { c, .. } => c,
        }
    }

    pub fn numel(&self) -> usize {
        match *self {
            BnLayout::Rows { rows, cols } => rows * cols,
            BnLayout::Channels { b, c, h, w } => b * c * h * w,
        }
    }

    /// Elements per feature in the reduction set.
    pub fn group_size(&self) -> usize {
        self.numel() / self.features()
    }

    #[inline]
    fn feature_of(&self, e: usize) -> usize {
        match *self {
            BnLayout::Rows { cols, .. } => e % cols,
            BnLayout::Channels { c, h, w, .. } => (e / (h * w)) % c,
        }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: VarId,
        b: VarId,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
    },
    AddBias {
        x: VarId,
        bias: VarId,
        rows: usize,
        cols: usize,
    },
    Scale {
        x: VarId,
        c: f64,
    },
    Sum {
        x: VarId,
    },
    Mean {
        x: VarId,
    },
    Elementwise {
        x: VarId,
        dfn: Box<dyn Fn(f64) -> f64>,
    },
    Activation {
        x: VarId,
        kind: ActivationKind,
    },
    NormAct {
        x: VarId,
        alpha: VarId,
        kind: ActivationKind,
        scale: f64,
        mu: f64,
        dalpha_coef: f64,
    },
    Reshape {
        x: VarId,
    },
    Conv2d {
        x: VarId,
        w: VarId,
        bias: VarId,
        dims: Conv2dDims,
    },
    MaxPool {
        x: VarId,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: VarId,
        gamma: Option<VarId>,
        beta: Option<VarId>,
        layout: BnLayout,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        through_batch: bool,
    },
    CrossEntropy {
        logits: VarId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    live: bool,
}

/// Reverse-mode tape. See the module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Gradients accumulate into it only if
    /// `requires_grad` was set on the tensor.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        let live = value.requires_grad();
        self.push(value, Op::Leaf, live)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op, live: bool) -> VarId {
        self.nodes.push(Node { value, op, live });
        VarId(self.nodes.len() - 1)
    }

    fn data(&self, id: VarId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// C = A * B for rank-2 operands with matching inner dimension.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(self.data(a), self.data(b), m, k, n, &mut out);
        check_finite("matmul", &out)?;
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, m, k, n }, true))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        check_finite("add", &out)?;
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(t, Op::Add { a, b }, true))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        check_finite("mul", &out)?;
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(t, Op::Mul { a, b }, true))
    }

    /// Row-broadcast bias add: x[r x c] + bias[c].
    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let bdata = self.data(bias).to_vec();
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(e, v)| v + bdata[e % cols])
            .collect();
        check_finite("add_bias", &out)?;
        let t = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(t, Op::AddBias { x, bias, rows, cols }, true))
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> Result<VarId> {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        check_finite("scale", &out)?;
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(t, Op::Scale { x, c }, true))
    }

    pub fn sum(&mut self, x: VarId) -> Result<VarId> {
        let s: f64 = self.data(x).iter().sum();
        check_finite("sum", &[s])?;
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, true))
    }

    pub fn mean(&mut self, x: VarId) -> Result<VarId> {
        let n = self.data(x).len() as f64;
        let s: f64 = self.data(x).iter().sum::<f64>() / n;
        check_finite("mean", &[s])?;
        Ok(self.push(Tensor::scalar(s), Op::Mean { x }, true))
    }

    /// Applies `fnc` per element; backward multiplies upstream by `dfn(x)`.
    pub fn elementwise(
        &mut self,
        x: VarId,
        fnc: impl Fn(f64) -> f64,
        dfn: impl Fn(f64) -> f64 + 'static,
    ) -> Result<VarId> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| fnc(v)).collect();
        check_finite("elementwise", &out)?;
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::Elementwise {
                x,
                dfn: Box::new(dfn),
            },
            true,
        ))
    }

    /// Elementwise base activation from the catalog.
    pub fn activation(&mut self, x: VarId, kind: ActivationKind) -> Result<VarId> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| act_eval(kind, v)).collect();
        check_finite("activation", &out)?;
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(t, Op::Activation { x, kind }, true))
    }

    /// Normalized activation with the statistics treated as constants:
    /// `out = scale * (base(x) - mu)` where `scale = lambda + f(alpha)`.
    ///
    /// Backward sends `upstream * scale * base'(x)` into `x` and
    /// `sum(upstream * dalpha_coef * (base(x) - mu))` into `alpha`, with
    /// `dalpha_coef = beta_bound * (1 - tanh^2 alpha)`.
    pub fn normact(
        &mut self,
        x: VarId,
        alpha: VarId,
        kind: ActivationKind,
        scale: f64,
        mu: f64,
        dalpha_coef: f64,
    ) -> Result<VarId> {
        if !self.nodes[alpha.0].value.is_scalar() {
            return Err(Error::Contract("normact alpha must be a scalar".into()));
        }
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| scale * (act_eval(kind, v) - mu))
            .collect();
        check_finite("normact", &out)?;
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::NormAct {
                x,
                alpha,
                kind,
                scale,
                mu,
                dalpha_coef,
            },
            true,
        ))
    }

    pub fn reshape(&mut self, x: VarId, new_shape: Vec<usize>) -> Result<VarId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.data(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: new_shape,
            });
        }
        let t = Tensor::new(new_shape, self.data(x).to_vec())?;
        Ok(self.push(t, Op::Reshape { x }, true))
    }

    /// 2-D convolution with zero padding. x[b x ic x h x w], w[oc x ic x kh x kw].
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        bias: VarId,
        stride: usize,
        padding: usize,
    ) -> Result<VarId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        let dims = Conv2dDims {
            batch: sx[0],
            in_ch: sx[1],
            in_h: sx[2],
            in_w: sx[3],
            out_ch: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            padding,
            out_h: (sx[2] + 2 * padding).saturating_sub(sw[2]) / stride + 1,
            out_w: (sx[3] + 2 * padding).saturating_sub(sw[3]) / stride + 1,
        };
        if self.shape(bias) != [dims.out_ch] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: self.shape(bias).to_vec(),
                rhs: vec![dims.out_ch],
            });
        }
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = self.data(bias);
        let mut out = vec![0.0; dims.batch * dims.out_ch * dims.out_h * dims.out_w];
        conv2d_forward(xd, wd, bd, &dims, &mut out);
        check_finite("conv2d", &out)?;
        let t = Tensor::new(vec![dims.batch, dims.out_ch, dims.out_h, dims.out_w], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, bias, dims }, true))
    }

    /// Max pooling with square kernel `k` and the given stride, no padding.
    pub fn max_pool(&mut self, x: VarId, k: usize, stride: usize) -> Result<VarId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "max_pool",
                lhs: sx,
                rhs: vec![],
            });
        }
        if k == 0 || stride == 0 || sx[2] < k || sx[3] < k {
            return Err(Error::Contract(format!(
                "max_pool kernel {k} stride {stride} invalid for input {sx:?}"
            )));
        }
        let dims = PoolDims {
            batch: sx[0],
            ch: sx[1],
            in_h: sx[2],
            in_w: sx[3],
            k,
            stride,
            out_h: (sx[2] - k) / stride + 1,
            out_w: (sx[3] - k) / stride + 1,
        };
        let xd = self.data(x);
        let out_n = dims.batch * dims.ch * dims.out_h * dims.out_w;
        let mut out = vec![0.0; out_n];
        let mut argmax = vec![0usize; out_n];
        let mut o = 0;
        for b in 0..dims.batch {
            for c in 0..dims.ch {
                let plane = (b * dims.ch + c) * dims.in_h * dims.in_w;
                for oh in 0..dims.out_h {
                    for ow in 0..dims.out_w {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for i in 0..k {
                            for j in 0..k {
                                let idx =
                                    plane + (oh * stride + i) * dims.in_w + ow * stride + j;
                                if xd[idx] > best {
                                    best = xd[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[o] = best;
                        argmax[o] = best_idx;
                        o += 1;
                    }
                }
            }
        }
        let t = Tensor::new(vec![dims.batch, dims.ch, dims.out_h, dims.out_w], out)?;
        Ok(self.push(t, Op::MaxPool { x, argmax }, true))
    }

    /// Train-mode batch normalization; normalizes with the current batch
    /// statistics and differentiates through them. Returns the output along
    /// with the per-feature batch mean and biased variance.
    pub fn batch_norm_train(
        &mut self,
        x: VarId,
        gamma: Option<VarId>,
        beta: Option<VarId>,
        layout: BnLayout,
        eps: f64,
    ) -> Result<(VarId, Vec<f64>, Vec<f64>)> {
        if layout.numel() != self.data(x).len() {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: self.shape(x).to_vec(),
                rhs: vec![layout.numel()],
            });
        }
        if layout.group_size() < 2 {
            return Err(Error::DegenerateInput(
                "batch_norm needs at least 2 elements per feature in train mode".into(),
            ));
        }
        let f = layout.features();
        let n = layout.group_size() as f64;
        let xd = self.data(x);
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for (e, &v) in xd.iter().enumerate() {
            mean[layout.feature_of(e)] += v;
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        for (e, &v) in xd.iter().enumerate() {
            let d = v - mean[layout.feature_of(e)];
            var[layout.feature_of(e)] += d * d;
        }
        for v in var.iter_mut() {
            *v /= n;
        }
        self.batch_norm_with(x, gamma, beta, layout, eps, &mean, &var, true)
            .map(|id| (id, mean, var))
    }

    /// Batch normalization with externally supplied (frozen) statistics.
    /// The statistics are constants for backward purposes.
    pub fn batch_norm_frozen(
        &mut self,
        x: VarId,
        gamma: Option<VarId>,
        beta: Option<VarId>,
        layout: BnLayout,
        eps: f64,
        mean: &[f64],
        var: &[f64],
    ) -> Result<VarId> {
        if layout.numel() != self.data(x).len() {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: self.shape(x).to_vec(),
                rhs: vec![layout.numel()],
            });
        }
        self.batch_norm_with(x, gamma, beta, layout, eps, mean, var, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_with(
        &mut self,
        x: VarId,
        gamma: Option<VarId>,
        beta: Option<VarId>,
        layout: BnLayout,
        eps: f64,
        mean: &[f64],
        var: &[f64],
        through_batch: bool,
    ) -> Result<VarId> {
        let f = layout.features();
        if mean.len() != f || var.len() != f {
            return Err(Error::ShapeMismatch {
                op: "batch_norm stats",
                lhs: vec![mean.len(), var.len()],
                rhs: vec![f, f],
            });
        }
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if let Some(id) = id {
                if self.shape(id) != [f] {
                    return Err(Error::ShapeMismatch {
                        op: "batch_norm affine",
                        lhs: self.shape(id).to_vec(),
                        rhs: vec![f],
                    });
                }
                let _ = name;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let gd = gamma.map(|g| self.data(g).to_vec());
        let bd = beta.map(|b| self.data(b).to_vec());
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for (e, &v) in xd.iter().enumerate() {
            let ff = layout.feature_of(e);
            let mut y = (v - mean[ff]) * inv_std[ff];
            if let Some(g) = &gd {
                y *= g[ff];
            }
            if let Some(b) = &bd {
                y += b[ff];
            }
            out[e] = y;
        }
        check_finite("batch_norm", &out)?;
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                mean: mean.to_vec(),
                inv_std,
                through_batch,
            },
            true,
        ))
    }

    /// Mean negative log-softmax of the true class, stabilized by
    /// max-subtraction. logits[b x c], labels in [0, c).
    pub fn cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let ld = self.data(logits);
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &ld[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * c + j] = e;
                z += e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= z;
            }
            loss -= probs[i * c + labels[i]].ln();
        }
        loss /= b as f64;
        check_finite("cross_entropy", &[loss])?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            true,
        ))
    }

    /// Reverse sweep from a scalar loss. Every tensor reachable from the loss
    /// gets its gradient accumulated; calling twice without reset adds the
    /// second set of gradients on top of the first.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adjoint[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adjoint[i].take() else { continue };
            // Propagate into inputs, then bank this node's gradient.
            self.propagate(i, &g, &mut adjoint);
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64], adjoint: &mut [Option<Vec<f64>>]) {
        let add_into = |adjoint: &mut [Option<Vec<f64>>], id: VarId, delta: Vec<f64>| {
            match &mut adjoint[id.0] {
                Some(buf) => {
                    for (b, d) in buf.iter_mut().zip(&delta) {
                        *b += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let live = |nodes: &[Node], id: VarId| nodes[id.0].live;

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if live(&self.nodes, a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt(g, self.data(b), m, n, k, &mut da);
                    add_into(adjoint, a, da);
                }
                if live(&self.nodes, b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn(self.data(a), g, m, k, n, &mut db);
                    add_into(adjoint, b, db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                add_into(adjoint, a, g.to_vec());
                add_into(adjoint, b, g.to_vec());
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = g.iter().zip(self.data(b)).map(|(gi, bv)| gi * bv).collect();
                let db: Vec<f64> = g.iter().zip(self.data(a)).map(|(gi, av)| gi * av).collect();
                add_into(adjoint, a, da);
                add_into(adjoint, b, db);
            }
            Op::AddBias { x, bias, rows: _, cols } => {
                let (x, bias, cols) = (*x, *bias, *cols);
                add_into(adjoint, x, g.to_vec());
                let mut db = vec![0.0; cols];
                for (e, gi) in g.iter().enumerate() {
                    db[e % cols] += gi;
                }
                add_into(adjoint, bias, db);
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                add_into(adjoint, x, g.iter().map(|gi| gi * c).collect());
            }
            Op::Sum { x } => {
                let x = *x;
                let n = self.data(x).len();
                add_into(adjoint, x, vec![g[0]; n]);
            }
            Op::Mean { x } => {
                let x = *x;
                let n = self.data(x).len();
                add_into(adjoint, x, vec![g[0] / n as f64; n]);
            }
            Op::Elementwise { x, dfn } => {
                let x = *x;
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.data(x))
                    .map(|(gi, &xv)| gi * dfn(xv))
                    .collect();
                add_into(adjoint, x, dx);
            }
            Op::Activation { x, kind } => {
                let (x, kind) = (*x, *kind);
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.data(x))
                    .map(|(gi, &xv)| gi * act_derivative(kind, xv))
                    .collect();
                add_into(adjoint, x, dx);
            }
            Op::NormAct {
                x,
                alpha,
                kind,
                scale,
                mu,
                dalpha_coef,
            } => {
                let (x, alpha, kind, scale, mu, dalpha_coef) =
                    (*x, *alpha, *kind, *scale, *mu, *dalpha_coef);
                let xd = self.data(x);
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xd)
                    .map(|(gi, &xv)| gi * scale * act_derivative(kind, xv))
                    .collect();
                let mut dalpha = 0.0;
                for (gi, &xv) in g.iter().zip(xd) {
                    dalpha += gi * dalpha_coef * (act_eval(kind, xv) - mu);
                }
                add_into(adjoint, x, dx);
                add_into(adjoint, alpha, vec![dalpha]);
            }
            Op::Reshape { x } => {
                let x = *x;
                add_into(adjoint, x, g.to_vec());
            }
            Op::Conv2d { x, w, bias, dims } => {
                let (x, w, bias, dims) = (*x, *w, *bias, *dims);
                let xd = self.data(x);
                let wd = self.data(w);
                if live(&self.nodes, x) {
                    let mut dx = vec![0.0; xd.len()];
                    conv2d_backward_input(g, wd, &dims, &mut dx);
                    add_into(adjoint, x, dx);
                }
                let mut dw = vec![0.0; wd.len()];
                conv2d_backward_kernel(g, xd, &dims, &mut dw);
                add_into(adjoint, w, dw);
                let mut db = vec![0.0; dims.out_ch];
                let plane = dims.out_h * dims.out_w;
                for (e, gi) in g.iter().enumerate() {
                    db[(e / plane) % dims.out_ch] += gi;
                }
                add_into(adjoint, bias, db);
            }
            Op::MaxPool { x, argmax } => {
                let x = *x;
                let mut dx = vec![0.0; self.data(x).len()];
                for (gi, &idx) in g.iter().zip(argmax) {
                    dx[idx] += gi;
                }
                add_into(adjoint, x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                mean,
                inv_std,
                through_batch,
            } => {
                let (x, gamma, beta, layout, through_batch) =
                    (*x, *gamma, *beta, *layout, *through_batch);
                let f = layout.features();
                let n = layout.group_size() as f64;
                let xd = self.data(x);
                let gd = gamma.map(|gm| self.data(gm).to_vec());

                // dxhat and, if affine, the gamma/beta gradients.
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                let mut dxhat = vec![0.0; g.len()];
                for (e, gi) in g.iter().enumerate() {
                    let ff = layout.feature_of(e);
                    let xhat = (xd[e] - mean[ff]) * inv_std[ff];
                    dgamma[ff] += gi * xhat;
                    dbeta[ff] += gi;
                    dxhat[e] = match &gd {
                        Some(gv) => gi * gv[ff],
                        None => *gi,
                    };
                }
                let mut dx = vec![0.0; g.len()];
                if through_batch {
                    // Reduce per feature, then redistribute.
                    let mut sum_dxhat = vec![0.0; f];
                    let mut sum_dxhat_xhat = vec![0.0; f];
                    for (e, &dxh) in dxhat.iter().enumerate() {
                        let ff = layout.feature_of(e);
                        sum_dxhat[ff] += dxh;
                        sum_dxhat_xhat[ff] += dxh * (xd[e] - mean[ff]) * inv_std[ff];
                    }
                    for (e, &dxh) in dxhat.iter().enumerate() {
                        let ff = layout.feature_of(e);
                        let xhat = (xd[e] - mean[ff]) * inv_std[ff];
                        dx[e] = inv_std[ff] / n
                            * (n * dxh - sum_dxhat[ff] - xhat * sum_dxhat_xhat[ff]);
                    }
                } else {
                    for (e, &dxh) in dxhat.iter().enumerate() {
                        dx[e] = dxh * inv_std[layout.feature_of(e)];
                    }
                }
                add_into(adjoint, x, dx);
                if let Some(gm) = gamma {
                    add_into(adjoint, gm, dgamma);
                }
                if let Some(bt) = beta {
                    add_into(adjoint, bt, dbeta);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let logits = *logits;
                let b = labels.len();
                let c = probs.len() / b;
                let mut dl = vec![0.0; probs.len()];
                let inv_b = g[0] / b as f64;
                for i in 0..b {
                    for j in 0..c {
                        let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                        dl[i * c + j] = (probs[i * c + j] - onehot) * inv_b;
                    }
                }
                add_into(adjoint, logits, dl);
            }
        }
    }
}

fn conv2d_forward(x: &[f64], w: &[f64], bias: &[f64], d: &Conv2dDims, out: &mut [f64]) {
    let in_plane = d.in_h * d.in_w;
    let out_plane = d.out_h * d.out_w;
    let kplane = d.kh * d.kw;
    for b in 0..d.batch {
        for oc in 0..d.out_ch {
            let o_base = (b * d.out_ch + oc) * out_plane;
            for oh in 0..d.out_h {
                for ow in 0..d.out_w {
                    let mut s = bias[oc];
                    for ic in 0..d.in_ch {
                        let x_base = (b * d.in_ch + ic) * in_plane;
                        let w_base = (oc * d.in_ch + ic) * kplane;
                        for i in 0..d.kh {
                            let ih = (oh * d.stride + i) as isize - d.padding as isize;
                            if ih < 0 || ih >= d.in_h as isize {
                                continue;
                            }
                            for j in 0..d.kw {
                                let iw = (ow * d.stride + j) as isize - d.padding as isize;
                                if iw < 0 || iw >= d.in_w as isize {
                                    continue;
                                }
                                s += x[x_base + ih as usize * d.in_w + iw as usize]
                                    * w[w_base + i * d.kw + j];
                            }
                        }
                    }
                    out[o_base + oh * d.out_w + ow] = s;
                }
            }
        }
    }
}

fn conv2d_backward_input(g: &[f64], w: &[f64], d: &Conv2dDims, dx: &mut [f64]) {
    let in_plane = d.in_h * d.in_w;
    let out_plane = d.out_h * d.out_w;
    let kplane = d.kh * d.kw;
    for b in 0..d.batch {
        for oc in 0..d.out_ch {
            let o_base = (b * d.out_ch + oc) * out_plane;
            for oh in 0..d.out_h {
                for ow in 0..d.out_w {
                    let gi = g[o_base + oh * d.out_w + ow];
                    if gi == 0.0 {
                        continue;
                    }
                    for ic in 0..d.in_ch {
                        let x_base = (b * d.in_ch + ic) * in_plane;
                        let w_base = (oc * d.in_ch + ic) * kplane;
                        for i in 0..d.kh {
                            let ih = (oh * d.stride + i) as isize - d.padding as isize;
                            if ih < 0 || ih >= d.in_h as isize {
                                continue;
                            }
                            for j in 0..d.kw {
                                let iw = (ow * d.stride + j) as isize - d.padding as isize;
                                if iw < 0 || iw >= d.in_w as isize {
                                    continue;
                                }
                                dx[x_base + ih as usize * d.in_w + iw as usize] +=
                                    gi * w[w_base + i * d.kw + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_kernel(g: &[f64], x: &[f64], d: &Conv2dDims, dw: &mut [f64]) {
    let in_plane = d.in_h * d.in_w;
    let out_plane = d.out_h * d.out_w;
    let kplane = d.kh * d.kw;
    for b in 0..d.batch {
        for oc in 0..d.out_ch {
            let o_base = (b * d.out_ch + oc) * out_plane;
            for oh in 0..d.out_h {
                for ow in 0..d.out_w {
                    let gi = g[o_base + oh * d.out_w + ow];
                    if gi == 0.0 {
                        continue;
                    }
                    for ic in 0..d.in_ch {
                        let x_base = (b * d.in_ch + ic) * in_plane;
                        let w_base = (oc * d.in_ch + ic) * kplane;
                        for i in 0..d.kh {
                            let ih = (oh * d.stride + i) as isize - d.padding as isize;
                            if ih < 0 || ih >= d.in_h as isize {
                                continue;
                            }
                            for j in 0..d.kw {
                                let iw = (ow * d.stride + j) as isize - d.padding as isize;
                                if iw < 0 || iw >= d.in_w as isize {
                                    continue;
                                }
                                dw[w_base + i * d.kw + j] +=
                                    gi * x[x_base + ih as usize * d.in_w + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}
