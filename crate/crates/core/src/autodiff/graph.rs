use super::kernels::{self, ConvOptions};
use super::tensor::{broadcast_offsets, broadcast_shape, reduce_to, Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sqrt(Var),
    Powi(Var, i32),
    Abs(Var),
    Sum(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Linear(Var, Var, Option<Var>),
    Conv2d(Var, Var, Option<Var>, ConvOptions),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool(Var, Vec<usize>),
    CrossEntropy(Var, Vec<usize>, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch-norm behaviour for one call.
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    /// Normalize with the batch's own statistics.
    Batch { eps: f64 },
    /// Normalize with frozen running statistics.
    Running {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
    /// Number of values reduced per channel.
    pub count: usize,
}

/// Define-by-run computation graph: every operation is evaluated when it
/// is recorded, and [`Graph::backward`] replays the record in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

/// Gradients indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, node: usize, detail: String) -> Error {
    Error::Shape { op, node, detail }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.precision.round_slice(value.data_mut());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf whose gradient is tracked (parameters, differentiated inputs).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf without gradient (data, labels, codewords).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| {
            shape_err(name, self.nodes.len(), format!("cannot broadcast {sa:?} with {sb:?}"))
        })?;
        let (ia, ib) = broadcast_offsets(&sa, &sb, &out_shape);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let data: Vec<f64> = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
        let value = Tensor::new(out_shape, data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b, "div")
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.needs(&[x]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 || v.is_nan() { v } else { 0.0 })
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn powi(&mut self, x: Var, n: i32) -> Var {
        self.unary(x, Op::Powi(x, n), |v| v.powi(n))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.powi(x, 2)
    }

    /// Absolute value; the derivative at zero is taken as zero.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    /// Sum over `axes`, keeping reduced axes with size 1.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(shape_err(
                "sum",
                self.nodes.len(),
                format!("axis {bad} out of range for {shape:?}"),
            ));
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let value = reduce_to(self.value(x), &out_shape);
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Sum(x), rg))
    }

    /// Mean over `axes`, keeping reduced axes with size 1.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let count: usize = axes.iter().filter_map(|&a| shape.get(a)).product();
        let s = self.sum_axes(x, axes)?;
        Ok(self.scale(s, 1.0 / count.max(1) as f64))
    }

    /// Mean over every axis.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean_axes(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let node = self.nodes.len();
        let value = self
            .value(x)
            .clone()
            .reshape(shape)
            .map_err(|e| shape_err("reshape", node, e.to_string()))?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let node = self.nodes.len();
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", node, "no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", node, format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().enumerate().all(|(i, &d)| i == axis || d == base[i]);
            if !compatible {
                return Err(shape_err(
                    "concat",
                    node,
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let w = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        let rg = self.needs(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// `x . w^T + b` for `x: [batch, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let node = self.nodes.len();
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(shape_err(
                "linear",
                node,
                format!("input {sx:?} incompatible with weight {sw:?}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(shape_err(
                    "linear",
                    node,
                    format!("bias {:?} for {} outputs", self.shape(b), sw[0]),
                ));
            }
        }
        let value = kernels::linear_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.needs(&deps);
        Ok(self.push(value, Op::Linear(x, w, b), rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: ConvOptions) -> Result<Var> {
        let node = self.nodes.len();
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let ok = sx.len() == 4
            && sw.len() == 4
            && opts.groups > 0
            && opts.stride > 0
            && sx[1] % opts.groups == 0
            && sw[0] % opts.groups == 0
            && sw[1] * opts.groups == sx[1]
            && sx[2] + 2 * opts.padding >= sw[2]
            && sx[3] + 2 * opts.padding >= sw[3];
        if !ok {
            return Err(shape_err(
                "conv2d",
                node,
                format!("input {sx:?}, weight {sw:?}, {opts:?}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(shape_err("conv2d", node, "bias length".into()));
            }
        }
        let value = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &opts);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.needs(&deps);
        Ok(self.push(value, Op::Conv2d(x, w, b, opts), rg))
    }

    /// Batch normalization over axis 1. In batch mode the observed moments
    /// are returned for running-statistic updates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let node = self.nodes.len();
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || self.shape(gamma) != [sx[1]] || self.shape(beta) != [sx[1]] {
            return Err(shape_err(
                "batch_norm",
                node,
                format!(
                    "input {sx:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (mean, var, eps, batch_stats) = match mode {
            NormMode::Batch { eps } => {
                let (m, v) = kernels::channel_moments(self.value(x));
                (m, v, eps, true)
            }
            NormMode::Running { mean, var, eps } => {
                if mean.len() != sx[1] || var.len() != sx[1] {
                    return Err(shape_err("batch_norm", node, "running stats length".into()));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (y, xhat) = kernels::normalize_channels(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            &mean,
            &inv_std,
        );
        let count = sx[0] * sx[2..].iter().product::<usize>();
        let rg = self.needs(&[x, gamma, beta]);
        let out = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        let moments = batch_stats.then_some(BatchMoments { mean, var, count });
        Ok((out, moments))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let node = self.nodes.len();
        let sx = self.shape(x);
        if sx.len() != 4 || kernel == 0 || stride == 0 || sx[2] + 2 * padding < kernel {
            return Err(shape_err("max_pool2d", node, format!("input {sx:?}")));
        }
        let (value, arg) = kernels::max_pool2d_forward(self.value(x), kernel, stride, padding);
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::MaxPool(x, arg), rg))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let node = self.nodes.len();
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&y| y >= s[1]) {
            return Err(shape_err(
                "cross_entropy",
                node,
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let losses = kernels::cross_entropy_rows(self.value(logits), labels);
        let mean = losses.iter().sum::<f64>() / labels.len().max(1) as f64;
        let probs = kernels::softmax_rows(self.value(logits));
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(mean),
            Op::CrossEntropy(logits, labels.to_vec(), probs),
            rg,
        ))
    }

    /// Reverse accumulation from `output`. A seed is required unless the
    /// output holds exactly one value.
    pub fn backward(&self, output: Var, seed: Option<Tensor>) -> Result<Gradients> {
        let out_shape = self.shape(output).to_vec();
        let seed = match seed {
            Some(s) if s.shape() == out_shape.as_slice() => s,
            Some(s) => {
                return Err(shape_err(
                    "backward",
                    output.0,
                    format!("seed {:?} for output {out_shape:?}", s.shape()),
                ))
            }
            None if self.value(output).len() == 1 => Tensor::ones(&out_shape),
            None => return Err(Error::NonScalarLoss(out_shape)),
        };
        let mut grads: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let contributions = self.node_backward(node, &g);
            for (parent, pg) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += v;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Binary(kind, a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (ia, ib) = broadcast_offsets(sa, sb, g.shape());
                let (da, db) = (val(*a).data(), val(*b).data());
                let mut ga = Tensor::zeros(sa);
                let mut gb = Tensor::zeros(sb);
                for ((&gv, &i), &j) in g.data().iter().zip(&ia).zip(&ib) {
                    let (x, y) = (da[i], db[j]);
                    let (dxa, dxb) = match kind {
                        Binary::Add => (gv, gv),
                        Binary::Sub => (gv, -gv),
                        Binary::Mul => (gv * y, gv * x),
                        Binary::Div => (gv / y, -gv * x / (y * y)),
                    };
                    ga.data_mut()[i] += dxa;
                    gb.data_mut()[j] += dxb;
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * c))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::Relu(x) => {
                let mut gx = g.clone();
                for (d, &xv) in gx.data_mut().iter_mut().zip(val(*x).data()) {
                    if xv <= 0.0 {
                        *d = 0.0;
                    }
                }
                vec![(*x, gx)]
            }
            Op::Sqrt(x) => {
                let mut gx = g.clone();
                for (d, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                    *d /= 2.0 * y;
                }
                vec![(*x, gx)]
            }
            Op::Powi(x, n) => {
                let mut gx = g.clone();
                for (d, &xv) in gx.data_mut().iter_mut().zip(val(*x).data()) {
                    *d *= f64::from(*n) * xv.powi(n - 1);
                }
                vec![(*x, gx)]
            }
            Op::Abs(x) => {
                let mut gx = g.clone();
                for (d, &xv) in gx.data_mut().iter_mut().zip(val(*x).data()) {
                    *d *= if xv > 0.0 {
                        1.0
                    } else if xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                vec![(*x, gx)]
            }
            Op::Sum(x) => {
                let sx = val(*x).shape();
                let (_, offs) = broadcast_offsets(sx, g.shape(), sx);
                let data = offs.iter().map(|&o| g.data()[o]).collect();
                vec![(*x, Tensor::new(sx.to_vec(), data).expect("sum grad"))]
            }
            Op::Reshape(x) => vec![(
                *x,
                g.clone().reshape(val(*x).shape()).expect("reshape grad"),
            )],
            Op::Concat(parts, axis) => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut out: Vec<(Var, Vec<f64>)> = parts
                    .iter()
                    .map(|&p| (p, Vec::with_capacity(val(p).len())))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (p, buf) in out.iter_mut() {
                        let w = val(*p).shape()[*axis] * inner;
                        buf.extend_from_slice(&g.data()[offset..offset + w]);
                        offset += w;
                    }
                }
                out.into_iter()
                    .map(|(p, buf)| (p, Tensor::new(val(p).shape().to_vec(), buf).expect("concat grad")))
                    .collect()
            }
            Op::Linear(x, w, b) => {
                let (dx, dw, db) = kernels::linear_backward(g, val(*x), val(*w));
                let mut v = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    v.push((*b, db));
                }
                v
            }
            Op::Conv2d(x, w, b, opts) => {
                let (dx, dw, db) = kernels::conv2d_backward(g, val(*x), val(*w), opts);
                let mut v = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    v.push((*b, db));
                }
                v
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (dx, dg, db) = if *batch_stats {
                    kernels::batch_norm_train_backward(g, xhat, val(*gamma), inv_std)
                } else {
                    kernels::batch_norm_eval_backward(g, xhat, val(*gamma), inv_std)
                };
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::MaxPool(x, arg) => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (gv, &i) in g.data().iter().zip(arg) {
                    gx.data_mut()[i] += gv;
                }
                vec![(*x, gx)]
            }
            Op::CrossEntropy(logits, labels, probs) => {
                let k = probs.shape()[1];
                let scale = g.data()[0] / labels.len().max(1) as f64;
                let mut gl = probs.clone();
                for (row, &y) in gl.data_mut().chunks_mut(k).zip(labels) {
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                vec![(*logits, gl)]
            }
        }
    }
}
