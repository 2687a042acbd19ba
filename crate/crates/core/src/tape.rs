//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! the backward pass. Nodes are appended in execution order, so the tape is
//! always topologically sorted and `backward` is a single reverse sweep.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeom, Layout};
use crate::sampling::{BilinearState, DeformState, RoiAlignState};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operation kinds. Binary kinds require identical shapes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Scale(f32),
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Scale(Var, f32),
    Sum(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    Matmul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    AvgPool2(Var),
    Upsample2(Var),
    SpatialCe {
        logits: Var,
        probs: Vec<f32>,
        targets: Vec<Option<(usize, usize)>>,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<f32>,
        labels: Vec<usize>,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f32>,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<f32>,
        norm: f32,
    },
    Bilinear(Box<BilinearState>),
    Deform(Box<DeformState>),
    RoiAlign(Box<RoiAlignState>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of differentiable operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` was not reached.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let binary = |this: &Self, op: &str| -> Result<Var> {
            let b = b.ok_or_else(|| shape_err!("{op} needs a second operand"))?;
            this.same_shape(a, b, op)?;
            Ok(b)
        };
        match kind {
            Elementwise::Add => {
                let b = binary(self, "add")?;
                let v = self.zip_values(a, b, |x, y| x + y);
                self.push(v, Op::Add(a, b), &[a, b], "add")
            }
            Elementwise::Sub => {
                let b = binary(self, "sub")?;
                let v = self.zip_values(a, b, |x, y| x - y);
                self.push(v, Op::Sub(a, b), &[a, b], "sub")
            }
            Elementwise::Mul => {
                let b = binary(self, "mul")?;
                let v = self.zip_values(a, b, |x, y| x * y);
                self.push(v, Op::Mul(a, b), &[a, b], "mul")
            }
            Elementwise::Relu => {
                let v = self.map_value(a, |x| x.max(0.0));
                self.push(v, Op::Relu(a), &[a], "relu")
            }
            Elementwise::Scale(s) => {
                let v = self.map_value(a, |x| x * s);
                self.push(v, Op::Scale(a, s), &[a], "scale")
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, Some(b))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Relu, a, None)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        self.elementwise(Elementwise::Scale(s), a, None)
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("shape preserved")
    }

    fn map_value(&self, a: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape(), ta.data().iter().map(|&x| f(x)).collect()).expect("shape preserved")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f32 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a], "sum")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push(v, Op::Reshape(a), &[a], "reshape")
    }

    /// Joins `[m, p]` and `[m, q]` into `[m, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.value(a).dims2()?;
        let (m2, q) = self.value(b).dims2()?;
        if m != m2 {
            return Err(shape_err!("concat_cols: row counts {m} and {m2} differ"));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            out.extend_from_slice(&da[r * p..(r + 1) * p]);
            out.extend_from_slice(&db[r * q..(r + 1) * q]);
        }
        let v = Tensor::new(&[m, p + q], out)?;
        self.push(v, Op::ConcatCols(a, b), &[a, b], "concat_cols")
    }

    /// 2-D cross-correlation of `input [C,H,W]` with `weight [O,C,k,k]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        let ws = self.shape(weight).to_vec();
        let [o, wc, k, k2] = ws[..] else {
            return Err(shape_err!("conv2d: weight must be rank 4, got {ws:?}"));
        };
        if wc != c || k != k2 {
            return Err(shape_err!(
                "conv2d: input has {c} channels but weight is {ws:?}"
            ));
        }
        if self.shape(bias) != [o] {
            return Err(shape_err!("conv2d: bias {:?} != [{o}]", self.shape(bias)));
        }
        let geom = ConvGeom::new(c, h, w, k, stride, pad)
            .ok_or_else(|| shape_err!("conv2d: kernel {k} does not fit {h}x{w} with pad {pad}"))?;
        let n = geom.col_cols();
        let cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            let mut cols = vec![0.0; geom.col_rows() * n];
            kernels::im2col(self.value(input).data(), &geom, &mut cols);
            cols
        };
        let mut out = vec![0.0; o * n];
        {
            let src = if geom.is_pointwise() {
                self.value(input).data()
            } else {
                &cols
            };
            kernels::gemm(o, geom.col_rows(), n, self.value(weight).data(), Layout::Normal, src, Layout::Normal, 0.0, &mut out);
        }
        let bd = self.value(bias).data();
        for (oc, row) in out.chunks_mut(n).enumerate() {
            let b = bd[oc];
            row.iter_mut().for_each(|v| *v += b);
        }
        let value = Tensor::new(&[o, geom.ho, geom.wo], out)?;
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            &[input, weight, bias],
            "conv2d",
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err!("matmul: inner dimensions {k} and {k2} differ"));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), Layout::Normal, self.value(b).data(), Layout::Normal, 0.0, &mut out);
        let v = Tensor::new(&[m, n], out)?;
        self.push(v, Op::Matmul(a, b), &[a, b], "matmul")
    }

    /// Affine map `x [m,k] * w [k,n] + b [n]` with `b` added to every row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(x).dims2()?;
        let (k2, n) = self.value(w).dims2()?;
        if k != k2 || self.shape(b) != [n] {
            return Err(shape_err!(
                "linear: x {:?}, w {:?}, b {:?} are incompatible",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(x).data(), Layout::Normal, self.value(w).data(), Layout::Normal, 0.0, &mut out);
        let bd = self.value(b).data();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(bd).for_each(|(v, b)| *v += b);
        }
        let v = Tensor::new(&[m, n], out)?;
        self.push(v, Op::Linear { x, w, b }, &[x, w, b], "linear")
    }

    /// 2x2 average pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3()?;
        if h < 2 || w < 2 {
            return Err(shape_err!("avg_pool2: {h}x{w} too small"));
        }
        let mut out = vec![0.0; c * (h / 2) * (w / 2)];
        kernels::avg_pool2(self.value(a).data(), c, h, w, &mut out);
        let v = Tensor::new(&[c, h / 2, w / 2], out)?;
        self.push(v, Op::AvgPool2(a), &[a], "avg_pool2")
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3()?;
        let src = self.value(a).data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    out[(ch * ho + y) * wo + x] = src[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        let v = Tensor::new(&[c, ho, wo], out)?;
        self.push(v, Op::Upsample2(a), &[a], "upsample2")
    }

    /// Mean over visible joints of the cross-entropy between each joint's
    /// spatial softmax and a one-hot target. `None` marks an invisible joint.
    pub fn spatial_softmax_ce(&mut self, logits: Var, targets: &[Option<(usize, usize)>]) -> Result<Var> {
        let (j, h, w) = self.value(logits).dims3()?;
        if targets.len() != j {
            return Err(shape_err!("spatial_softmax_ce: {j} maps but {} targets", targets.len()));
        }
        let visible = targets.iter().filter(|t| t.is_some()).count();
        if visible == 0 {
            return Err(Error::DegenerateLoss("all joints invisible".into()));
        }
        let hw = h * w;
        let data = self.value(logits).data();
        let mut probs = vec![0.0; j * hw];
        let mut loss = 0.0f64;
        for (jj, target) in targets.iter().enumerate() {
            let row = &data[jj * hw..(jj + 1) * hw];
            let lse = softmax_into(row, &mut probs[jj * hw..(jj + 1) * hw]);
            if let Some((ty, tx)) = *target {
                if ty >= h || tx >= w {
                    return Err(shape_err!("target ({ty},{tx}) outside {h}x{w} map"));
                }
                loss += (lse - row[ty * w + tx] as f64) / visible as f64;
            }
        }
        let v = Tensor::scalar(loss as f32);
        self.push(
            v,
            Op::SpatialCe {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            &[logits],
            "spatial_softmax_ce",
        )
    }

    /// Mean cross-entropy of `logits [n, k]` against class labels.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(shape_err!("softmax_ce: {n} rows but {} labels", labels.len()));
        }
        if n == 0 {
            return Err(Error::DegenerateLoss("no rows".into()));
        }
        let data = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0f64;
        for (r, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(shape_err!("label {label} out of range for {k} classes"));
            }
            let row = &data[r * k..(r + 1) * k];
            let lse = softmax_into(row, &mut probs[r * k..(r + 1) * k]);
            loss += (lse - row[label] as f64) / n as f64;
        }
        let v = Tensor::scalar(loss as f32);
        self.push(
            v,
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
            "softmax_ce",
        )
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f32]) -> Result<Var> {
        let x = self.value(logits).data();
        if x.len() != targets.len() {
            return Err(shape_err!("bce: {} logits but {} targets", x.len(), targets.len()));
        }
        let n = x.len() as f64;
        let loss: f64 = x
            .iter()
            .zip(targets)
            .map(|(&x, &t)| {
                let x = x as f64;
                x.max(0.0) - x * t as f64 + (-x.abs()).exp().ln_1p()
            })
            .sum::<f64>()
            / n;
        let v = Tensor::scalar(loss as f32);
        self.push(
            v,
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
            "bce_with_logits",
        )
    }

    /// Sum of elementwise smooth-L1 (beta = 1) distances divided by `norm`.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor, norm: f32) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(shape_err!(
                "smooth_l1: {:?} vs {:?}",
                self.shape(pred),
                target.shape()
            ));
        }
        let loss: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let d = (p - t).abs() as f64;
                if d < 1.0 {
                    0.5 * d * d
                } else {
                    d - 0.5
                }
            })
            .sum::<f64>()
            / norm as f64;
        let v = Tensor::scalar(loss as f32);
        self.push(
            v,
            Op::SmoothL1 {
                pred,
                target: target.data().to_vec(),
                norm,
            },
            &[pred],
            "smooth_l1",
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, || g.clone());
                self.accum(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, || g.clone());
                self.accum(grads, *b, || map(g, |v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accum(grads, *a, || zip(g, vb, |g, y| g * y));
                self.accum(grads, *b, || zip(g, va, |g, x| g * x));
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                self.accum(grads, *a, || zip(g, va, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accum(grads, *a, || map(g, |v| v * s));
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accum(grads, *a, || Tensor::full(self.shape(*a), s));
            }
            Op::Reshape(a) => {
                self.accum(grads, *a, || g.clone().reshape(self.shape(*a)).expect("same count"));
            }
            Op::ConcatCols(a, b) => {
                let (m, p) = self.value(*a).dims2()?;
                let q = self.value(*b).dims2()?.1;
                self.accum(grads, *a, || {
                    let mut out = Vec::with_capacity(m * p);
                    for r in 0..m {
                        out.extend_from_slice(&gd[r * (p + q)..r * (p + q) + p]);
                    }
                    Tensor::new(&[m, p], out).expect("shape")
                });
                self.accum(grads, *b, || {
                    let mut out = Vec::with_capacity(m * q);
                    for r in 0..m {
                        out.extend_from_slice(&gd[r * (p + q) + p..(r + 1) * (p + q)]);
                    }
                    Tensor::new(&[m, q], out).expect("shape")
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let o = self.shape(*weight)[0];
                let n = geom.col_cols();
                let kk = geom.col_rows();
                self.accum(grads, *bias, || {
                    let sums = gd.chunks(n).map(|r| r.iter().sum()).collect();
                    Tensor::new(&[o], sums).expect("shape")
                });
                self.accum(grads, *weight, || {
                    let src = if geom.is_pointwise() {
                        self.value(*input).data()
                    } else {
                        cols
                    };
                    let mut dw = vec![0.0; o * kk];
                    kernels::gemm(o, n, kk, gd, Layout::Normal, src, Layout::Transposed, 0.0, &mut dw);
                    Tensor::new(self.shape(*weight), dw).expect("shape")
                });
                self.accum(grads, *input, || {
                    let mut dcols = vec![0.0; kk * n];
                    kernels::gemm(kk, o, n, self.value(*weight).data(), Layout::Transposed, gd, Layout::Normal, 0.0, &mut dcols);
                    if geom.is_pointwise() {
                        Tensor::new(self.shape(*input), dcols).expect("shape")
                    } else {
                        let mut din = vec![0.0; geom.c * geom.h * geom.w];
                        kernels::col2im(&dcols, geom, &mut din);
                        Tensor::new(self.shape(*input), din).expect("shape")
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.1;
                self.accum(grads, *a, || {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, gd, Layout::Normal, self.value(*b).data(), Layout::Transposed, 0.0, &mut da);
                    Tensor::new(&[m, k], da).expect("shape")
                });
                self.accum(grads, *b, || {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, self.value(*a).data(), Layout::Transposed, gd, Layout::Normal, 0.0, &mut db);
                    Tensor::new(&[k, n], db).expect("shape")
                });
            }
            Op::Linear { x, w, b } => {
                let (m, k) = self.value(*x).dims2()?;
                let n = self.value(*w).dims2()?.1;
                self.accum(grads, *x, || {
                    let mut dx = vec![0.0; m * k];
                    kernels::gemm(m, n, k, gd, Layout::Normal, self.value(*w).data(), Layout::Transposed, 0.0, &mut dx);
                    Tensor::new(&[m, k], dx).expect("shape")
                });
                self.accum(grads, *w, || {
                    let mut dw = vec![0.0; k * n];
                    kernels::gemm(k, m, n, self.value(*x).data(), Layout::Transposed, gd, Layout::Normal, 0.0, &mut dw);
                    Tensor::new(&[k, n], dw).expect("shape")
                });
                self.accum(grads, *b, || {
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    Tensor::new(&[n], db).expect("shape")
                });
            }
            Op::AvgPool2(a) => {
                let (c, h, w) = self.value(*a).dims3()?;
                self.accum(grads, *a, || {
                    let mut gin = vec![0.0; c * h * w];
                    kernels::avg_pool2_backward(gd, c, h, w, &mut gin);
                    Tensor::new(&[c, h, w], gin).expect("shape")
                });
            }
            Op::Upsample2(a) => {
                let (c, h, w) = self.value(*a).dims3()?;
                self.accum(grads, *a, || {
                    let (ho, wo) = (2 * h, 2 * w);
                    let mut gin = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..ho {
                            for x in 0..wo {
                                gin[(ch * h + y / 2) * w + x / 2] += gd[(ch * ho + y) * wo + x];
                            }
                        }
                    }
                    Tensor::new(&[c, h, w], gin).expect("shape")
                });
            }
            Op::SpatialCe {
                logits,
                probs,
                targets,
            } => {
                let (_, h, w) = self.value(*logits).dims3()?;
                let hw = h * w;
                let visible = targets.iter().filter(|t| t.is_some()).count() as f32;
                let s = gd[0] / visible;
                self.accum(grads, *logits, || {
                    let mut d = vec![0.0; probs.len()];
                    for (j, t) in targets.iter().enumerate() {
                        if let Some((ty, tx)) = *t {
                            for i in 0..hw {
                                d[j * hw + i] = s * probs[j * hw + i];
                            }
                            d[j * hw + ty * w + tx] -= s;
                        }
                    }
                    Tensor::new(self.shape(*logits), d).expect("shape")
                });
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
            } => {
                let (n, k) = self.value(*logits).dims2()?;
                let s = gd[0] / n as f32;
                self.accum(grads, *logits, || {
                    let mut d: Vec<f32> = probs.iter().map(|p| p * s).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        d[r * k + l] -= s;
                    }
                    Tensor::new(&[n, k], d).expect("shape")
                });
            }
            Op::BceLogits { logits, targets } => {
                let x = self.value(*logits);
                let s = gd[0] / targets.len() as f32;
                self.accum(grads, *logits, || {
                    let d = x
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&x, &t)| s * (sigmoid(x) - t))
                        .collect();
                    Tensor::new(x.shape(), d).expect("shape")
                });
            }
            Op::SmoothL1 { pred, target, norm } => {
                let p = self.value(*pred);
                let s = gd[0] / norm;
                self.accum(grads, *pred, || {
                    let d = p
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(&p, &t)| s * (p - t).clamp(-1.0, 1.0))
                        .collect();
                    Tensor::new(p.shape(), d).expect("shape")
                });
            }
            Op::Bilinear(state) => crate::sampling::bilinear_backward(self, state, g, grads),
            Op::Deform(state) => crate::sampling::deform_backward(self, state, g, grads),
            Op::RoiAlign(state) => crate::sampling::roi_align_backward(self, state, g, grads),
        }
        Ok(())
    }

    /// Adds a gradient contribution to `v` when `v` participates in
    /// differentiation. The closure is not evaluated otherwise.
    pub(crate) fn accum(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let contrib = f();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Writes the softmax of `row` into `out` and returns its log-sum-exp.
pub(crate) fn softmax_into(row: &[f32], out: &mut [f32]) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut total = 0.0f64;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = ((v as f64) - max).exp();
        *o = e as f32;
        total += e;
    }
    for o in out.iter_mut() {
        *o = (*o as f64 / total) as f32;
    }
    max + total.ln()
}

fn map(t: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("shape")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sub_of_equal_tensors_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let d = tape.sub(a, b).unwrap();
        assert_eq!(tape.value(d).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(a).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn binary_ops_reject_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
        assert!(matches!(tape.mul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn overflow_is_a_numeric_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2], 3e38));
        assert!(matches!(tape.scale(a, 10.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
        let bad = tape.constant(Tensor::zeros(&[3, 1]));
        assert!(tape.matmul(a, bad).is_err());
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = tape.constant(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 5.0, 6.0]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 3], |i| i as f32 - 4.0));
        let mut w = Tensor::zeros(&[2, 2, 1, 1]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let w = tape.constant(w);
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv_all_ones_kernel_counts_receptive_field() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 5, 5], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 5, 5]);
        assert_eq!(v.at3(0, 2, 2), 9.0);
        assert_eq!(v.at3(0, 0, 0), 4.0);
        assert_eq!(v.at3(0, 4, 4), 4.0);
        assert_eq!(v.at3(0, 0, 2), 6.0);
    }

    #[test]
    fn conv_output_size_with_stride() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 7, 6]));
        let w = tape.constant(Tensor::zeros(&[4, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[4, 4, 3]);
        let w2 = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
        assert!(matches!(tape.conv2d(x, w2, b, 1, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn uniform_spatial_logits_give_log_area() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let loss = tape.spatial_softmax_ce(l, &[Some((1, 1)), Some((3, 0))]).unwrap();
        assert!((tape.value(loss).item() - 16f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn saturated_spatial_logit_gives_zero_loss() {
        let mut tape = Tape::new();
        let mut z = Tensor::zeros(&[1, 4, 4]);
        z.data_mut()[5] = 1000.0;
        let l = tape.constant(z);
        let loss = tape.spatial_softmax_ce(l, &[Some((1, 1))]).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-6);
    }

    #[test]
    fn all_invisible_is_degenerate() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[2, 3, 3]));
        assert!(matches!(
            tape.spatial_softmax_ce(l, &[None, None]),
            Err(Error::DegenerateLoss(_))
        ));
    }

    #[test]
    fn invisible_joints_get_no_gradient() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::from_fn(&[2, 2, 2], |i| i as f32 * 0.1), true);
        let loss = tape.spatial_softmax_ce(l, &[None, Some((0, 1))]).unwrap();
        let g = tape.backward(loss).unwrap().get(l);
        assert!(g.data()[..4].iter().all(|&v| v == 0.0));
        assert!(g.data()[4..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]), true);
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_square_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn reused_tensor_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.scale(x, 3.0).unwrap();
        let z = tape.add(x, y).unwrap();
        let s = tape.sum(z).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).data(), &[4.0, 4.0]);
    }

    #[test]
    fn unreached_parameters_are_zero_filled() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let unused = tape.leaf(Tensor::full(&[3], 7.0), true);
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(!grads.reached(unused));
        assert_eq!(grads.get(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn concat_and_linear_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[1, 2], 1.0));
        let b = tape.constant(Tensor::full(&[1, 3], 2.0));
        let c = tape.concat_cols(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 1.0, 2.0, 2.0, 2.0]);
        let w = tape.constant(Tensor::full(&[5, 2], 1.0));
        let bias = tape.constant(t(&[2], &[0.5, -0.5]));
        let y = tape.linear(c, w, bias).unwrap();
        assert_eq!(tape.value(y).data(), &[8.5, 7.5]);
    }
}
