use super::flops::FlopCounter;
use super::ops::{self, ConvGeom};
use super::{check_same, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    /// `x·σ(x)`.
    Silu,
    Exp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Depthwise { x: Var, w: Var, geom: ConvGeom },
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Reshape { x: Var },
    Softmax { x: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Unary { x: Var, kind: Unary },
    Binary { a: Var, b: Var, kind: Binary },
    Scale { x: Var, factor: T },
    AddScalar { x: Var },
    Sum { x: Var },
    SumKeep0 { x: Var },
    Upsample2x { x: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only operator tape. Parents always precede children, so one
/// reverse sweep visits every node once.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    counter: FlopCounter,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Graph that records gradients for leaves created with `requires_grad`.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: true, counter: FlopCounter::new(false) }
    }

    /// Graph where no node requires a gradient.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: false, counter: FlopCounter::new(false) }
    }

    pub fn with_counter(mut self, counter: FlopCounter) -> Self {
        self.counter = counter;
        self
    }

    pub fn counter(&self) -> &FlopCounter {
        &self.counter
    }

    pub fn counter_mut(&mut self) -> &mut FlopCounter {
        &mut self.counter
    }

    pub fn into_counter(self) -> FlopCounter {
        self.counter
    }

    pub fn set_scope(&mut self, scope: &str) -> String {
        self.counter.set_scope(scope)
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn geom(
        &self,
        op: &'static str,
        x: Var,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<ConvGeom> {
        let (c_in, h, w) = self.value(x).dims3(op)?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!("{op}: kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Config(format!("{op}: stride must be positive")));
        }
        let out = |n: usize, k: usize, axis: &str| -> Result<usize> {
            let span = (n + 2 * pad)
                .checked_sub(k)
                .ok_or_else(|| Error::Config(format!("{op}: kernel {k} exceeds padded {axis} {n}")))?;
            // A remainder larger than the padding would drop real input pixels.
            if span % stride > pad {
                return Err(Error::Config(format!(
                    "{op}: output {axis} ({n}+2*{pad}-{k})/{stride}+1 is not integral"
                )));
            }
            Ok(span / stride + 1)
        };
        let h_out = out(h, kh, "height")?;
        let w_out = out(w, kw, "width")?;
        Ok(ConvGeom { c_in, h, w, kh, kw, stride, pad, h_out, w_out })
    }

    /// Cross-correlation with zero padding: `x [C_in,H,W]`, `w [C_out,C_in,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let [c_out, c_in_w, kh, kw] = ws[..] else {
            return Err(Error::shape("conv2d", format!("weight must be 4-D, got {ws:?}")));
        };
        let geom = self.geom("conv2d", x, kh, kw, stride, pad)?;
        if c_in_w != geom.c_in {
            return Err(Error::shape(
                "conv2d",
                format!("axis 0 of input ({}) vs axis 1 of weight ({c_in_w})", geom.c_in),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} vs {c_out} output channels", self.shape(b)),
                ));
            }
        }
        let out = ops::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            c_out,
            &geom,
        );
        self.counter.add_macs((geom.positions() * c_out * geom.patch()) as u64);
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        let t = Tensor::from_parts(vec![c_out, geom.h_out, geom.w_out], out);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Per-channel convolution: `w` is `[C,1,k,k]`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let [c, one, kh, kw] = ws[..] else {
            return Err(Error::shape("depthwise_conv", format!("weight must be 4-D, got {ws:?}")));
        };
        let geom = self.geom("depthwise_conv", x, kh, kw, stride, pad)?;
        if one != 1 || c != geom.c_in {
            return Err(Error::shape(
                "depthwise_conv",
                format!("weight {ws:?} vs {} input channels (axis 0)", geom.c_in),
            ));
        }
        let out = ops::depthwise_forward(self.value(x).data(), self.value(w).data(), &geom);
        self.counter.add_macs((geom.positions() * c * kh * kw) as u64);
        let rg = self.rg(&[x, w]);
        let t = Tensor::from_parts(vec![c, geom.h_out, geom.w_out], out);
        Ok(self.push(t, Op::Depthwise { x, w, geom }, rg))
    }

    /// Depthwise `k × k` stage followed by a pointwise `1 × 1` stage with bias.
    pub fn depthwise_separable_conv(
        &mut self,
        x: Var,
        dw: Var,
        pw: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let d = self.depthwise_conv(x, dw, stride, pad)?;
        self.conv2d(d, pw, Some(b), 1, 0)
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(T) -> T = match kind {
            Unary::Sigmoid => |v| T::one() / (T::one() + (-v).exp()),
            Unary::Tanh => |v| v.tanh(),
            Unary::Relu => |v| if v > T::zero() { v } else { T::zero() },
            Unary::Silu => |v| v / (T::one() + (-v).exp()),
            Unary::Exp => |v| v.exp(),
        };
        let t = self.value(x).map(f);
        self.counter.add_elementwise(t.len() as u64);
        let rg = self.rg(&[x]);
        self.push(t, Op::Unary { x, kind }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary, name: &'static str) -> Result<Var> {
        check_same(name, self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let data: Vec<T> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&p, &q)| match kind {
                Binary::Add => p + q,
                Binary::Sub => p - q,
                Binary::Mul => p * q,
                Binary::Div => p / q,
            })
            .collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        self.counter.add_elementwise(t.len() as u64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Binary { a, b, kind }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div, "div")
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let t = self.value(x).map(|v| v * factor);
        self.counter.add_elementwise(t.len() as u64);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale { x, factor }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v + c);
        self.counter.add_elementwise(t.len() as u64);
        let rg = self.rg(&[x]);
        self.push(t, Op::AddScalar { x }, rg)
    }

    /// Softmax along `axis`, shifted by the slice maximum before exponentiation.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let y = ops::softmax_forward(self.value(x).data(), &shape, axis);
        self.counter.add_elementwise(3 * y.len() as u64);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, y), Op::Softmax { x, axis }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no parts given"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let agrees = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} off axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = ops::split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * n..(o + 1) * n]);
            }
        }
        let rg = self.rg(parts);
        let t = Tensor::from_parts(shape, data);
        Ok(self.push(t, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src = self.shape(x).to_vec();
        if axis >= src.len() || len == 0 || start + len > src[axis] {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {src:?}", start + len),
            ));
        }
        let (outer, n, inner) = ops::split_axis(&src, axis);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = src;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Narrow { x, axis, start }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner axes {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.counter.add_macs((m * k * n) as u64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("transpose")?;
        let out = ops::transpose(self.value(x).data(), r, c);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.counter.add_elementwise(self.value(x).len() as u64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Sums every slice along axis 0: `[K, ...] -> [K]`.
    pub fn sum_keep0(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let k = v.shape()[0];
        let per = v.len() / k;
        let data: Vec<T> = v.data().chunks(per).map(|c| c.iter().copied().sum()).collect();
        self.counter.add_elementwise(v.len() as u64);
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![k], data), Op::SumKeep0 { x }, rg)
    }

    /// Nearest-neighbour ×2 upsampling of a `[C,H,W]` map.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3("upsample2x")?;
        let out = ops::upsample2x(self.value(x).data(), c, h, w);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![c, 2 * h, 2 * w], out), Op::Upsample2x { x }, rg))
    }

    /// Reverse sweep from a scalar root. Consumes the tape.
    pub fn backward(self, root: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty graph".into()));
        }
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::Contract(format!("backward root must be scalar, got {:?}", rv.shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (&n.op, g) {
                (Op::Leaf, Some(g)) if n.requires_grad => {
                    Some(Tensor::from_parts(n.value.shape().to_vec(), g))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, d: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.iter_mut().zip(d).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let c_out = node.value.shape()[0];
                let (dx, dw, db) = ops::conv2d_backward(
                    val(*x),
                    val(*w),
                    g,
                    c_out,
                    geom,
                    need(*x),
                    need(*w),
                    b.is_some_and(need),
                );
                if let Some(d) = dx {
                    acc(*x, d);
                }
                if let Some(d) = dw {
                    acc(*w, d);
                }
                if let (Some(b), Some(d)) = (b, db) {
                    acc(*b, d);
                }
            }
            Op::Depthwise { x, w, geom } => {
                let (dx, dw) = ops::depthwise_backward(val(*x), val(*w), g, geom);
                acc(*x, dx);
                acc(*w, dw);
            }
            Op::MatMul { a, b } => {
                let (m, k) = self.nodes[a.0].value.dims2("matmul")?;
                let n = node.value.shape()[1];
                if need(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, false, val(*b), true, &mut da, false);
                    acc(*a, da);
                }
                if need(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, val(*a), true, g, false, &mut db, false);
                    acc(*b, db);
                }
            }
            Op::Transpose { x } => {
                let (r, c) = self.nodes[x.0].value.dims2("transpose")?;
                acc(*x, ops::transpose(g, c, r));
            }
            Op::Reshape { x } => acc(*x, g.to_vec()),
            Op::Softmax { x, axis } => {
                acc(*x, ops::softmax_backward(node.value.data(), g, node.value.shape(), *axis));
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = ops::split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.shape()[*axis] * inner;
                    if need(p) {
                        let mut d = Vec::with_capacity(outer * n);
                        for o in 0..outer {
                            let base = o * total + offset;
                            d.extend_from_slice(&g[base..base + n]);
                        }
                        acc(p, d);
                    }
                    offset += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                let src = self.nodes[x.0].value.shape();
                let (outer, n, inner) = ops::split_axis(src, *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![T::zero(); self.nodes[x.0].value.len()];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, d);
            }
            Op::Unary { x, kind } => {
                let y = node.value.data();
                let xv = val(*x);
                let d = g
                    .iter()
                    .zip(y)
                    .zip(xv)
                    .map(|((&g, &y), &x)| match kind {
                        Unary::Sigmoid => g * y * (T::one() - y),
                        Unary::Tanh => g * (T::one() - y * y),
                        Unary::Relu => {
                            if x > T::zero() {
                                g
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Silu => {
                            let s = T::one() / (T::one() + (-x).exp());
                            g * s * (T::one() + x * (T::one() - s))
                        }
                        Unary::Exp => g * y,
                    })
                    .collect();
                acc(*x, d);
            }
            Op::Binary { a, b, kind } => {
                let (av, bv) = (val(*a), val(*b));
                let (da, db): (Vec<T>, Vec<T>) = match kind {
                    Binary::Add => (g.to_vec(), g.to_vec()),
                    Binary::Sub => (g.to_vec(), g.iter().map(|&v| -v).collect()),
                    Binary::Mul => (
                        g.iter().zip(bv).map(|(&g, &b)| g * b).collect(),
                        g.iter().zip(av).map(|(&g, &a)| g * a).collect(),
                    ),
                    Binary::Div => (
                        g.iter().zip(bv).map(|(&g, &b)| g / b).collect(),
                        g.iter().zip(av).zip(bv).map(|((&g, &a), &b)| -g * a / (b * b)).collect(),
                    ),
                };
                acc(*a, da);
                acc(*b, db);
            }
            Op::Scale { x, factor } => acc(*x, g.iter().map(|&v| v * *factor).collect()),
            Op::AddScalar { x } => acc(*x, g.to_vec()),
            Op::Sum { x } => acc(*x, vec![g[0]; self.nodes[x.0].value.len()]),
            Op::SumKeep0 { x } => {
                let n = self.nodes[x.0].value.len();
                let per = n / g.len();
                acc(*x, (0..n).map(|i| g[i / per]).collect());
            }
            Op::Upsample2x { x } => {
                let (c, h, w) = self.nodes[x.0].value.dims3("upsample2x")?;
                acc(*x, ops::upsample2x_backward(g, c, h, w));
            }
        }
        Ok(())
    }
}

/// Gradients of every reachable `requires_grad` leaf after a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
