//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation appends a node holding its output value and enough
//! information to push gradients back to its inputs. Nodes are created in
//! topological order, so the backward sweep is a reverse scan of the tape.
//!
//! ```
//! use eloss_core::tape::Tape;
//! use eloss_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.gradients(loss, &[]).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

use crate::entropy::{entropy_kl_with_gradient, EntropyConfig};
use crate::error::{Error, Result};
use crate::samples::SampleMatrix;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Tensor plus a broadcast scalar node.
    AddScalar(Var, Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Reshape(Var),
    Stack(Vec<Var>),
    Slice { x: Var, start: usize },
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Mse(Var, Var),
    /// Per-sample entropy; `dh_dx` holds ∂H_b/∂x for every batch element.
    Entropy { x: Var, dh_dx: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Gradients of one scalar root with respect to every node that needs them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(acc) => acc.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn add_scaled_into(dst: &mut Option<Vec<f64>>, src: &[f64], scale: f64) {
    match dst {
        Some(acc) => acc.iter_mut().zip(src).for_each(|(a, b)| *a += scale * b),
        None => *dst = Some(src.iter().map(|b| scale * b).collect()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.values, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.values, Op::Leaf, false)
    }

    /// A leaf honoring the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.values.clone(), Op::Leaf, t.requires_grad)
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor { shape: n.shape.clone(), values: n.value.clone(), requires_grad: false, grad: None }
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::Contract(format!("expected a scalar, got shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    /// Gradient accumulated by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::Add(a, b), self.rg(&[a, b])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::Sub(a, b), self.rg(&[a, b])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::Mul(a, b), self.rg(&[a, b])))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).iter().map(|x| c * x).collect();
        self.push(self.nodes[a.0].shape.clone(), v, Op::Scale(a, c), self.rg(&[a]))
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_value(s)?;
        let v = self.value(a).iter().map(|x| x + sv).collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::AddScalar(a, s), self.rg(&[a, s])))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![], vec![s], Op::Sum(a), self.rg(&[a]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.value(a).iter().sum::<f64>() / n;
        self.push(vec![], vec![s], Op::Mean(a), self.rg(&[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.push(self.nodes[a.0].shape.clone(), v, Op::Relu(a), self.rg(&[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(a).len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.nodes[a.0].shape
            )));
        }
        let v = self.value(a).to_vec();
        Ok(self.push(shape, v, Op::Reshape(a), self.rg(&[a])))
    }

    /// Keeps the leading axis and flattens the rest.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let lead = *shape.first().ok_or_else(|| Error::Shape("flatten on a scalar".into()))?;
        let rest = numel(&shape[1..]);
        self.reshape(a, vec![lead, rest])
    }

    /// Stacks scalar nodes into a vector.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let mut v = Vec::with_capacity(xs.len());
        for &x in xs {
            v.push(self.scalar_value(x)?);
        }
        Ok(self.push(vec![xs.len()], v, Op::Stack(xs.to_vec()), self.rg(xs)))
    }

    /// Contiguous range `start..start+len` of the flattened values.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let total = self.value(x).len();
        if start + len > total {
            return Err(Error::Shape(format!("slice {start}..{} of {total}", start + len)));
        }
        let v = self.value(x)[start..start + len].to_vec();
        Ok(self.push(vec![len], v, Op::Slice { x, start }, self.rg(&[x])))
    }

    /// `x [B, in] · wᵀ [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs != [ws[0]] || xs[1] != ws[1] {
            return Err(Error::Shape(format!("linear: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (batch, inp, out) = (xs[0], ws[1], ws[0]);
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut y = vec![0.0; batch * out];
        for i in 0..batch {
            let xi = &xv[i * inp..(i + 1) * inp];
            for o in 0..out {
                let wo = &wv[o * inp..(o + 1) * inp];
                y[i * out + o] = bv[o] + xi.iter().zip(wo).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        Ok(self.push(vec![batch, out], y, Op::Linear { x, w, b }, self.rg(&[x, w, b])))
    }

    /// Stride-1, zero-padded ("same") 2-D convolution with odd square kernels.
    /// `x [B, C, H, W]`, `w [O, C, K, K]`, `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0
            || bs != [ws[0]]
        {
            return Err(Error::Shape(format!("conv2d: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let g = ConvGeom::new(xs, ws);
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let hw = g.h * g.w;
        let rows = g.in_ch * g.k * g.k;
        let mut y = vec![0.0; g.batch * g.out_ch * hw];
        let mut col = vec![0.0; rows * hw];
        for n in 0..g.batch {
            g.im2col(&xv[g.in_plane(n, 0).start..g.in_plane(n, g.in_ch - 1).end], &mut col);
            for o in 0..g.out_ch {
                let plane = &mut y[g.out_plane(n, o)];
                plane.iter_mut().for_each(|v| *v = bv[o]);
                for (r, src) in col.chunks_exact(hw).enumerate() {
                    let wt = wv[o * rows + r];
                    plane.iter_mut().zip(src).for_each(|(a, b)| *a += wt * b);
                }
            }
        }
        let shape = vec![g.batch, g.out_ch, g.h, g.w];
        Ok(self.push(shape, y, Op::Conv2d { x, w, b }, self.rg(&[x, w, b])))
    }

    /// Mean softmax cross-entropy of `logits [B, K]` against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross-entropy: logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Shape(format!("label {bad} out of range for {classes} classes")));
        }
        let z = self.value(logits);
        let probs = softmax_rows(z, classes);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let row = &z[i * classes..(i + 1) * classes];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[l]
            })
            .sum::<f64>()
            / batch as f64;
        let op = Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs };
        Ok(self.push(vec![], vec![loss], op, self.rg(&[logits])))
    }

    /// Mean squared error between two same-shaped nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).len() as f64;
        let l = self.value(a).iter().zip(self.value(b)).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
            / n;
        Ok(self.push(vec![], vec![l], Op::Mse(a, b), self.rg(&[a, b])))
    }

    /// k-NN entropy of each batch element of `x [B, C, ...]`, treating the C
    /// channels as samples of dimension `prod(...)` (1 when there is no
    /// trailing axis). Output shape `[B]`.
    pub fn entropy(&mut self, x: Var, k: usize, config: &EntropyConfig) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Shape(format!("entropy needs [B, C, ...], got {s:?}")));
        }
        let (batch, ch) = (s[0], s[1]);
        let d = numel(&s[2..]);
        let per = ch * d;
        let mut h = Vec::with_capacity(batch);
        let mut dh_dx = Vec::with_capacity(batch * per);
        for b in 0..batch {
            let rows = self.value(x)[b * per..(b + 1) * per].to_vec();
            let samples = SampleMatrix::new(rows, ch, d)?;
            let (est, g) = entropy_kl_with_gradient(&samples, k, config)?;
            h.push(est.value);
            dh_dx.extend_from_slice(&g);
        }
        Ok(self.push(vec![batch], h, Op::Entropy { x, dh_dx }, self.rg(&[x])))
    }

    /// Gradients of the scalar `root`. Nodes listed in `blocked` keep their
    /// own gradient but do not pass it on to their inputs.
    pub fn gradients(&self, root: Var, blocked: &[Var]) -> Result<Gradients> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad || blocked.iter().any(|b| b.0 == idx) {
                grads[idx] = Some(gy);
                continue;
            }
            self.backprop_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    /// Runs the backward sweep and accumulates the result into the tape's
    /// per-node gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let g = self.gradients(root, &[])?;
        for (node, grad) in self.nodes.iter_mut().zip(g.grads) {
            if let (true, Some(grad)) = (node.requires_grad, grad) {
                add_into(&mut node.grad, &grad);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        add_into(&mut grads[v.0], gy);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], gy);
                }
                if self.wants(*b) {
                    add_scaled_into(&mut grads[b.0], gy, -1.0);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let g: Vec<f64> = gy.iter().zip(self.value(*b)).map(|(g, y)| g * y).collect();
                    add_into(&mut grads[a.0], &g);
                }
                if self.wants(*b) {
                    let g: Vec<f64> = gy.iter().zip(self.value(*a)).map(|(g, x)| g * x).collect();
                    add_into(&mut grads[b.0], &g);
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    add_scaled_into(&mut grads[a.0], gy, *c);
                }
            }
            Op::AddScalar(a, s) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], gy);
                }
                if self.wants(*s) {
                    let total: f64 = gy.iter().sum();
                    add_into(&mut grads[s.0], &[total]);
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).len();
                    let g = if matches!(node.op, Op::Mean(_)) { gy[0] / n as f64 } else { gy[0] };
                    add_into(&mut grads[a.0], &vec![g; n]);
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let g: Vec<f64> = gy
                        .iter()
                        .zip(self.value(*a))
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    add_into(&mut grads[a.0], &g);
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], gy);
                }
            }
            Op::Stack(xs) => {
                for (i, x) in xs.iter().enumerate() {
                    if self.wants(*x) {
                        add_into(&mut grads[x.0], &[gy[i]]);
                    }
                }
            }
            Op::Slice { x, start } => {
                if self.wants(*x) {
                    let mut g = vec![0.0; self.value(*x).len()];
                    g[*start..*start + gy.len()].copy_from_slice(gy);
                    add_into(&mut grads[x.0], &g);
                }
            }
            Op::Linear { x, w, b } => self.backprop_linear(*x, *w, *b, gy, grads),
            Op::Conv2d { x, w, b } => self.backprop_conv(*x, *w, *b, gy, grads),
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if self.wants(*logits) {
                    let classes = self.shape(*logits)[1];
                    let scale = gy[0] / labels.len() as f64;
                    let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        g[i * classes + l] -= scale;
                    }
                    add_into(&mut grads[logits.0], &g);
                }
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).len() as f64;
                let diff: Vec<f64> = self
                    .value(*a)
                    .iter()
                    .zip(self.value(*b))
                    .map(|(x, y)| 2.0 * gy[0] * (x - y) / n)
                    .collect();
                if self.wants(*a) {
                    add_into(&mut grads[a.0], &diff);
                }
                if self.wants(*b) {
                    add_scaled_into(&mut grads[b.0], &diff, -1.0);
                }
            }
            Op::Entropy { x, dh_dx } => {
                if self.wants(*x) {
                    let per = dh_dx.len() / gy.len().max(1);
                    let g: Vec<f64> = dh_dx
                        .chunks(per.max(1))
                        .zip(gy)
                        .flat_map(|(chunk, &gb)| chunk.iter().map(move |v| gb * v))
                        .collect();
                    add_into(&mut grads[x.0], &g);
                }
            }
        }
    }

    fn backprop_linear(&self, x: Var, w: Var, b: Var, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let ws = self.shape(w);
        let (out, inp) = (ws[0], ws[1]);
        let batch = self.shape(x)[0];
        let (xv, wv) = (self.value(x), self.value(w));
        if self.wants(x) {
            let mut gx = vec![0.0; batch * inp];
            for i in 0..batch {
                let gxi = &mut gx[i * inp..(i + 1) * inp];
                for o in 0..out {
                    let g = gy[i * out + o];
                    let wo = &wv[o * inp..(o + 1) * inp];
                    gxi.iter_mut().zip(wo).for_each(|(a, c)| *a += g * c);
                }
            }
            add_into(&mut grads[x.0], &gx);
        }
        if self.wants(w) {
            let mut gw = vec![0.0; out * inp];
            for i in 0..batch {
                let xi = &xv[i * inp..(i + 1) * inp];
                for o in 0..out {
                    let g = gy[i * out + o];
                    let gwo = &mut gw[o * inp..(o + 1) * inp];
                    gwo.iter_mut().zip(xi).for_each(|(a, c)| *a += g * c);
                }
            }
            add_into(&mut grads[w.0], &gw);
        }
        if self.wants(b) {
            let mut gb = vec![0.0; out];
            for i in 0..batch {
                gb.iter_mut().zip(&gy[i * out..(i + 1) * out]).for_each(|(a, g)| *a += g);
            }
            add_into(&mut grads[b.0], &gb);
        }
    }

    fn backprop_conv(&self, x: Var, w: Var, b: Var, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let g = ConvGeom::new(self.shape(x), self.shape(w));
        let (xv, wv) = (self.value(x), self.value(w));
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let mut gx = if want_x { vec![0.0; xv.len()] } else { Vec::new() };
        let mut gw = if want_w { vec![0.0; wv.len()] } else { Vec::new() };
        let hw = g.h * g.w;
        let rows = g.in_ch * g.k * g.k;
        let mut col = vec![0.0; rows * hw];
        let mut gcol = vec![0.0; rows * hw];
        for n in 0..g.batch {
            let xr = g.in_plane(n, 0).start..g.in_plane(n, g.in_ch - 1).end;
            let gy_n = &gy[g.out_plane(n, 0).start..g.out_plane(n, g.out_ch - 1).end];
            if want_w {
                g.im2col(&xv[xr.clone()], &mut col);
                for (o, gplane) in gy_n.chunks_exact(hw).enumerate() {
                    let gwo = &mut gw[o * rows..(o + 1) * rows];
                    for (acc, src) in gwo.iter_mut().zip(col.chunks_exact(hw)) {
                        *acc += src.iter().zip(gplane).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            if want_x {
                gcol.iter_mut().for_each(|v| *v = 0.0);
                for (o, gplane) in gy_n.chunks_exact(hw).enumerate() {
                    for (r, dst) in gcol.chunks_exact_mut(hw).enumerate() {
                        let wt = wv[o * rows + r];
                        dst.iter_mut().zip(gplane).for_each(|(a, b)| *a += wt * b);
                    }
                }
                g.col2im_add(&gcol, &mut gx[xr]);
            }
        }
        if want_x {
            add_into(&mut grads[x.0], &gx);
        }
        if want_w {
            add_into(&mut grads[w.0], &gw);
        }
        if self.wants(b) {
            let mut gb = vec![0.0; g.out_ch];
            for n in 0..g.batch {
                for (o, acc) in gb.iter_mut().enumerate() {
                    *acc += gy[g.out_plane(n, o)].iter().sum::<f64>();
                }
            }
            add_into(&mut grads[b.0], &gb);
        }
    }
}

pub(crate) fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut probs = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        probs.extend(exps.iter().map(|e| e / total));
    }
    probs
}

struct ConvGeom {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: isize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize]) -> Self {
        Self {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: ws[0],
            h: xs[2],
            w: xs[3],
            k: ws[2],
            pad: (ws[2] / 2) as isize,
        }
    }

    fn out_plane(&self, n: usize, o: usize) -> std::ops::Range<usize> {
        let s = (n * self.out_ch + o) * self.h * self.w;
        s..s + self.h * self.w
    }

    fn in_plane(&self, n: usize, c: usize) -> std::ops::Range<usize> {
        let s = (n * self.in_ch + c) * self.h * self.w;
        s..s + self.h * self.w
    }

    /// Unfolds one sample `[C, H, W]` into `[C·K·K, H·W]`, zero-filling
    /// positions that fall in the padding.
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let hw = self.h * self.w;
        col.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..self.in_ch {
            let plane = &x[c * hw..(c + 1) * hw];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (c * self.k + ky) * self.k + kx;
                    let dst = &mut col[r * hw..(r + 1) * hw];
                    self.for_each_row(ky, kx, |out_off, in_off, len| {
                        dst[out_off..out_off + len].copy_from_slice(&plane[in_off..in_off + len]);
                    });
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatters `[C·K·K, H·W]` back onto `[C, H, W]`.
    fn col2im_add(&self, col: &[f64], x: &mut [f64]) {
        let hw = self.h * self.w;
        for c in 0..self.in_ch {
            let plane = &mut x[c * hw..(c + 1) * hw];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (c * self.k + ky) * self.k + kx;
                    let src = &col[r * hw..(r + 1) * hw];
                    self.for_each_row(ky, kx, |out_off, in_off, len| {
                        plane[in_off..in_off + len]
                            .iter_mut()
                            .zip(&src[out_off..out_off + len])
                            .for_each(|(a, b)| *a += b);
                    });
                }
            }
        }
    }

    /// For kernel tap (ky, kx), calls `f(out_offset, in_offset, len)` for
    /// every output row segment whose shifted input lies inside the plane.
    fn for_each_row(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w) = (self.h as isize, self.w as isize);
        let dy = ky as isize - self.pad;
        let dx = kx as isize - self.pad;
        let x0 = (-dx).max(0);
        let x1 = (w - dx).min(w);
        if x1 <= x0 {
            return;
        }
        let len = (x1 - x0) as usize;
        let y0 = (-dy).max(0);
        let y1 = (h - dy).min(h);
        for y in y0..y1 {
            let out_off = (y * w + x0) as usize;
            let in_off = ((y + dy) * w + x0 + dx) as usize;
            f(out_off, in_off, len);
        }
    }
}
