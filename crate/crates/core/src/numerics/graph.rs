//! Define-by-run reverse-mode differentiation.
//!
//! A `Graph` records every differentiable operation executed through it,
//! holding the forward values of each node. `backward` replays the record
//! in reverse, accumulating adjoints. Graphs are short-lived: one is built
//! per training step (or per decoded query at inference) and discarded.
//!
//! One backward pass per graph; recording new operations after backward
//! is rejected.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Handle to a node in a `Graph`. Only meaningful for the graph that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Relu(usize),
    Scale(usize, S),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        h: usize,
        w: usize,
        cin: usize,
        cout: usize,
        ksize: usize,
    },
    /// Adds a `[C]` bias along the last axis of `input`.
    BiasAdd {
        input: usize,
        bias: usize,
    },
    Sum(usize),
    Mean(usize),
    L1Loss {
        pred: usize,
        target: usize,
    },
    /// Gathers `side x side` depth vectors from a `[rows, cols, depth]`
    /// source at constant cell indices.
    GatherCells {
        src: usize,
        cells: Vec<(usize, usize)>,
        cols: usize,
        depth: usize,
    },
    /// Crops a `[h, w, depth]` window out of a `[src_h, src_w, depth]` grid.
    Crop {
        src: usize,
        row0: usize,
        col0: usize,
        out_h: usize,
        out_w: usize,
        src_w: usize,
        depth: usize,
    },
    Reshape(usize),
    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = cols).
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
}

struct Node<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    consumed: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn value(&self, v: Value) -> &[S] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last backward pass w.r.t. node `v`, if tracked.
    pub fn grad(&self, v: Value) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies a node's forward value out as a plain tensor.
    pub fn detach(&self, v: Value) -> Tensor<S> {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, op: Op<S>, needs_grad: bool) -> Value {
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Value(self.nodes.len() - 1)
    }

    fn guard_open(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        Ok(())
    }

    fn check_finite(&self, v: Value, op: &str) -> Result<Value> {
        if self.nodes[v.0].data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(op.into()));
        }
        Ok(v)
    }

    /// Records a leaf node holding a copy of `t`. Gradients flow back to it
    /// iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Result<Value> {
        self.guard_open()?;
        if t.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("leaf".into()));
        }
        Ok(self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.guard_open()?;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape != nb.shape {
            return Err(Error::shape("add", &na.shape, &nb.shape));
        }
        let data = na
            .data
            .iter()
            .zip(&nb.data)
            .map(|(x, y)| *x + *y)
            .collect();
        let needs = na.needs_grad || nb.needs_grad;
        let shape = na.shape.clone();
        let v = self.push(shape, data, Op::Add(a.0, b.0), needs);
        self.check_finite(v, "add")
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.guard_open()?;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape != nb.shape {
            return Err(Error::shape("mul", &na.shape, &nb.shape));
        }
        let data = na
            .data
            .iter()
            .zip(&nb.data)
            .map(|(x, y)| *x * *y)
            .collect();
        let needs = na.needs_grad || nb.needs_grad;
        let shape = na.shape.clone();
        let v = self.push(shape, data, Op::Mul(a.0, b.0), needs);
        self.check_finite(v, "mul")
    }

    pub fn relu(&mut self, a: Value) -> Result<Value> {
        self.guard_open()?;
        let na = &self.nodes[a.0];
        let data = na
            .data
            .iter()
            .map(|&x| if x > S::zero() { x } else { S::zero() })
            .collect();
        let (shape, needs) = (na.shape.clone(), na.needs_grad);
        Ok(self.push(shape, data, Op::Relu(a.0), needs))
    }

    pub fn scale(&mut self, a: Value, factor: S) -> Result<Value> {
        self.guard_open()?;
        if !factor.is_finite() {
            return Err(Error::NonFinite("scale factor".into()));
        }
        let na = &self.nodes[a.0];
        let data = na.data.iter().map(|&x| x * factor).collect();
        let (shape, needs) = (na.shape.clone(), na.needs_grad);
        let v = self.push(shape, data, Op::Scale(a.0, factor), needs);
        self.check_finite(v, "scale")
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.guard_open()?;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(Error::shape("matmul", &na.shape, &nb.shape));
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let av = na.data[i * k + p];
                let brow = &nb.data[p * n..(p + 1) * n];
                let orow = &mut data[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let needs = na.needs_grad || nb.needs_grad;
        let v = self.push(
            vec![m, n],
            data,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            needs,
        );
        self.check_finite(v, "matmul")
    }

    /// 2-D convolution over an `[H, W, Cin]` input with a
    /// `[k, k, Cin, Cout]` kernel, zero-padded to preserve spatial dims.
    pub fn conv2d(&mut self, input: Value, kernel: Value) -> Result<Value> {
        self.guard_open()?;
        let (ni, nk) = (&self.nodes[input.0], &self.nodes[kernel.0]);
        if ni.shape.len() != 3 || nk.shape.len() != 4 {
            return Err(Error::shape("conv2d", &ni.shape, &nk.shape));
        }
        let (h, w, cin) = (ni.shape[0], ni.shape[1], ni.shape[2]);
        let ksize = nk.shape[0];
        if nk.shape[1] != ksize {
            return Err(Error::shape("conv2d kernel", &[ksize, ksize], &nk.shape));
        }
        if ksize % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel size must be odd, got {ksize}"
            )));
        }
        if nk.shape[2] != cin {
            return Err(Error::shape("conv2d channels", &[cin], &[nk.shape[2]]));
        }
        let cout = nk.shape[3];
        let data = conv2d_forward(&ni.data, &nk.data, h, w, cin, cout, ksize);
        let needs = ni.needs_grad || nk.needs_grad;
        let v = self.push(
            vec![h, w, cout],
            data,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                h,
                w,
                cin,
                cout,
                ksize,
            },
            needs,
        );
        self.check_finite(v, "conv2d")
    }

    pub fn bias_add(&mut self, input: Value, bias: Value) -> Result<Value> {
        self.guard_open()?;
        let (ni, nb) = (&self.nodes[input.0], &self.nodes[bias.0]);
        let c = *ni.shape.last().expect("nonempty shape");
        if nb.shape != [c] {
            return Err(Error::shape("bias_add", &[c], &nb.shape));
        }
        let mut data = ni.data.clone();
        for chunk in data.chunks_mut(c) {
            for (x, b) in chunk.iter_mut().zip(&nb.data) {
                *x += *b;
            }
        }
        let needs = ni.needs_grad || nb.needs_grad;
        let shape = ni.shape.clone();
        let v = self.push(
            shape,
            data,
            Op::BiasAdd {
                input: input.0,
                bias: bias.0,
            },
            needs,
        );
        self.check_finite(v, "bias_add")
    }

    pub fn sum(&mut self, a: Value) -> Result<Value> {
        self.guard_open()?;
        let na = &self.nodes[a.0];
        let total = na.data.iter().copied().sum();
        let needs = na.needs_grad;
        let v = self.push(vec![1], vec![total], Op::Sum(a.0), needs);
        self.check_finite(v, "sum")
    }

    pub fn mean(&mut self, a: Value) -> Result<Value> {
        self.guard_open()?;
        let na = &self.nodes[a.0];
        let total: S = na.data.iter().copied().sum();
        let avg = total / S::from_f64(na.data.len() as f64);
        let needs = na.needs_grad;
        let v = self.push(vec![1], vec![avg], Op::Mean(a.0), needs);
        self.check_finite(v, "mean")
    }

    /// Mean absolute deviation. The target must not carry gradient.
    pub fn l1_loss(&mut self, pred: Value, target: Value) -> Result<Value> {
        self.guard_open()?;
        let (np, nt) = (&self.nodes[pred.0], &self.nodes[target.0]);
        if np.shape != nt.shape {
            return Err(Error::shape("l1_loss", &np.shape, &nt.shape));
        }
        if nt.needs_grad {
            return Err(Error::InvalidArgument(
                "l1_loss target must not require gradient".into(),
            ));
        }
        let total: S = np
            .data
            .iter()
            .zip(&nt.data)
            .map(|(p, t)| (*p - *t).abs())
            .sum();
        let avg = total / S::from_f64(np.data.len() as f64);
        let needs = np.needs_grad;
        let v = self.push(
            vec![1],
            vec![avg],
            Op::L1Loss {
                pred: pred.0,
                target: target.0,
            },
            needs,
        );
        self.check_finite(v, "l1_loss")
    }

    /// Gathers depth vectors at `cells` (row, col) from a `[rows, cols, D]`
    /// source into a `[side, side, D]` block. Indices are constants; the
    /// adjoint scatter-adds into the source.
    pub fn gather_cells(&mut self, src: Value, cells: &[(usize, usize)], side: usize) -> Result<Value> {
        self.guard_open()?;
        let ns = &self.nodes[src.0];
        if ns.shape.len() != 3 {
            return Err(Error::shape("gather_cells", &[0, 0, 0], &ns.shape));
        }
        let (rows, cols, depth) = (ns.shape[0], ns.shape[1], ns.shape[2]);
        if cells.len() != side * side {
            return Err(Error::InvalidArgument(format!(
                "gather_cells needs {}x{} cells, got {}",
                side,
                side,
                cells.len()
            )));
        }
        let mut data = Vec::with_capacity(cells.len() * depth);
        for &(r, c) in cells {
            if r >= rows || c >= cols {
                return Err(Error::InvalidArgument(format!(
                    "gather_cells index ({r},{c}) outside {rows}x{cols}"
                )));
            }
            let base = (r * cols + c) * depth;
            data.extend_from_slice(&ns.data[base..base + depth]);
        }
        let needs = ns.needs_grad;
        Ok(self.push(
            vec![side, side, depth],
            data,
            Op::GatherCells {
                src: src.0,
                cells: cells.to_vec(),
                cols,
                depth,
            },
            needs,
        ))
    }

    /// Crops `[out_h, out_w]` spatial window starting at (row0, col0) from a
    /// `[H, W, D]` grid.
    pub fn crop(
        &mut self,
        src: Value,
        row0: usize,
        col0: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Value> {
        self.guard_open()?;
        let ns = &self.nodes[src.0];
        if ns.shape.len() != 3 {
            return Err(Error::shape("crop", &[0, 0, 0], &ns.shape));
        }
        let (src_h, src_w, depth) = (ns.shape[0], ns.shape[1], ns.shape[2]);
        if row0 + out_h > src_h || col0 + out_w > src_w {
            return Err(Error::InvalidArgument(format!(
                "crop {out_h}x{out_w}@({row0},{col0}) outside {src_h}x{src_w}"
            )));
        }
        let mut data = Vec::with_capacity(out_h * out_w * depth);
        for r in 0..out_h {
            let base = ((row0 + r) * src_w + col0) * depth;
            data.extend_from_slice(&ns.data[base..base + out_w * depth]);
        }
        let needs = ns.needs_grad;
        Ok(self.push(
            vec![out_h, out_w, depth],
            data,
            Op::Crop {
                src: src.0,
                row0,
                col0,
                out_h,
                out_w,
                src_w,
                depth,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, a: Value, shape: &[usize]) -> Result<Value> {
        self.guard_open()?;
        let na = &self.nodes[a.0];
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != na.data.len() {
            return Err(Error::shape("reshape", shape, &na.shape));
        }
        let (data, needs) = (na.data.clone(), na.needs_grad);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a.0), needs))
    }

    /// Concatenates 2-D values along `axis` (0 stacks rows, 1 appends cols).
    pub fn concat(&mut self, inputs: &[Value], axis: usize) -> Result<Value> {
        self.guard_open()?;
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("concat of zero inputs".into()));
        }
        if axis > 1 {
            return Err(Error::InvalidArgument(format!("concat axis {axis}")));
        }
        let fixed = self.nodes[inputs[0].0].shape[1 - axis];
        let mut needs = false;
        let mut along = 0usize;
        for v in inputs {
            let n = &self.nodes[v.0];
            if n.shape.len() != 2 || n.shape[1 - axis] != fixed {
                return Err(Error::shape("concat", &self.nodes[inputs[0].0].shape, &n.shape));
            }
            needs |= n.needs_grad;
            along += n.shape[axis];
        }
        let shape = if axis == 0 {
            vec![along, fixed]
        } else {
            vec![fixed, along]
        };
        let mut data = Vec::with_capacity(shape[0] * shape[1]);
        if axis == 0 {
            for v in inputs {
                data.extend_from_slice(&self.nodes[v.0].data);
            }
        } else {
            for r in 0..fixed {
                for v in inputs {
                    let n = &self.nodes[v.0];
                    let c = n.shape[1];
                    data.extend_from_slice(&n.data[r * c..(r + 1) * c]);
                }
            }
        }
        let ids = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(shape, data, Op::Concat { inputs: ids, axis }, needs))
    }

    /// Runs the reverse pass from a scalar `loss`, accumulating gradients
    /// for every grad-tracked node. Consumes the graph for recording.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.consumed = true;
        self.grads = self.nodes.iter().map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // nothing tracked; vacuous pass
        }
        self.grads[loss.0] = Some(vec![S::one()]);

        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = self.grads[id].take().expect("checked above");
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn add_grad(&mut self, node: usize, delta: impl Iterator<Item = S>) {
        if !self.nodes[node].needs_grad {
            return;
        }
        let len = self.nodes[node].data.len();
        let slot = self.grads[node].get_or_insert_with(|| vec![S::zero(); len]);
        for (g, d) in slot.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn propagate(&mut self, id: usize, g: &[S]) {
        // Ops referencing node data clone what they need up front; adjoint
        // buffers are then merged via add_grad.
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, g.iter().copied());
                self.add_grad(b, g.iter().copied());
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a].needs_grad {
                    let da: Vec<S> = g
                        .iter()
                        .zip(&self.nodes[b].data)
                        .map(|(gv, bv)| *gv * *bv)
                        .collect();
                    self.add_grad(a, da.into_iter());
                }
                if self.nodes[b].needs_grad {
                    let db: Vec<S> = g
                        .iter()
                        .zip(&self.nodes[a].data)
                        .map(|(gv, av)| *gv * *av)
                        .collect();
                    self.add_grad(b, db.into_iter());
                }
            }
            Op::Relu(a) => {
                let a = *a;
                let da: Vec<S> = g
                    .iter()
                    .zip(&self.nodes[a].data)
                    .map(|(gv, xv)| if *xv > S::zero() { *gv } else { S::zero() })
                    .collect();
                self.add_grad(a, da.into_iter());
            }
            Op::Scale(a, factor) => {
                let (a, factor) = (*a, *factor);
                self.add_grad(a, g.iter().map(|gv| *gv * factor));
            }
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if self.nodes[a].needs_grad {
                    let bd = &self.nodes[b].data;
                    let mut da = vec![S::zero(); m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = S::zero();
                            for j in 0..n {
                                acc += g[i * n + j] * bd[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    self.add_grad(a, da.into_iter());
                }
                if self.nodes[b].needs_grad {
                    let ad = &self.nodes[a].data;
                    let mut db = vec![S::zero(); k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let av = ad[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    self.add_grad(b, db.into_iter());
                }
            }
            Op::Conv2d {
                input,
                kernel,
                h,
                w,
                cin,
                cout,
                ksize,
            } => {
                let (input, kernel) = (*input, *kernel);
                let (h, w, cin, cout, ksize) = (*h, *w, *cin, *cout, *ksize);
                let want_input = self.nodes[input].needs_grad;
                let want_kernel = self.nodes[kernel].needs_grad;
                let (di, dk) = conv2d_backward(
                    &self.nodes[input].data,
                    &self.nodes[kernel].data,
                    g,
                    h,
                    w,
                    cin,
                    cout,
                    ksize,
                    want_input,
                    want_kernel,
                );
                if let Some(di) = di {
                    self.add_grad(input, di.into_iter());
                }
                if let Some(dk) = dk {
                    self.add_grad(kernel, dk.into_iter());
                }
            }
            Op::BiasAdd { input, bias } => {
                let (input, bias) = (*input, *bias);
                self.add_grad(input, g.iter().copied());
                if self.nodes[bias].needs_grad {
                    let c = self.nodes[bias].data.len();
                    let mut db = vec![S::zero(); c];
                    for chunk in g.chunks(c) {
                        for (d, gv) in db.iter_mut().zip(chunk) {
                            *d += *gv;
                        }
                    }
                    self.add_grad(bias, db.into_iter());
                }
            }
            Op::Sum(a) => {
                let a = *a;
                let g0 = g[0];
                self.add_grad(a, std::iter::repeat(g0).take(self.nodes[a].data.len()));
            }
            Op::Mean(a) => {
                let a = *a;
                let n = self.nodes[a].data.len();
                let gv = g[0] / S::from_f64(n as f64);
                self.add_grad(a, std::iter::repeat(gv).take(n));
            }
            Op::L1Loss { pred, target } => {
                let (pred, target) = (*pred, *target);
                let n = self.nodes[pred].data.len();
                let inv = g[0] / S::from_f64(n as f64);
                // Subgradient at zero residual is 0.
                let dp: Vec<S> = self.nodes[pred]
                    .data
                    .iter()
                    .zip(&self.nodes[target].data)
                    .map(|(p, t)| {
                        let r = *p - *t;
                        if r > S::zero() {
                            inv
                        } else if r < S::zero() {
                            -inv
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                self.add_grad(pred, dp.into_iter());
            }
            Op::GatherCells {
                src,
                cells,
                cols,
                depth,
                ..
            } => {
                let (src, cols, depth) = (*src, *cols, *depth);
                let cells = cells.clone();
                let n = self.nodes[src].data.len();
                let mut ds = vec![S::zero(); n];
                for (i, &(r, c)) in cells.iter().enumerate() {
                    let dst = (r * cols + c) * depth;
                    let from = i * depth;
                    for d in 0..depth {
                        ds[dst + d] += g[from + d];
                    }
                }
                self.add_grad(src, ds.into_iter());
            }
            Op::Crop {
                src,
                row0,
                col0,
                out_h,
                out_w,
                src_w,
                depth,
            } => {
                let (src, row0, col0, out_h, out_w, src_w, depth) =
                    (*src, *row0, *col0, *out_h, *out_w, *src_w, *depth);
                let n = self.nodes[src].data.len();
                let mut ds = vec![S::zero(); n];
                for r in 0..out_h {
                    let dst = ((row0 + r) * src_w + col0) * depth;
                    let from = r * out_w * depth;
                    for i in 0..out_w * depth {
                        ds[dst + i] += g[from + i];
                    }
                }
                self.add_grad(src, ds.into_iter());
            }
            Op::Reshape(a) => {
                let a = *a;
                self.add_grad(a, g.iter().copied());
            }
            Op::Concat { inputs, axis } => {
                let inputs = inputs.clone();
                let axis = *axis;
                if axis == 0 {
                    let mut offset = 0;
                    for id in inputs {
                        let n = self.nodes[id].data.len();
                        let part: Vec<S> = g[offset..offset + n].to_vec();
                        offset += n;
                        self.add_grad(id, part.into_iter());
                    }
                } else {
                    let rows = self.nodes[id].shape[0];
                    let total_cols = self.nodes[id].shape[1];
                    let mut col0 = 0;
                    for id_in in inputs {
                        let c = self.nodes[id_in].shape[1];
                        let mut part = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            part.extend_from_slice(&g[r * total_cols + col0..r * total_cols + col0 + c]);
                        }
                        col0 += c;
                        self.add_grad(id_in, part.into_iter());
                    }
                }
            }
        }
    }
}

fn conv2d_forward<S: Scalar>(
    input: &[S],
    kernel: &[S],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    ksize: usize,
) -> Vec<S> {
    let pad = (ksize - 1) / 2;
    let mut out = vec![S::zero(); h * w * cout];
    for y in 0..h {
        for dy in 0..ksize {
            let sy = y + dy;
            if sy < pad || sy >= h + pad {
                continue;
            }
            let sy = sy - pad;
            for x in 0..w {
                let out_base = (y * w + x) * cout;
                for dx in 0..ksize {
                    let sx = x + dx;
                    if sx < pad || sx >= w + pad {
                        continue;
                    }
                    let sx = sx - pad;
                    let in_base = (sy * w + sx) * cin;
                    let ker_base = (dy * ksize + dx) * cin * cout;
                    for ci in 0..cin {
                        let iv = input[in_base + ci];
                        let krow = &kernel[ker_base + ci * cout..ker_base + (ci + 1) * cout];
                        let orow = &mut out[out_base..out_base + cout];
                        for (o, &kv) in orow.iter_mut().zip(krow) {
                            *o += iv * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<S: Scalar>(
    input: &[S],
    kernel: &[S],
    gout: &[S],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    ksize: usize,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let pad = (ksize - 1) / 2;
    let mut dinput = want_input.then(|| vec![S::zero(); h * w * cin]);
    let mut dkernel = want_kernel.then(|| vec![S::zero(); ksize * ksize * cin * cout]);
    for y in 0..h {
        for dy in 0..ksize {
            let sy = y + dy;
            if sy < pad || sy >= h + pad {
                continue;
            }
            let sy = sy - pad;
            for x in 0..w {
                let g_base = (y * w + x) * cout;
                let grow = &gout[g_base..g_base + cout];
                for dx in 0..ksize {
                    let sx = x + dx;
                    if sx < pad || sx >= w + pad {
                        continue;
                    }
                    let sx = sx - pad;
                    let in_base = (sy * w + sx) * cin;
                    let ker_base = (dy * ksize + dx) * cin * cout;
                    for ci in 0..cin {
                        let kb = ker_base + ci * cout;
                        if let Some(dk) = dkernel.as_mut() {
                            let iv = input[in_base + ci];
                            let drow = &mut dk[kb..kb + cout];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += iv * gv;
                            }
                        }
                        if let Some(di) = dinput.as_mut() {
                            let krow = &kernel[kb..kb + cout];
                            let mut acc = S::zero();
                            for (&kv, &gv) in krow.iter().zip(grow) {
                                acc += kv * gv;
                            }
                            di[in_base + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    (dinput, dkernel)
}
