//! Tape-based reverse-mode differentiation.
//!
//! Every primitive applied through a [`Tape`] appends a node holding its
//! output value and whatever the backward rule needs (im2col buffers, pooling
//! argmax, dropout masks, sampled noise). [`Tape::backward`] walks the nodes in
//! reverse, visits each once, and consumes the tape.
//!
//! Leaves created with [`Tape::param`] require gradients; leaves created with
//! [`Tape::constant`] do not, and subgraphs that only depend on constants are
//! skipped during the backward sweep.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::ops::{self, ConvGeometry, ConvGrads, ConvPoolCache, DenseGrads};
use crate::tensor::{Rng, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geometry: ConvGeometry,
        cols: Vec<f64>,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    ConvReluPool {
        x: usize,
        w: usize,
        b: usize,
        cache: Box<ConvPoolCache>,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    Sigmoid {
        x: usize,
    },
    Relu {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    Sum {
        x: usize,
    },
    Mse {
        a: usize,
        b: usize,
    },
    Bce {
        p: usize,
        y: usize,
    },
    KlStandard {
        mu: usize,
        log_var: usize,
        rows: usize,
    },
    L1 {
        x: usize,
        factor: f64,
    },
    Reparameterize {
        mu: usize,
        log_var: usize,
        noise: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// True when some requires-grad leaf is upstream of (or is) this node.
    tracked: bool,
}

/// Whether stochastic layers are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Variables from before the clear become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let tracked = inputs.iter().any(|&i| self.nodes[i].tracked);
        self.push_node(value, op, false, tracked)
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            tracked,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true, true)
    }

    /// A leaf treated as data: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.index(v)?].value)
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v)?.item()
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.index(x)?, self.index(w)?, self.index(b)?);
        let out = ops::dense(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            &self.nodes[bi].value,
        )?;
        Ok(self.push(
            out,
            Op::Dense {
                x: xi,
                w: wi,
                b: bi,
            },
            &[xi, wi, bi],
        ))
    }

    pub fn conv2d(&mut self, x: Var, filters: Var, bias: Var, stride: usize) -> Result<Var> {
        let (xi, wi, bi) = (self.index(x)?, self.index(filters)?, self.index(bias)?);
        let (out, geometry, cols) = ops::conv2d_with_cols(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            &self.nodes[bi].value,
            stride,
        )?;
        // the unrolled input is only needed for the filter gradient
        let cols = if self.nodes[wi].tracked {
            cols
        } else {
            Vec::new()
        };
        Ok(self.push(
            out,
            Op::Conv2d {
                x: xi,
                w: wi,
                b: bi,
                geometry,
                cols,
            },
            &[xi, wi, bi],
        ))
    }

    /// `maxpool2d(relu(conv2d(x)))` as one node, evaluating only the
    /// convolution outputs that the pooling windows read.
    pub fn conv2d_relu_maxpool(
        &mut self,
        x: Var,
        filters: Var,
        bias: Var,
        stride: usize,
        pool: (usize, usize),
    ) -> Result<Var> {
        let (xi, wi, bi) = (self.index(x)?, self.index(filters)?, self.index(bias)?);
        let (out, cache) = ops::conv2d_relu_maxpool(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            &self.nodes[bi].value,
            stride,
            pool,
        )?;
        let op = Op::ConvReluPool {
            x: xi,
            w: wi,
            b: bi,
            cache: Box::new(cache),
        };
        Ok(self.push(out, op, &[xi, wi, bi]))
    }

    pub fn maxpool2d(&mut self, x: Var, pool: (usize, usize)) -> Result<Var> {
        let xi = self.index(x)?;
        let (out, argmax) = ops::maxpool2d_with_argmax(&self.nodes[xi].value, pool)?;
        Ok(self.push(out, Op::MaxPool2d { x: xi, argmax }, &[xi]))
    }

    /// Inverted dropout. In [`Mode::Eval`] or with `rate == 0` this is the identity.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Argument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        let xi = self.index(x)?;
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let input = &self.nodes[xi].value;
        let mask: Vec<f64> = (0..input.len())
            .map(|_| {
                if rng.uniform() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = input.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(input.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout { x: xi, mask }, &[xi]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let out = ops::sigmoid(&self.nodes[xi].value);
        Ok(self.push(out, Op::Sigmoid { x: xi }, &[xi]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let out = ops::relu(&self.nodes[xi].value);
        Ok(self.push(out, Op::Relu { x: xi }, &[xi]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let xi = self.index(x)?;
        let out = self.nodes[xi].value.clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x: xi }, &[xi]))
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (sa, sb) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok((ai, bi))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary_same_shape("add", a, b)?;
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add { a: ai, b: bi }, &[ai, bi]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary_same_shape("mul", a, b)?;
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul { a: ai, b: bi }, &[ai, bi]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xi = self.index(x)?;
        let out = self.nodes[xi].value.map(|v| v * factor);
        Ok(self.push(out, Op::Scale { x: xi, factor }, &[xi]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let out = Tensor::scalar(self.nodes[xi].value.sum());
        Ok(self.push(out, Op::Sum { x: xi }, &[xi]))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary_same_shape("mse", a, b)?;
        let out = ops::mse(&self.nodes[ai].value, &self.nodes[bi].value)?;
        Ok(self.push(Tensor::scalar(out), Op::Mse { a: ai, b: bi }, &[ai, bi]))
    }

    /// Binary cross-entropy; `y` must hold only 0 and 1 and receives no gradient.
    pub fn bce(&mut self, p: Var, y: Var) -> Result<Var> {
        let (pi, yi) = self.binary_same_shape("bce", p, y)?;
        let out = ops::bce(&self.nodes[pi].value, &self.nodes[yi].value)?;
        Ok(self.push(Tensor::scalar(out), Op::Bce { p: pi, y: yi }, &[pi]))
    }

    /// KL divergence of diagonal Gaussians `(mu, exp(log_var))` from `N(0, I)`,
    /// summed over latent components and averaged over rows.
    pub fn kl_standard(&mut self, mu: Var, log_var: Var) -> Result<Var> {
        let (mi, li) = self.binary_same_shape("kl_standard", mu, log_var)?;
        let (m, l) = (&self.nodes[mi].value, &self.nodes[li].value);
        let rows = if m.shape().len() >= 2 { m.rows() } else { 1 };
        let total = ops::kl_standard_from_log_var(m.data(), l.data());
        let out = Tensor::scalar(if rows == 0 { 0.0 } else { total / rows as f64 });
        Ok(self.push(
            out,
            Op::KlStandard {
                mu: mi,
                log_var: li,
                rows,
            },
            &[mi, li],
        ))
    }

    /// `factor * sum(|x|)`, with subgradient 0 at exactly zero.
    pub fn l1(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xi = self.index(x)?;
        let out = Tensor::scalar(factor * ops::penalty_l1([&self.nodes[xi].value]));
        Ok(self.push(out, Op::L1 { x: xi, factor }, &[xi]))
    }

    /// `z = mu + exp(log_var / 2) * eps` with `eps ~ N(0, I)` drawn from `rng`.
    pub fn reparameterize(&mut self, mu: Var, log_var: Var, rng: &mut Rng) -> Result<Var> {
        let (mi, li) = self.binary_same_shape("reparameterize", mu, log_var)?;
        let noise: Vec<f64> = (0..self.nodes[mi].value.len())
            .map(|_| rng.normal())
            .collect();
        self.reparameterize_with_noise(mi, li, noise)
    }

    /// Reparameterisation with caller-supplied noise (zero noise gives `mu`).
    pub fn reparameterize_fixed(&mut self, mu: Var, log_var: Var, noise: Vec<f64>) -> Result<Var> {
        let (mi, li) = self.binary_same_shape("reparameterize", mu, log_var)?;
        if noise.len() != self.nodes[mi].value.len() {
            return Err(Error::shape(
                "reparameterize noise",
                self.nodes[mi].value.shape(),
                &[noise.len()],
            ));
        }
        self.reparameterize_with_noise(mi, li, noise)
    }

    fn reparameterize_with_noise(&mut self, mi: usize, li: usize, noise: Vec<f64>) -> Result<Var> {
        let (m, l) = (&self.nodes[mi].value, &self.nodes[li].value);
        let data = m
            .data()
            .iter()
            .zip(l.data())
            .zip(&noise)
            .map(|((&mu, &lv), &e)| mu + (0.5 * lv).exp() * e)
            .collect();
        let out = Tensor::new(m.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::Reparameterize {
                mu: mi,
                log_var: li,
                noise,
            },
            &[mi, li],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape; the returned
    /// [`Gradients`] hold one entry per [`Tape::param`] leaf (zeros when unused).
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let root = self.index(loss)?;
        let root_value = &self.nodes[root].value;
        if !root_value.is_scalar() {
            return Err(Error::NotScalar(root_value.shape().to_vec()));
        }

        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[root] = Some(vec![1.0]);

        let mut leaves = HashMap::new();
        for i in (0..=root).rev() {
            let node = &nodes[i];
            if node.requires_grad {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                leaves.insert(i, Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !node.tracked {
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
        }
        for (i, node) in nodes.iter().enumerate().skip(root + 1) {
            if node.requires_grad {
                leaves.insert(i, Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients {
            tape: self.id,
            leaves,
        })
    }
}

/// Lazily allocated gradient slot for node `i`, or `None` if `i` is untracked.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], i: usize) -> Option<&'a mut [f64]> {
    if !nodes[i].tracked {
        return None;
    }
    Some(grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.len()]))
}

/// Moves the gradient buffers of `idx` out of `grads` so several can be
/// borrowed mutably at once. A repeated index gets a fresh buffer that
/// [`restore_slots`] adds back.
fn take_slots<const N: usize>(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    idx: [usize; N],
) -> [Option<Vec<f64>>; N] {
    std::array::from_fn(|p| {
        let i = idx[p];
        if !nodes[i].tracked {
            return None;
        }
        let zeros = || vec![0.0; nodes[i].value.len()];
        if idx[..p].contains(&i) {
            Some(zeros())
        } else {
            Some(grads[i].take().unwrap_or_else(zeros))
        }
    })
}

fn restore_slots<const N: usize>(
    grads: &mut [Option<Vec<f64>>],
    idx: [usize; N],
    bufs: [Option<Vec<f64>>; N],
) {
    for (i, buf) in idx.into_iter().zip(bufs) {
        let Some(buf) = buf else { continue };
        match &mut grads[i] {
            Some(existing) => existing.iter_mut().zip(&buf).for_each(|(e, b)| *e += b),
            empty => *empty = Some(buf),
        }
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Dense { x, w, b } => {
            let idx = [*x, *w, *b];
            let mut bufs = take_slots(nodes, grads, idx);
            let [gx, gw, gb] = &mut bufs;
            ops::dense_backward(
                &nodes[*x].value,
                &nodes[*w].value,
                g,
                DenseGrads {
                    x: gx.as_deref_mut(),
                    w: gw.as_deref_mut(),
                    b: gb.as_deref_mut(),
                },
            );
            restore_slots(grads, idx, bufs);
        }
        Op::Conv2d {
            x,
            w,
            b,
            geometry,
            cols,
        } => {
            let idx = [*x, *w, *b];
            let mut bufs = take_slots(nodes, grads, idx);
            let [gx, gw, gb] = &mut bufs;
            ops::conv2d_backward(
                geometry,
                cols,
                &nodes[*w].value,
                g,
                ConvGrads {
                    x: gx.as_deref_mut(),
                    filters: gw.as_deref_mut(),
                    bias: gb.as_deref_mut(),
                },
            );
            restore_slots(grads, idx, bufs);
        }
        Op::ConvReluPool { x, w, b, cache } => {
            let idx = [*x, *w, *b];
            let mut bufs = take_slots(nodes, grads, idx);
            let [gx, gw, gb] = &mut bufs;
            ops::conv2d_relu_maxpool_backward(
                cache,
                &nodes[*w].value,
                node.value.data(),
                g,
                ConvGrads {
                    x: gx.as_deref_mut(),
                    filters: gw.as_deref_mut(),
                    bias: gb.as_deref_mut(),
                },
            );
            restore_slots(grads, idx, bufs);
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                ops::maxpool2d_backward(argmax, g, gx);
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((d, u), m) in gx.iter_mut().zip(g).zip(mask) {
                    *d += u * m;
                }
            }
        }
        Op::Sigmoid { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((d, u), s) in gx.iter_mut().zip(g).zip(node.value.data()) {
                    *d += u * s * (1.0 - s);
                }
            }
        }
        Op::Relu { x } => {
            let input = nodes[*x].value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((d, u), v) in gx.iter_mut().zip(g).zip(input) {
                    if *v > 0.0 {
                        *d += u;
                    }
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (d, u) in gx.iter_mut().zip(g) {
                    *d += u;
                }
            }
        }
        Op::Add { a, b } => {
            for i in [*a, *b] {
                if let Some(gi) = slot(nodes, grads, i) {
                    for (d, u) in gi.iter_mut().zip(g) {
                        *d += u;
                    }
                }
            }
        }
        Op::Mul { a, b } => {
            for (i, other) in [(*a, *b), (*b, *a)] {
                let other = nodes[other].value.data();
                if let Some(gi) = slot(nodes, grads, i) {
                    for ((d, u), o) in gi.iter_mut().zip(g).zip(other) {
                        *d += u * o;
                    }
                }
            }
        }
        Op::Scale { x, factor } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (d, u) in gx.iter_mut().zip(g) {
                    *d += u * factor;
                }
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mse { a, b } => {
            let n = nodes[*a].value.len() as f64;
            for (i, other) in [(*a, *b), (*b, *a)] {
                let (mine, theirs) = (nodes[i].value.data(), nodes[other].value.data());
                if let Some(gi) = slot(nodes, grads, i) {
                    for ((d, p), q) in gi.iter_mut().zip(mine).zip(theirs) {
                        *d += g[0] * 2.0 * (p - q) / n;
                    }
                }
            }
        }
        Op::Bce { p, y } => {
            let n = nodes[*p].value.len() as f64;
            let (pv, yv) = (nodes[*p].value.data(), nodes[*y].value.data());
            if let Some(gp) = slot(nodes, grads, *p) {
                for ((d, &pi), &yi) in gp.iter_mut().zip(pv).zip(yv) {
                    *d += g[0] * ops::bce_grad(pi, yi, n);
                }
            }
        }
        Op::KlStandard { mu, log_var, rows } => {
            let scale = g[0] / (*rows).max(1) as f64;
            let mv = nodes[*mu].value.data();
            let lv = nodes[*log_var].value.data();
            if let Some(gm) = slot(nodes, grads, *mu) {
                for (d, m) in gm.iter_mut().zip(mv) {
                    *d += scale * m;
                }
            }
            if let Some(gl) = slot(nodes, grads, *log_var) {
                for (d, l) in gl.iter_mut().zip(lv) {
                    *d += scale * 0.5 * (l.exp() - 1.0);
                }
            }
        }
        Op::L1 { x, factor } => {
            let xv = nodes[*x].value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (d, v) in gx.iter_mut().zip(xv) {
                    *d += g[0] * factor * ops::sign(*v);
                }
            }
        }
        Op::Reparameterize { mu, log_var, noise } => {
            if let Some(gm) = slot(nodes, grads, *mu) {
                for (d, u) in gm.iter_mut().zip(g) {
                    *d += u;
                }
            }
            let lv = nodes[*log_var].value.data();
            if let Some(gl) = slot(nodes, grads, *log_var) {
                for (((d, u), l), e) in gl.iter_mut().zip(g).zip(lv).zip(noise) {
                    *d += u * e * 0.5 * (0.5 * l).exp();
                }
            }
        }
    }
}

/// Gradients of a scalar loss with respect to every [`Tape::param`] leaf.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Result<&Tensor> {
        if v.tape != self.tape {
            return Err(Error::NotOnTape);
        }
        self.leaves.get(&v.index).ok_or(Error::NotOnTape)
    }

    pub fn take(&mut self, v: Var) -> Result<Tensor> {
        if v.tape != self.tape {
            return Err(Error::NotOnTape);
        }
        self.leaves.remove(&v.index).ok_or(Error::NotOnTape)
    }

    pub fn all_finite(&self) -> bool {
        self.leaves.values().all(Tensor::all_finite)
    }
}
