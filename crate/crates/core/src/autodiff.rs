//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order; since parents are
//! always created before children, reverse creation order is a valid
//! topological order and `backward` visits each node once.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a 1-D convolution over `[batch, time, channels]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub groups: usize,
}

impl Conv1dSpec {
    pub fn output_len(&self, t_in: usize, kernel: usize) -> Option<usize> {
        let padded = t_in + self.pad_left + self.pad_right;
        let span = self.dilation * (kernel - 1) + 1;
        if kernel == 0 || self.stride == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    MatMul {
        a: Var,
        b: Var,
        batched: bool,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        a: Var,
        inv_std: Vec<S>,
    },
    BatchNorm {
        a: Var,
        inv_std: Vec<S>,
    },
    Normalize {
        a: Var,
        inv_std: Vec<S>,
    },
    Conv1d {
        x: Var,
        w: Var,
        spec: Conv1dSpec,
        wt: Vec<S>,
    },
    Log(Var),
    Sum(Var),
    Mean(Var),
    L2NormLast(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    IndexSelect {
        table: Var,
        indices: Vec<usize>,
    },
    Select {
        a: Var,
        flat: Vec<usize>,
    },
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
    op: Op<S>,
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Biased variance (the one used for normalization).
    pub var: Vec<S>,
    /// Number of rows the statistics were computed over.
    pub count: usize,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    track_params: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_ok(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            track_params: true,
        }
    }

    /// A graph whose bound parameters do not require gradients (inference).
    pub fn inference() -> Self {
        Graph {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a named parameter from `store`; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let entry = store
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name:?}")))?;
        let v = self.leaf(entry.clone(), self.track_params && store.is_trainable(name));
        self.param_index.insert(name.to_string(), v);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// `(name, node)` pairs of parameters bound so far, in binding order.
    pub fn bound_params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Gradients of every bound trainable parameter after [`Graph::backward`].
    pub fn param_grads(&self) -> Vec<(String, Tensor<S>)> {
        self.params
            .iter()
            .filter(|(_, v)| self.requires_grad(*v))
            .map(|(n, v)| {
                let g = self
                    .grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
                (n.clone(), g)
            })
            .collect()
    }

    // ---- elementwise -------------------------------------------------

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcast_ok(sa, sb) {
            return Err(Error::shape(
                op,
                format!("{sa:?} and {sb:?} are not broadcast-compatible"),
            ));
        }
        Ok(())
    }

    /// `a + b`, where `b`'s shape is a trailing suffix of `a`'s (or vice versa).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if !broadcast_ok(self.shape(a), self.shape(b))
            && broadcast_ok(self.shape(b), self.shape(a))
        {
            (b, a)
        } else {
            (a, b)
        };
        self.binary_shapes("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = broadcast_map(va.data(), vb.data(), |x, y| x + y);
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    /// `a - b` with `b` broadcast over leading axes of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("sub", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = broadcast_map(va.data(), vb.data(), |x, y| x - y);
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if !broadcast_ok(self.shape(a), self.shape(b))
            && broadcast_ok(self.shape(b), self.shape(a))
        {
            (b, a)
        } else {
            (a, b)
        };
        self.binary_shapes("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = broadcast_map(va.data(), vb.data(), |x, y| x * y);
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.requires_grad(a);
        self.push(out, rg, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| if x > S::zero() { x } else { S::zero() });
        let rg = self.requires_grad(a);
        self.push(out, rg, Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.ln());
        let rg = self.requires_grad(a);
        self.push(out, rg, Op::Log(a))
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    /// Forward value is exactly `quantized`; the backward pass hands the
    /// upstream gradient to `z` unchanged.
    pub fn straight_through(&mut self, z: Var, quantized: Tensor<S>) -> Result<Var> {
        if quantized.shape() != self.shape(z) {
            return Err(Error::shape(
                "straight_through",
                format!("{:?} vs {:?}", self.shape(z), quantized.shape()),
            ));
        }
        let rg = self.requires_grad(z);
        Ok(self.push(quantized, rg, Op::StraightThrough(z)))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.requires_grad(a);
        self.push(out, rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / S::of_usize(v.len().max(1)));
        let rg = self.requires_grad(a);
        self.push(out, rg, Op::Mean(a))
    }

    /// Euclidean norm over the last axis: `[.., n] -> [..]`.
    pub fn l2_norm_last(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let shape = v.shape();
        if shape.is_empty() {
            return Err(Error::shape("l2_norm_last", "rank-0 input"));
        }
        let w = shape[shape.len() - 1];
        let data: Vec<S> = v
            .data()
            .chunks(w.max(1))
            .map(|r| r.iter().map(|&x| x * x).sum::<S>().sqrt())
            .collect();
        let out = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(out, rg, Op::L2NormLast(a)))
    }

    // ---- shape -------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(out, rg, Op::Reshape(a)))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let mut seen = vec![false; v.rank()];
        if axes.len() != v.rank()
            || axes
                .iter()
                .any(|&x| x >= v.rank() || std::mem::replace(&mut seen[x], true))
        {
            return Err(Error::shape(
                "permute",
                format!("axes {axes:?} for shape {:?}", v.shape()),
            ));
        }
        let (data, shape) = permute_data(v.data(), v.shape(), axes);
        let out = Tensor::new(shape, data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(
            out,
            rg,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(Error::shape("transpose", format!("rank {r} < 2")));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} for shape {base:?}"),
            ));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{base:?} vs {s:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let mut data =
            Vec::with_capacity(outer * total * base[axis + 1..].iter().product::<usize>());
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let chunk = v.len() / outer.max(1);
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|p| self.requires_grad(*p));
        Ok(self.push(
            out,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Row lookup into a `[n, d]` table (embedding / codebook gather).
    pub fn index_select(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape(
                "index_select",
                format!("table shape {:?}", t.shape()),
            ));
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= n {
                return Err(Error::shape("index_select", format!("index {i} >= {n}")));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![indices.len(), d], data)?;
        let rg = self.requires_grad(table);
        Ok(self.push(
            out,
            rg,
            Op::IndexSelect {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Picks flat elements of `a` into a 1-D tensor.
    pub fn select(&mut self, a: Var, flat: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let mut data = Vec::with_capacity(flat.len());
        for &i in flat {
            if i >= v.len() {
                return Err(Error::shape(
                    "select",
                    format!("flat index {i} >= {}", v.len()),
                ));
            }
            data.push(v.data()[i]);
        }
        let out = Tensor::new(vec![flat.len()], data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(
            out,
            rg,
            Op::Select {
                a,
                flat: flat.to_vec(),
            },
        ))
    }

    // ---- linear algebra ------------------------------------------------

    /// `[.., m, k] x [k, n]` (weight broadcast) or `[.., m, k] x [.., k, n]`
    /// with identical leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{sa:?} x {sb:?}: inner extents differ"),
            ));
        }
        let batched = sb.len() > 2;
        if batched && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape(
                "matmul",
                format!("{sa:?} x {sb:?}: batch extents differ"),
            ));
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![S::zero(); numel(&shape)];
        if batched {
            let batches = numel(&sa[..sa.len() - 2]);
            for bi in 0..batches {
                mm(
                    &va[bi * m * k..(bi + 1) * m * k],
                    &vb[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        } else {
            let rows = numel(&sa[..sa.len() - 1]);
            mm(va, vb, &mut out, rows, k, n);
        }
        let out = Tensor::new(shape, out)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, rg, Op::MatMul { a, b, batched }))
    }

    // ---- normalization -------------------------------------------------

    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let w = last_extent("softmax", v)?;
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(w) {
            softmax_in_place(row);
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(out, rg, Op::Softmax(a)))
    }

    pub fn log_softmax_last(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let w = last_extent("log_softmax", v)?;
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(w) {
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<S>().ln();
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(out, rg, Op::LogSoftmax(a)))
    }

    /// Normalizes each row over the last axis to zero mean / unit variance (no affine).
    pub fn layer_norm_last(&mut self, a: Var, eps: S) -> Result<Var> {
        let v = self.value(a);
        let w = last_extent("layer_norm", v)?;
        let nw = S::of_usize(w);
        let mut data = v.data().to_vec();
        let mut inv_std = Vec::with_capacity(v.len() / w);
        for row in data.chunks_mut(w) {
            let mu = row.iter().copied().sum::<S>() / nw;
            let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<S>() / nw;
            let inv = S::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mu) * inv;
            }
            inv_std.push(inv);
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(out, rg, Op::LayerNorm { a, inv_std }))
    }

    /// Training-mode batch normalization over the channel (last) axis; statistics
    /// pool every leading position. Returns the normalized node (no affine) and
    /// the batch statistics.
    pub fn batch_norm_train(&mut self, a: Var, eps: S) -> Result<(Var, BatchStats<S>)> {
        let v = self.value(a);
        let c = last_extent("batch_norm", v)?;
        let rows = v.len() / c;
        let nr = S::of_usize(rows);
        let mut mean = vec![S::zero(); c];
        for row in v.data().chunks(c) {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m = *m + x;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / nr);
        let mut var = vec![S::zero(); c];
        for row in v.data().chunks(c) {
            for ((s, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s = *s + (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|s| *s = *s / nr);
        let inv_std: Vec<S> = var.iter().map(|&s| S::one() / (s + eps).sqrt()).collect();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(c) {
            for ((x, &m), &inv) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *x = (*x - m) * inv;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.requires_grad(a);
        let stats = BatchStats {
            mean,
            var,
            count: rows,
        };
        Ok((self.push(out, rg, Op::BatchNorm { a, inv_std }), stats))
    }

    /// Inference-mode normalization with fixed per-channel statistics.
    pub fn normalize_fixed(&mut self, a: Var, mean: &[S], var: &[S], eps: S) -> Result<Var> {
        let v = self.value(a);
        let c = last_extent("normalize_fixed", v)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(
                "normalize_fixed",
                format!(
                    "{} channels, stats of length {}/{}",
                    c,
                    mean.len(),
                    var.len()
                ),
            ));
        }
        let inv_std: Vec<S> = var.iter().map(|&s| S::one() / (s + eps).sqrt()).collect();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(c) {
            for ((x, &m), &inv) in row.iter_mut().zip(mean).zip(&inv_std) {
                *x = (*x - m) * inv;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(out, rg, Op::Normalize { a, inv_std }))
    }

    // ---- convolution ---------------------------------------------------

    /// 1-D convolution. `x`: `[batch, time, c_in]`, `w`: `[c_out, c_in / groups, k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, spec: Conv1dSpec) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 {
            return Err(Error::shape(
                "conv1d",
                format!("input {sx:?}, weight {sw:?}"),
            ));
        }
        let (b, t_in, c_in) = (sx[0], sx[1], sx[2]);
        let (c_out, cig, k) = (sw[0], sw[1], sw[2]);
        let g = spec.groups;
        if g == 0 || spec.dilation == 0 || c_in % g != 0 || c_out % g != 0 || cig != c_in / g {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "input {sx:?}, weight {sw:?}, groups {g}, dilation {}",
                    spec.dilation
                ),
            ));
        }
        let t_out = spec.output_len(t_in, k).ok_or_else(|| {
            Error::shape(
                "conv1d",
                format!(
                    "kernel {k} (dilation {}) exceeds padded input {}",
                    spec.dilation,
                    t_in + spec.pad_left + spec.pad_right
                ),
            )
        })?;
        let cog = c_out / g;
        // wt layout: [k][g][cig][cog]
        let wv = self.value(w).data();
        let mut wt = vec![S::zero(); wv.len()];
        for o in 0..c_out {
            let (gi, oo) = (o / cog, o % cog);
            for ci in 0..cig {
                for j in 0..k {
                    wt[((j * g + gi) * cig + ci) * cog + oo] = wv[(o * cig + ci) * k + j];
                }
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); b * t_out * c_out];
        if g == 1 {
            let col = im2col(xv, [b, t_in, c_in, t_out], k, &spec);
            mm(&col, &wt, &mut out, b * t_out, k * c_in, c_out);
        } else {
            self.grouped_conv(xv, &wt, &mut out, [b, t_in, c_in, t_out, c_out, k], &spec);
        }
        let out = Tensor::new(vec![b, t_out, c_out], out)?;
        let rg = self.requires_grad(x) || self.requires_grad(w);
        Ok(self.push(out, rg, Op::Conv1d { x, w, spec, wt }))
    }

    fn grouped_conv(&self, xv: &[S], wt: &[S], out: &mut [S], dims: [usize; 6], spec: &Conv1dSpec) {
        let [b, t_in, c_in, t_out, c_out, k] = dims;
        let g = spec.groups;
        let (cig, cog) = (c_in / g, c_out / g);
        for bi in 0..b {
            for t in 0..t_out {
                let orow = &mut out[(bi * t_out + t) * c_out..(bi * t_out + t + 1) * c_out];
                for j in 0..k {
                    let Some(ti) = tap(t, j, spec, t_in) else {
                        continue;
                    };
                    let xrow = &xv[(bi * t_in + ti) * c_in..(bi * t_in + ti + 1) * c_in];
                    if cig == 1 && cog == 1 {
                        let wrow = &wt[j * c_out..][..c_out];
                        for ((o, &x), &w) in orow.iter_mut().zip(xrow).zip(wrow) {
                            *o = *o + x * w;
                        }
                        continue;
                    }
                    for gi in 0..g {
                        let og = &mut orow[gi * cog..(gi + 1) * cog];
                        for ci in 0..cig {
                            let xval = xrow[gi * cig + ci];
                            let wrow = &wt[((j * g + gi) * cig + ci) * cog..][..cog];
                            for (o, &wv) in og.iter_mut().zip(wrow) {
                                *o = *o + xval * wv;
                            }
                        }
                    }
                }
            }
        }
    }

    // ---- backward ------------------------------------------------------

    /// Accumulates `d loss / d node` for every node that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), S::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(node.op, Op::Sub(..));
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    let nb = self.value(*b).len();
                    let mut gb = vec![S::zero(); nb];
                    for chunk in gd.chunks_exact(nb) {
                        for (acc, &x) in gb.iter_mut().zip(chunk) {
                            *acc = *acc + x;
                        }
                    }
                    if negate {
                        gb.iter_mut().for_each(|x| *x = -*x);
                    }
                    let t = Tensor::new(self.shape(*b).to_vec(), gb).expect("shape");
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let nb = vb.len();
                if self.requires_grad(*a) {
                    let ga = broadcast_map(gd, vb, |x, y| x * y);
                    self.accumulate(
                        grads,
                        *a,
                        Tensor::new(out.shape().to_vec(), ga).expect("shape"),
                    );
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![S::zero(); nb];
                    for (gc, ac) in gd.chunks_exact(nb).zip(va.chunks_exact(nb)) {
                        for ((acc, &x), &y) in gb.iter_mut().zip(gc).zip(ac) {
                            *acc = *acc + x * y;
                        }
                    }
                    let t = Tensor::new(self.shape(*b).to_vec(), gb).expect("shape");
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * *c)),
            Op::MatMul { a, b, batched } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if *batched {
                    let batches = va.len() / (m * k);
                    if self.requires_grad(*a) {
                        let mut ga = vec![S::zero(); va.len()];
                        for bi in 0..batches {
                            mm_bt(
                                &gd[bi * m * n..][..m * n],
                                &vb[bi * k * n..][..k * n],
                                &mut ga[bi * m * k..][..m * k],
                                m,
                                n,
                                k,
                            );
                        }
                        self.accumulate(grads, *a, Tensor::new(sa.to_vec(), ga).expect("shape"));
                    }
                    if self.requires_grad(*b) {
                        let mut gb = vec![S::zero(); vb.len()];
                        for bi in 0..batches {
                            mm_at(
                                &va[bi * m * k..][..m * k],
                                &gd[bi * m * n..][..m * n],
                                &mut gb[bi * k * n..][..k * n],
                                m,
                                k,
                                n,
                            );
                        }
                        self.accumulate(grads, *b, Tensor::new(sb.to_vec(), gb).expect("shape"));
                    }
                } else {
                    let rows = va.len() / k;
                    if self.requires_grad(*a) {
                        let mut ga = vec![S::zero(); va.len()];
                        mm_bt(gd, vb, &mut ga, rows, n, k);
                        self.accumulate(grads, *a, Tensor::new(sa.to_vec(), ga).expect("shape"));
                    }
                    if self.requires_grad(*b) {
                        let mut gb = vec![S::zero(); vb.len()];
                        mm_at(va, gd, &mut gb, rows, k, n);
                        self.accumulate(grads, *b, Tensor::new(sb.to_vec(), gb).expect("shape"));
                    }
                }
            }
            Op::Permute { a, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let (data, shape) = permute_data(gd, out.shape(), &inv);
                self.accumulate(grads, *a, Tensor::new(shape, data).expect("shape"));
            }
            Op::Reshape(a) => {
                let t = Tensor::new(self.shape(*a).to_vec(), gd.to_vec()).expect("shape");
                self.accumulate(grads, *a, t);
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                let ga = gd
                    .iter()
                    .zip(va)
                    .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                    .collect();
                self.accumulate(
                    grads,
                    *a,
                    Tensor::new(out.shape().to_vec(), ga).expect("shape"),
                );
            }
            Op::Softmax(a) => {
                let w = *out.shape().last().unwrap();
                let mut ga = Vec::with_capacity(gd.len());
                for (gr, yr) in gd.chunks(w).zip(out.data().chunks(w)) {
                    let dot: S = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                    ga.extend(gr.iter().zip(yr).map(|(&g, &y)| y * (g - dot)));
                }
                self.accumulate(
                    grads,
                    *a,
                    Tensor::new(out.shape().to_vec(), ga).expect("shape"),
                );
            }
            Op::LogSoftmax(a) => {
                let w = *out.shape().last().unwrap();
                let mut ga = Vec::with_capacity(gd.len());
                for (gr, yr) in gd.chunks(w).zip(out.data().chunks(w)) {
                    let s: S = gr.iter().copied().sum();
                    ga.extend(gr.iter().zip(yr).map(|(&g, &y)| g - y.exp() * s));
                }
                self.accumulate(
                    grads,
                    *a,
                    Tensor::new(out.shape().to_vec(), ga).expect("shape"),
                );
            }
            Op::LayerNorm { a, inv_std } => {
                let w = *out.shape().last().unwrap();
                let nw = S::of_usize(w);
                let mut ga = Vec::with_capacity(gd.len());
                for ((gr, yr), &inv) in gd.chunks(w).zip(out.data().chunks(w)).zip(inv_std) {
                    let sg: S = gr.iter().copied().sum();
                    let sgy: S = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                    ga.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(&g, &y)| inv / nw * (nw * g - sg - y * sgy)),
                    );
                }
                self.accumulate(
                    grads,
                    *a,
                    Tensor::new(out.shape().to_vec(), ga).expect("shape"),
                );
            }
            Op::BatchNorm { a, inv_std } => {
                let c = inv_std.len();
                let rows = gd.len() / c;
                let nr = S::of_usize(rows);
                let mut sg = vec![S::zero(); c];
                let mut sgy = vec![S::zero(); c];
                for (gr, yr) in gd.chunks(c).zip(out.data().chunks(c)) {
                    for ch in 0..c {
                        sg[ch] = sg[ch] + gr[ch];
                        sgy[ch] = sgy[ch] + gr[ch] * yr[ch];
                    }
                }
                let mut ga = Vec::with_capacity(gd.len());
                for (gr, yr) in gd.chunks(c).zip(out.data().chunks(c)) {
                    for ch in 0..c {
                        ga.push(inv_std[ch] / nr * (nr * gr[ch] - sg[ch] - yr[ch] * sgy[ch]));
                    }
                }
                self.accumulate(
                    grads,
                    *a,
                    Tensor::new(out.shape().to_vec(), ga).expect("shape"),
                );
            }
            Op::Normalize { a, inv_std } => {
                let c = inv_std.len();
                let ga = gd
                    .iter()
                    .enumerate()
                    .map(|(k, &g)| g * inv_std[k % c])
                    .collect();
                self.accumulate(
                    grads,
                    *a,
                    Tensor::new(out.shape().to_vec(), ga).expect("shape"),
                );
            }
            Op::Conv1d { x, w, spec, wt } => self.conv1d_backward(*x, *w, spec, wt, g, grads),
            Op::Log(a) => {
                let va = self.value(*a).data();
                let ga = gd.iter().zip(va).map(|(&g, &x)| g / x).collect();
                self.accumulate(
                    grads,
                    *a,
                    Tensor::new(out.shape().to_vec(), ga).expect("shape"),
                );
            }
            Op::Sum(a) => {
                let s = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::full(&s, gd[0]));
            }
            Op::Mean(a) => {
                let s = self.shape(*a).to_vec();
                let n = S::of_usize(numel(&s).max(1));
                self.accumulate(grads, *a, Tensor::full(&s, gd[0] / n));
            }
            Op::L2NormLast(a) => {
                let va = self.value(*a);
                let w = *va.shape().last().unwrap();
                let mut ga = Vec::with_capacity(va.len());
                for ((xr, &nrm), &g) in va.data().chunks(w).zip(out.data()).zip(gd) {
                    if nrm > S::zero() {
                        ga.extend(xr.iter().map(|&x| g * x / nrm));
                    } else {
                        ga.extend(std::iter::repeat_n(S::zero(), w));
                    }
                }
                self.accumulate(
                    grads,
                    *a,
                    Tensor::new(va.shape().to_vec(), ga).expect("shape"),
                );
            }
            Op::Concat { parts, axis } => {
                let outer: usize = out.shape()[..*axis].iter().product();
                let mut offset = 0;
                let row = out.len() / outer.max(1);
                for p in parts {
                    let pv = self.value(*p);
                    let chunk = pv.len() / outer.max(1);
                    if self.requires_grad(*p) {
                        let mut gp = Vec::with_capacity(pv.len());
                        for o in 0..outer {
                            gp.extend_from_slice(&gd[o * row + offset..][..chunk]);
                        }
                        self.accumulate(
                            grads,
                            *p,
                            Tensor::new(pv.shape().to_vec(), gp).expect("shape"),
                        );
                    }
                    offset += chunk;
                }
            }
            Op::IndexSelect { table, indices } => {
                let ts = self.shape(*table).to_vec();
                let d = ts[1];
                let mut gt = vec![S::zero(); ts[0] * d];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..d {
                        gt[i * d + c] = gt[i * d + c] + gd[r * d + c];
                    }
                }
                self.accumulate(grads, *table, Tensor::new(ts, gt).expect("shape"));
            }
            Op::Select { a, flat } => {
                let s = self.shape(*a).to_vec();
                let mut ga = vec![S::zero(); numel(&s)];
                for (&i, &x) in flat.iter().zip(gd) {
                    ga[i] = ga[i] + x;
                }
                self.accumulate(grads, *a, Tensor::new(s, ga).expect("shape"));
            }
            Op::StraightThrough(z) => self.accumulate(grads, *z, g.clone()),
        }
    }

    fn conv1d_backward(
        &self,
        x: Var,
        w: Var,
        spec: &Conv1dSpec,
        wt: &[S],
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (b, t_in, c_in) = (sx[0], sx[1], sx[2]);
        let (c_out, cig, k) = (sw[0], sw[1], sw[2]);
        let groups = spec.groups;
        let cog = c_out / groups;
        let t_out = g.shape()[1];
        let gd = g.data();
        let xv = self.value(x).data();
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        let mut gx = if need_x {
            vec![S::zero(); xv.len()]
        } else {
            Vec::new()
        };
        let mut gwt = if need_w {
            vec![S::zero(); wt.len()]
        } else {
            Vec::new()
        };
        if groups == 1 {
            let (rows, width) = (b * t_out, k * c_in);
            let col = im2col(xv, [b, t_in, c_in, t_out], k, spec);
            if need_w {
                mm_at(&col, gd, &mut gwt, rows, width, c_out);
            }
            if need_x {
                let mut gcol = vec![S::zero(); rows * width];
                mm_bt(gd, wt, &mut gcol, rows, c_out, width);
                for bi in 0..b {
                    for t in 0..t_out {
                        let row = &gcol[(bi * t_out + t) * width..][..width];
                        for j in 0..k {
                            let Some(ti) = tap(t, j, spec, t_in) else {
                                continue;
                            };
                            for (acc, &v) in gx[(bi * t_in + ti) * c_in..][..c_in]
                                .iter_mut()
                                .zip(&row[j * c_in..(j + 1) * c_in])
                            {
                                *acc = *acc + v;
                            }
                        }
                    }
                }
            }
        } else {
            for bi in 0..b {
                for t in 0..t_out {
                    let grow = &gd[(bi * t_out + t) * c_out..][..c_out];
                    for j in 0..k {
                        let Some(ti) = tap(t, j, spec, t_in) else {
                            continue;
                        };
                        let xoff = (bi * t_in + ti) * c_in;
                        if cig == 1 && cog == 1 {
                            let wrow = &wt[j * c_out..][..c_out];
                            if need_x {
                                let gxr = &mut gx[xoff..xoff + c_in];
                                for ((acc, &gv), &w) in gxr.iter_mut().zip(grow).zip(wrow) {
                                    *acc = *acc + gv * w;
                                }
                            }
                            if need_w {
                                let gwr = &mut gwt[j * c_out..][..c_out];
                                for ((acc, &gv), &x) in
                                    gwr.iter_mut().zip(grow).zip(&xv[xoff..xoff + c_in])
                                {
                                    *acc = *acc + x * gv;
                                }
                            }
                            continue;
                        }
                        for gi in 0..groups {
                            let gg = &grow[gi * cog..(gi + 1) * cog];
                            for ci in 0..cig {
                                let widx = ((j * groups + gi) * cig + ci) * cog;
                                if need_x {
                                    let wrow = &wt[widx..widx + cog];
                                    let dot: S = gg.iter().zip(wrow).map(|(&a, &b)| a * b).sum();
                                    gx[xoff + gi * cig + ci] = gx[xoff + gi * cig + ci] + dot;
                                }
                                if need_w {
                                    let xval = xv[xoff + gi * cig + ci];
                                    for (acc, &gv) in gwt[widx..widx + cog].iter_mut().zip(gg) {
                                        *acc = *acc + xval * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            self.accumulate(grads, x, Tensor::new(sx, gx).expect("shape"));
        }
        if need_w {
            let mut gw = vec![S::zero(); wt.len()];
            for o in 0..c_out {
                let (gi, oo) = (o / cog, o % cog);
                for ci in 0..cig {
                    for j in 0..k {
                        gw[(o * cig + ci) * k + j] = gwt[((j * groups + gi) * cig + ci) * cog + oo];
                    }
                }
            }
            self.accumulate(grads, w, Tensor::new(sw, gw).expect("shape"));
        }
    }
}

/// `f(a[i], b[i mod |b|])` for `b` broadcast over the leading axes of `a`.
fn broadcast_map<S: Scalar>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    let mut out = Vec::with_capacity(a.len());
    for chunk in a.chunks_exact(b.len()) {
        out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
    }
    out
}

#[inline]
fn tap(t: usize, j: usize, spec: &Conv1dSpec, t_in: usize) -> Option<usize> {
    let pos = t * spec.stride + j * spec.dilation;
    if pos < spec.pad_left {
        return None;
    }
    let ti = pos - spec.pad_left;
    (ti < t_in).then_some(ti)
}

fn last_extent<S: Scalar>(op: &'static str, v: &Tensor<S>) -> Result<usize> {
    match v.shape().last() {
        Some(&w) if w > 0 => Ok(w),
        _ => Err(Error::shape(
            op,
            format!("needs a non-empty last axis, got {:?}", v.shape()),
        )),
    }
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn mm<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    S::gemm(
        [m, k, n],
        (a, k as isize, 1),
        (b, n as isize, 1),
        (out, n as isize, 1),
    );
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
fn mm_bt<S: Scalar>(g: &[S], b: &[S], out: &mut [S], m: usize, n: usize, k: usize) {
    S::gemm(
        [m, n, k],
        (g, n as isize, 1),
        (b, 1, n as isize),
        (out, k as isize, 1),
    );
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
fn mm_at<S: Scalar>(a: &[S], g: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    S::gemm(
        [k, m, n],
        (a, 1, k as isize),
        (g, n as isize, 1),
        (out, n as isize, 1),
    );
}

/// Unfolds `x: [b, t_in, c_in]` into rows `[b * t_out, k * c_in]`, zero at padding taps.
fn im2col<S: Scalar>(xv: &[S], dims: [usize; 4], k: usize, spec: &Conv1dSpec) -> Vec<S> {
    let [b, t_in, c_in, t_out] = dims;
    let width = k * c_in;
    let mut col = vec![S::zero(); b * t_out * width];
    for bi in 0..b {
        for t in 0..t_out {
            let row = &mut col[(bi * t_out + t) * width..][..width];
            for j in 0..k {
                if let Some(ti) = tap(t, j, spec, t_in) {
                    row[j * c_in..(j + 1) * c_in]
                        .copy_from_slice(&xv[(bi * t_in + ti) * c_in..][..c_in]);
                }
            }
        }
    }
    col
}

fn permute_data<S: Copy>(data: &[S], shape: &[usize], axes: &[usize]) -> (Vec<S>, Vec<usize>) {
    let rank = shape.len();
    let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < new_shape[d] {
                break;
            }
            src -= strides[d] * new_shape[d];
            idx[d] = 0;
        }
    }
    (out, new_shape)
}

/// Central finite-difference check of every input's gradient.
///
/// `f` builds a scalar from the supplied input nodes. Returns the maximum over
/// all input elements of `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], step: f64, floor: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.shape(v)))
        })
        .collect();
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vs)?;
        Ok(g.value(l).item())
    };
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for e in 0..t.len() {
            let orig = t.data()[e];
            work[ti].data_mut()[e] = orig + step;
            let up = eval(&work)?;
            work[ti].data_mut()[e] = orig - step;
            let down = eval(&work)?;
            work[ti].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[ti].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
