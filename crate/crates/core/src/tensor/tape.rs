//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation in execution order, which is already
//! a topological order of the computation graph. [`Tape::backward`] consumes
//! the tape and walks it strictly in reverse, so each node's gradient is
//! complete before it is propagated to the node's inputs. Gradient
//! contributions accumulate by summation, which is what lets trainable
//! weight copies share a parameter leaf.

use super::{matmul_nn, matmul_nt, matmul_tn, Real, Tensor};
use crate::error::{Error, Result};
use std::collections::HashMap;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Recorded operation, holding whatever the backward pass needs.
#[derive(Debug)]
pub enum Op<F> {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: F },
    AddConst { a: Var },
    AddRowBias { a: Var, bias: Var },
    AddChannelBias { x: Var, bias: Var, spatial: usize },
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    TransposeLastTwo { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    SliceCols { a: Var, start: usize, len: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    SoftmaxLastDim { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: F },
    Silu { a: Var },
    Gelu { a: Var },
    MeanAxis { a: Var, axis: usize },
    SumAll { a: Var },
    MeanAll { a: Var },
    Mse { a: Var, b: Var },
    CosineRowwise { a: Var, b: Var },
    MaskedMeanRows { a: Var, keep: Vec<bool>, count: usize },
    RowNormalize { a: Var },
    ScaleByExp { a: Var, s: Var },
    CrossEntropyRows { logits: Var, targets: Vec<usize> },
    MaskRenormRows { a: Var, mask: Vec<bool>, eps: F },
    Conv2d(Box<ConvRecord<F>>),
    UpsampleNearest2x { x: Var },
    ChwToTokens { x: Var },
    TokensToChw { t: Var },
    PatchExtract { x: Var, patch: usize },
    Reshape { a: Var },
}

/// Saved geometry and the im2col buffer of a convolution.
#[derive(Debug)]
pub struct ConvRecord<F> {
    pub x: Var,
    pub w: Var,
    pub b: Option<Var>,
    pub stride: usize,
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    cols: Vec<F>,
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients of the leaves that required them, extracted by a completed
/// backward pass. Named parameter gradients drive the optimizer; by-var
/// lookup serves the gradient-check harness.
pub struct Gradients<F> {
    by_var: HashMap<usize, Vec<F>>,
    names: HashMap<String, usize>,
}

impl<F: Real> Gradients<F> {
    pub fn of(&self, v: Var) -> Option<&[F]> {
        self.by_var.get(&v.0).map(|g| g.as_slice())
    }

    pub fn named(&self, name: &str) -> Result<&[F]> {
        let idx = self
            .names
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no gradient recorded for parameter {name}")))?;
        Ok(self.by_var[idx].as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.keys().map(|s| s.as_str())
    }

    /// Accumulate `other` into `into`, keyed by parameter name. Used to fold
    /// per-sample gradients of a batch in a fixed order.
    pub fn fold_named(&self, into: &mut HashMap<String, Vec<F>>) {
        for (name, idx) in &self.names {
            let g = &self.by_var[idx];
            match into.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g.iter()) {
                        *a += *b;
                    }
                }
                None => {
                    into.insert(name.clone(), g.clone());
                }
            }
        }
    }
}

/// Computation graph recorder. One tape per forward pass, confined to one
/// thread; independent tapes may run on as many threads as needed.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    params: Vec<(String, Var)>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(id)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// Constant input: no gradient flows into it.
    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.clone(), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Unnamed differentiable leaf; gradient retrieved positionally.
    pub fn leaf(&mut self, t: &Tensor<F>, requires_grad: bool) -> Var {
        self.push(t.clone(), Op::Leaf, requires_grad)
    }

    /// Named trainable parameter. Names must be unique per tape; they key
    /// the gradient map consumed by the optimizer.
    pub fn param(&mut self, name: impl Into<String>, t: &Tensor<F>) -> Var {
        let name = name.into();
        debug_assert!(
            !self.params.iter().any(|(n, _)| n == &name),
            "duplicate parameter name {name}"
        );
        let v = self.push(t.clone(), Op::Leaf, true);
        self.params.push((name, v));
        v
    }

    // ── Elementwise and shape ops ───────────────────────────────────────

    fn check_same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{op}: lhs shape {:?} vs rhs shape {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(self.nodes[b.0].value.data.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data }, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(self.nodes[b.0].value.data.iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data }, Op::Sub { a, b }, ng))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(self.nodes[b.0].value.data.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data }, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let data = self.nodes[a.0].value.data.iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(Tensor { shape, data }, Op::Scale { a, c }, ng)
    }

    /// Add a constant tensor (attention masks, affine shifts). No gradient
    /// flows into the constant.
    pub fn add_const(&mut self, a: Var, c: &Tensor<F>) -> Result<Var> {
        if self.shape(a) != c.shape.as_slice() {
            return Err(Error::Dimension(format!(
                "add_const: lhs shape {:?} vs const shape {:?}",
                self.shape(a),
                c.shape
            )));
        }
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(c.data.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        Ok(self.push(Tensor { shape, data }, Op::AddConst { a }, ng))
    }

    /// [n,d] + [d] row-broadcast bias.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "add_row_bias: matrix shape {sa:?} vs bias shape {sb:?}"
            )));
        }
        let (n, d) = (sa[0], sa[1]);
        let mut data = self.nodes[a.0].value.data.clone();
        let bv = &self.nodes[bias.0].value.data;
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += bv[j];
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(
            Tensor {
                shape: vec![n, d],
                data,
            },
            Op::AddRowBias { a, bias },
            ng,
        ))
    }

    /// [c,h,w] + [c] per-channel bias broadcast over the spatial plane.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 3 || sb.len() != 1 || sx[0] != sb[0] {
            return Err(Error::Dimension(format!(
                "add_channel_bias: image shape {sx:?} vs bias shape {sb:?}"
            )));
        }
        let spatial = sx[1] * sx[2];
        let mut data = self.nodes[x.0].value.data.clone();
        let bv = &self.nodes[bias.0].value.data;
        for c in 0..sx[0] {
            for s in 0..spatial {
                data[c * spatial + s] += bv[c];
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(
            Tensor {
                shape: sx,
                data,
            },
            Op::AddChannelBias { x, bias, spatial },
            ng,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul: lhs shape {sa:?} vs rhs shape {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![F::zero(); m * n];
        matmul_nn(
            &self.nodes[a.0].value.data,
            &self.nodes[b.0].value.data,
            &mut data,
            m,
            k,
            n,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::Matmul { a, b, m, k, n },
            ng,
        ))
    }

    pub fn transpose_last_two(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::Dimension(format!(
                "transpose_last_two expects a matrix, got shape {sa:?}"
            )));
        }
        let (r, c) = (sa[0], sa[1]);
        let src = &self.nodes[a.0].value.data;
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.needs(a);
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data,
            },
            Op::TransposeLastTwo { a },
            ng,
        ))
    }

    /// Concatenate matrices along axis 0 (rows) or 1 (columns). Axis-0
    /// concat of (a,d) and (b,d) yields (a+b,d) preserving input order.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        if axis > 1 {
            return Err(Error::Dimension(format!("concat: unsupported axis {axis}")));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 2 {
            return Err(Error::Dimension(format!(
                "concat expects matrices, got shape {first:?}"
            )));
        }
        let fixed_axis = 1 - axis;
        let mut out_along = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[fixed_axis] != first[fixed_axis] {
                return Err(Error::Dimension(format!(
                    "concat axis {axis}: shape {s:?} incompatible with {first:?}"
                )));
            }
            out_along += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = out_along;
        let mut data = vec![F::zero(); shape[0] * shape[1]];
        if axis == 0 {
            let mut offset = 0;
            for &p in parts {
                let src = &self.nodes[p.0].value.data;
                data[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        } else {
            let rows = shape[0];
            let mut col_offset = 0;
            for &p in parts {
                let s = self.shape(p).to_vec();
                let src = &self.nodes[p.0].value.data;
                for i in 0..rows {
                    let dst = i * shape[1] + col_offset;
                    data[dst..dst + s[1]].copy_from_slice(&src[i * s[1]..(i + 1) * s[1]]);
                }
                col_offset += s[1];
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || start + len > sa[1] {
            return Err(Error::Dimension(format!(
                "slice_cols [{start}..{}) out of shape {sa:?}",
                start + len
            )));
        }
        let (n, d) = (sa[0], sa[1]);
        let src = &self.nodes[a.0].value.data;
        let mut data = vec![F::zero(); n * len];
        for i in 0..n {
            data[i * len..(i + 1) * len].copy_from_slice(&src[i * d + start..i * d + start + len]);
        }
        let ng = self.needs(a);
        Ok(self.push(
            Tensor {
                shape: vec![n, len],
                data,
            },
            Op::SliceCols { a, start, len },
            ng,
        ))
    }

    /// Row lookup into a [v,d] table, duplicates allowed; gradients
    /// scatter-add back onto the table rows.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::Dimension(format!(
                "gather_rows expects a matrix table, got {st:?}"
            )));
        }
        let (v, d) = (st[0], st[1]);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocabulary(format!(
                    "row id {id} out of table with {v} rows"
                )));
            }
        }
        let src = &self.nodes[table.0].value.data;
        let mut data = vec![F::zero(); ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&src[id * d..(id + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), d],
                data,
            },
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.numel() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape(a)
            )));
        }
        let data = self.nodes[a.0].value.data.clone();
        let ng = self.needs(a);
        Ok(self.push(Tensor { shape, data }, Op::Reshape { a }, ng))
    }

    // ── Nonlinearities and normalizations ───────────────────────────────

    /// Numerically stabilized softmax over the last dimension; every
    /// last-dim slice of the output is non-negative and sums to one.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let n = *sa.last().ok_or_else(|| {
            Error::Dimension("softmax_lastdim on a zero-rank tensor".to_string())
        })?;
        if n == 0 {
            return Err(Error::Dimension("softmax_lastdim: empty last dim".into()));
        }
        let src = &self.nodes[a.0].value;
        if !src.all_finite() {
            return Err(Error::Numeric("softmax_lastdim: non-finite input".into()));
        }
        let mut data = vec![F::zero(); src.numel()];
        for (row_out, row_in) in data.chunks_mut(n).zip(src.data.chunks(n)) {
            let max = row_in.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for (o, &x) in row_out.iter_mut().zip(row_in.iter()) {
                let e = (x - max).exp();
                *o = e;
                sum += e;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(
            Tensor {
                shape: sa,
                data,
            },
            Op::SoftmaxLastDim { a },
            ng,
        ))
    }

    /// Row-wise layer normalization of [n,d] with per-column affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::Dimension(format!(
                "layer_norm expects [n,d], got {sx:?}"
            )));
        }
        let d = sx[1];
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm: affine shapes {:?}/{:?} vs feature dim {d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xv = &self.nodes[x.0].value.data;
        let g = &self.nodes[gamma.0].value.data;
        let b = &self.nodes[beta.0].value.data;
        let mut data = vec![F::zero(); xv.len()];
        let dn = F::from_usize(d);
        for (row_out, row_in) in data.chunks_mut(d).zip(xv.chunks(d)) {
            let mean = row_in.iter().cloned().sum::<F>() / dn;
            let var = row_in
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<F>()
                / dn;
            let inv_std = (var + eps).sqrt().recip();
            for j in 0..d {
                row_out[j] = (row_in[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor {
                shape: sx,
                data,
            },
            Op::LayerNorm { x, gamma, beta, eps },
            ng,
        ))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .map(|&x| x / (F::one() + (-x).exp()))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(Tensor { shape, data }, Op::Silu { a }, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = F::from_f64(0.044715);
        let half = F::from_f64(0.5);
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .map(|&x| half * x * (F::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(Tensor { shape, data }, Op::Gelu { a }, ng)
    }

    // ── Reductions and losses ───────────────────────────────────────────

    /// Mean of a matrix over one axis: axis 0 gives column means [d],
    /// axis 1 gives row means [n].
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || axis > 1 {
            return Err(Error::Dimension(format!(
                "mean_axis: shape {sa:?}, axis {axis}"
            )));
        }
        let (n, d) = (sa[0], sa[1]);
        let src = &self.nodes[a.0].value.data;
        let data = if axis == 0 {
            let inv = F::from_usize(n).recip();
            (0..d)
                .map(|j| (0..n).map(|i| src[i * d + j]).sum::<F>() * inv)
                .collect::<Vec<_>>()
        } else {
            let inv = F::from_usize(d).recip();
            src.chunks(d)
                .map(|row| row.iter().cloned().sum::<F>() * inv)
                .collect::<Vec<_>>()
        };
        let out_len = data.len();
        let ng = self.needs(a);
        Ok(self.push(
            Tensor {
                shape: vec![out_len],
                data,
            },
            Op::MeanAxis { a, axis },
            ng,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: F = self.nodes[a.0].value.data.iter().cloned().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel();
        let s: F = self.nodes[a.0].value.data.iter().cloned().sum();
        let ng = self.needs(a);
        self.push(
            Tensor::scalar(s / F::from_usize(n)),
            Op::MeanAll { a },
            ng,
        )
    }

    /// Mean squared error over all elements of two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mse", a, b)?;
        let n = F::from_usize(self.nodes[a.0].value.numel());
        let s: F = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(self.nodes[b.0].value.data.iter())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse { a, b }, ng))
    }

    /// Cosine similarity per row of two [n,d] matrices, output [n].
    pub fn cosine_rowwise(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("cosine_rowwise", a, b)?;
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::Dimension(format!(
                "cosine_rowwise expects matrices, got {sa:?}"
            )));
        }
        let (n, d) = (sa[0], sa[1]);
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut data = vec![F::zero(); n];
        for i in 0..n {
            let ra = &av[i * d..(i + 1) * d];
            let rb = &bv[i * d..(i + 1) * d];
            let na = ra.iter().map(|&x| x * x).sum::<F>().sqrt();
            let nb = rb.iter().map(|&x| x * x).sum::<F>().sqrt();
            if na == F::zero() || nb == F::zero() {
                return Err(Error::Numeric(format!(
                    "cosine_rowwise: zero-norm row at index {i}"
                )));
            }
            let dot = ra.iter().zip(rb.iter()).map(|(&x, &y)| x * y).sum::<F>();
            data[i] = dot / (na * nb);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor {
                shape: vec![n],
                data,
            },
            Op::CosineRowwise { a, b },
            ng,
        ))
    }

    /// Mean over the kept rows of [n,d] (output [d]) or kept entries of [n]
    /// (output [1]).
    pub fn masked_mean_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let n = sa[0];
        if keep.len() != n {
            return Err(Error::Dimension(format!(
                "masked_mean_rows: {} mask entries for {n} rows",
                keep.len()
            )));
        }
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::Contract("masked_mean_rows: empty selection".into()));
        }
        let d = if sa.len() == 2 { sa[1] } else { 1 };
        let src = &self.nodes[a.0].value.data;
        let inv = F::from_usize(count).recip();
        let mut data = vec![F::zero(); d];
        for (i, &k) in keep.iter().enumerate() {
            if k {
                for j in 0..d {
                    data[j] += src[i * d + j];
                }
            }
        }
        for v in data.iter_mut() {
            *v *= inv;
        }
        let out_shape = if sa.len() == 2 { vec![d] } else { vec![1] };
        let ng = self.needs(a);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::MaskedMeanRows {
                a,
                keep: keep.to_vec(),
                count,
            },
            ng,
        ))
    }

    /// Scale every row of [n,d] to unit L2 norm.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::Dimension(format!(
                "row_normalize expects a matrix, got {sa:?}"
            )));
        }
        let (n, d) = (sa[0], sa[1]);
        let src = &self.nodes[a.0].value.data;
        let mut data = vec![F::zero(); n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let norm = row.iter().map(|&x| x * x).sum::<F>().sqrt();
            if norm == F::zero() {
                return Err(Error::Numeric(format!(
                    "row_normalize: zero-norm row at index {i}"
                )));
            }
            for j in 0..d {
                data[i * d + j] = row[j] / norm;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(
            Tensor {
                shape: sa,
                data,
            },
            Op::RowNormalize { a },
            ng,
        ))
    }

    /// Multiply by exp of a scalar parameter; keeps a learnable temperature
    /// positive by construction.
    pub fn scale_by_exp(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].value.numel() != 1 {
            return Err(Error::Contract("scale_by_exp: scale must be scalar".into()));
        }
        let e = self.nodes[s.0].value.data[0].exp();
        let data = self.nodes[a.0].value.data.iter().map(|&x| x * e).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(s);
        Ok(self.push(Tensor { shape, data }, Op::ScaleByExp { a, s }, ng))
    }

    /// Mean cross entropy of [n,m] logits against one target class per row.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || targets.len() != sl[0] {
            return Err(Error::Dimension(format!(
                "cross_entropy_rows: logits {sl:?} vs {} targets",
                targets.len()
            )));
        }
        let (n, m) = (sl[0], sl[1]);
        for &t in targets {
            if t >= m {
                return Err(Error::Contract(format!(
                    "cross_entropy_rows: target {t} out of {m} classes"
                )));
            }
        }
        let src = &self.nodes[logits.0].value.data;
        let mut total = F::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &src[i * m..(i + 1) * m];
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<F>().ln() + max;
            total -= row[t] - lse;
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / F::from_usize(n)),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Zero each row outside the mask support and renormalize it to sum to
    /// one (with an epsilon guard on the denominator).
    pub fn mask_renorm_rows(&mut self, a: Var, mask: &[bool], eps: F) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || mask.len() != sa[1] {
            return Err(Error::Dimension(format!(
                "mask_renorm_rows: shape {sa:?} vs mask of {}",
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Contract("empty mask selection".into()));
        }
        let (n, d) = (sa[0], sa[1]);
        let src = &self.nodes[a.0].value.data;
        let mut data = vec![F::zero(); n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mut s = F::zero();
            for (j, &m) in mask.iter().enumerate() {
                if m {
                    s += row[j];
                }
            }
            let denom = s + eps;
            for (j, &m) in mask.iter().enumerate() {
                if m {
                    data[i * d + j] = row[j] / denom;
                }
            }
        }
        let ng = self.needs(a);
        Ok(self.push(
            Tensor {
                shape: sa,
                data,
            },
            Op::MaskRenormRows {
                a,
                mask: mask.to_vec(),
                eps,
            },
            ng,
        ))
    }

    // ── Image ops ───────────────────────────────────────────────────────

    /// 2-D convolution of [c_in,h,w] with [c_out,c_in,kh,kw], backed by
    /// im2col plus the shared matmul kernels.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] {
            return Err(Error::Dimension(format!(
                "conv2d: input shape {sx:?} vs weight shape {sw:?}"
            )));
        }
        let (c_in, h, width) = (sx[0], sx[1], sx[2]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        if let Some(bias) = b {
            if self.shape(bias) != [c_out] {
                return Err(Error::Dimension(format!(
                    "conv2d: bias shape {:?} vs {c_out} output channels",
                    self.shape(bias)
                )));
            }
        }
        if h + 2 * pad < kh || width + 2 * pad < kw {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{width}+{pad}"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (width + 2 * pad - kw) / stride + 1;
        let cols = im2col(
            &self.nodes[x.0].value.data,
            c_in,
            h,
            width,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        );
        let ckk = c_in * kh * kw;
        let mut data = vec![F::zero(); c_out * oh * ow];
        matmul_nn(
            &self.nodes[w.0].value.data,
            &cols,
            &mut data,
            c_out,
            ckk,
            oh * ow,
        );
        if let Some(bias) = b {
            let bv = &self.nodes[bias.0].value.data;
            for c in 0..c_out {
                let plane = &mut data[c * oh * ow..(c + 1) * oh * ow];
                for v in plane.iter_mut() {
                    *v += bv[c];
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.map(|bias| self.needs(bias)).unwrap_or(false);
        Ok(self.push(
            Tensor {
                shape: vec![c_out, oh, ow],
                data,
            },
            Op::Conv2d(Box::new(ConvRecord {
                x,
                w,
                b,
                stride,
                pad,
                c_in,
                c_out,
                h,
                width,
                kh,
                kw,
                oh,
                ow,
                cols,
            })),
            ng,
        ))
    }

    pub fn upsample_nearest_2x(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::Dimension(format!(
                "upsample_nearest_2x expects [c,h,w], got {sx:?}"
            )));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let src = &self.nodes[x.0].value.data;
        let mut data = vec![F::zero(); c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = src[ch * h * w + y * w + xx];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            data[ch * oh * ow + (2 * y + dy) * ow + 2 * xx + dx] = v;
                        }
                    }
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: vec![c, oh, ow],
                data,
            },
            Op::UpsampleNearest2x { x },
            ng,
        ))
    }

    /// [c,h,w] to a [h*w, c] token matrix (pixel-major rows).
    pub fn chw_to_tokens(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::Dimension(format!(
                "chw_to_tokens expects [c,h,w], got {sx:?}"
            )));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let src = &self.nodes[x.0].value.data;
        let mut data = vec![F::zero(); c * h * w];
        for ch in 0..c {
            for s in 0..h * w {
                data[s * c + ch] = src[ch * h * w + s];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: vec![h * w, c],
                data,
            },
            Op::ChwToTokens { x },
            ng,
        ))
    }

    /// Inverse of [`Self::chw_to_tokens`].
    pub fn tokens_to_chw(&mut self, t: Var, c: usize, h: usize, w: usize) -> Result<Var> {
        let st = self.shape(t).to_vec();
        if st != [h * w, c] {
            return Err(Error::Dimension(format!(
                "tokens_to_chw: token shape {st:?} vs [{},{}]",
                h * w,
                c
            )));
        }
        let src = &self.nodes[t.0].value.data;
        let mut data = vec![F::zero(); c * h * w];
        for ch in 0..c {
            for s in 0..h * w {
                data[ch * h * w + s] = src[s * c + ch];
            }
        }
        let ng = self.needs(t);
        Ok(self.push(
            Tensor {
                shape: vec![c, h, w],
                data,
            },
            Op::TokensToChw { t },
            ng,
        ))
    }

    /// Cut [c,h,w] into non-overlapping patch rows [n_patches, c*p*p],
    /// patches ordered row-major over the patch grid.
    pub fn patch_extract(&mut self, x: Var, patch: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[1] % patch != 0 || sx[2] % patch != 0 {
            return Err(Error::Dimension(format!(
                "patch_extract: shape {sx:?} not divisible into {patch}x{patch} patches"
            )));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (gh, gw) = (h / patch, w / patch);
        let row_len = c * patch * patch;
        let src = &self.nodes[x.0].value.data;
        let mut data = vec![F::zero(); gh * gw * row_len];
        for py in 0..gh {
            for px in 0..gw {
                let row = (py * gw + px) * row_len;
                let mut k = 0;
                for ch in 0..c {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            data[row + k] =
                                src[ch * h * w + (py * patch + dy) * w + px * patch + dx];
                            k += 1;
                        }
                    }
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: vec![gh * gw, row_len],
                data,
            },
            Op::PatchExtract { x, patch },
            ng,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Consumes the tape (the graph is
    /// cleared by construction) and returns the gradients of every leaf
    /// that required them; unreached leaves get zero gradients so leaf
    /// gradients are always fully populated.
    pub fn backward(self, loss: Var) -> Result<Gradients<F>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_multi(vec![(loss, vec![F::one()])])
    }

    /// Vector-Jacobian reverse pass seeded with explicit output gradients.
    /// Lets a forward pass recorded here participate in a loss computed on
    /// another tape: the other tape's backward supplies the seeds.
    pub fn backward_multi(mut self, seeds: Vec<(Var, Vec<F>)>) -> Result<Gradients<F>> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        for (var, seed) in seeds {
            if seed.len() != self.nodes[var.0].value.numel() {
                return Err(Error::Contract(format!(
                    "seed gradient of {} elements for output shape {:?}",
                    seed.len(),
                    self.shape(var)
                )));
            }
            match &mut grads[var.0] {
                Some(existing) => {
                    for (dst, src) in existing.iter_mut().zip(seed.iter()) {
                        *dst += *src;
                    }
                }
                slot => *slot = Some(seed),
            }
        }

        for i in (0..n).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.step_backward(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g); // keep leaf gradients for extraction
            }
        }

        let mut by_var = HashMap::new();
        let mut names = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![F::zero(); node.value.numel()]);
                by_var.insert(i, g);
            }
        }
        for (name, var) in self.params.drain(..) {
            names.insert(name, var.0);
        }
        Ok(Gradients { by_var, names })
    }

    fn step_backward(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        macro_rules! acc {
            ($var:expr, $contrib:expr) => {{
                let v: Var = $var;
                if self.nodes[v.0].needs_grad {
                    let slot = &mut grads[v.0];
                    match slot {
                        Some(existing) => {
                            for (dst, src) in existing.iter_mut().zip($contrib.iter()) {
                                *dst += *src;
                            }
                        }
                        None => *slot = Some($contrib),
                    }
                }
            }};
        }

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                acc!(*a, g.to_vec());
                acc!(*b, g.to_vec());
            }
            Op::Sub { a, b } => {
                acc!(*a, g.to_vec());
                acc!(*b, g.iter().map(|&x| -x).collect::<Vec<_>>());
            }
            Op::Mul { a, b } => {
                let av = &self.nodes[a.0].value.data;
                let bv = &self.nodes[b.0].value.data;
                acc!(
                    *a,
                    g.iter().zip(bv.iter()).map(|(&x, &y)| x * y).collect::<Vec<_>>()
                );
                acc!(
                    *b,
                    g.iter().zip(av.iter()).map(|(&x, &y)| x * y).collect::<Vec<_>>()
                );
            }
            Op::Scale { a, c } => {
                acc!(*a, g.iter().map(|&x| x * *c).collect::<Vec<_>>());
            }
            Op::AddConst { a } => {
                acc!(*a, g.to_vec());
            }
            Op::AddRowBias { a, bias } => {
                acc!(*a, g.to_vec());
                let d = self.nodes[bias.0].value.numel();
                let mut gb = vec![F::zero(); d];
                for row in g.chunks(d) {
                    for (acc_v, &x) in gb.iter_mut().zip(row.iter()) {
                        *acc_v += x;
                    }
                }
                acc!(*bias, gb);
            }
            Op::AddChannelBias { x, bias, spatial } => {
                acc!(*x, g.to_vec());
                let c = self.nodes[bias.0].value.numel();
                let mut gb = vec![F::zero(); c];
                for (ch, gb_v) in gb.iter_mut().enumerate() {
                    *gb_v = g[ch * spatial..(ch + 1) * spatial].iter().cloned().sum();
                }
                acc!(*bias, gb);
            }
            Op::Matmul { a, b, m, k, n } => {
                // dA = g . B^T ; dB = A^T . g
                let (m, k, n) = (*m, *k, *n);
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![F::zero(); m * k];
                    matmul_nt(g, &self.nodes[b.0].value.data, &mut da, m, n, k);
                    acc!(*a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![F::zero(); k * n];
                    matmul_tn(&self.nodes[a.0].value.data, g, &mut db, k, m, n);
                    acc!(*b, db);
                }
            }
            Op::TransposeLastTwo { a } => {
                let sa = &self.nodes[a.0].value.shape;
                let (r, c) = (sa[0], sa[1]);
                let mut da = vec![F::zero(); r * c];
                for i2 in 0..c {
                    for j in 0..r {
                        da[j * c + i2] = g[i2 * r + j];
                    }
                }
                acc!(*a, da);
            }
            Op::Concat { parts, axis } => {
                let out_shape = &self.nodes[i].value.shape;
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.numel();
                        acc!(p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                } else {
                    let rows = out_shape[0];
                    let total_cols = out_shape[1];
                    let mut col_offset = 0;
                    for &p in parts {
                        let cols = self.nodes[p.0].value.shape[1];
                        let mut dp = vec![F::zero(); rows * cols];
                        for r in 0..rows {
                            dp[r * cols..(r + 1) * cols].copy_from_slice(
                                &g[r * total_cols + col_offset..r * total_cols + col_offset + cols],
                            );
                        }
                        acc!(p, dp);
                        col_offset += cols;
                    }
                }
            }
            Op::SliceCols { a, start, len } => {
                let sa = &self.nodes[a.0].value.shape;
                let (n, d) = (sa[0], sa[1]);
                let mut da = vec![F::zero(); n * d];
                for r in 0..n {
                    da[r * d + start..r * d + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc!(*a, da);
            }
            Op::GatherRows { table, ids } => {
                let st = &self.nodes[table.0].value.shape;
                let d = st[1];
                let mut dt = vec![F::zero(); st[0] * d];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[row * d + j];
                    }
                }
                acc!(*table, dt);
            }
            Op::Reshape { a } => {
                acc!(*a, g.to_vec());
            }
            Op::SoftmaxLastDim { a } => {
                let out = &self.nodes[i].value;
                let n = *out.shape.last().unwrap();
                let mut da = vec![F::zero(); out.numel()];
                for ((da_row, g_row), s_row) in da
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(out.data.chunks(n))
                {
                    let dot: F = g_row.iter().zip(s_row.iter()).map(|(&x, &y)| x * y).sum();
                    for j in 0..n {
                        da_row[j] = s_row[j] * (g_row[j] - dot);
                    }
                }
                acc!(*a, da);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = &self.nodes[x.0].value.data;
                let gv = &self.nodes[gamma.0].value.data;
                let d = self.nodes[gamma.0].value.numel();
                let dn = F::from_usize(d);
                let rows = xv.len() / d;
                let mut dx = vec![F::zero(); xv.len()];
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                for r in 0..rows {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mean = xr.iter().cloned().sum::<F>() / dn;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
                    let inv_std = (var + *eps).sqrt().recip();
                    let xhat: Vec<F> = xr.iter().map(|&v| (v - mean) * inv_std).collect();
                    let mut dxhat = vec![F::zero(); d];
                    for j in 0..d {
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gv[j];
                    }
                    let sum_dxhat: F = dxhat.iter().cloned().sum();
                    let sum_dxhat_xhat: F =
                        dxhat.iter().zip(xhat.iter()).map(|(&a2, &b2)| a2 * b2).sum();
                    for j in 0..d {
                        dx[r * d + j] = inv_std / dn
                            * (dn * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                acc!(*x, dx);
                acc!(*gamma, dgamma);
                acc!(*beta, dbeta);
            }
            Op::Silu { a } => {
                let av = &self.nodes[a.0].value.data;
                let da: Vec<F> = g
                    .iter()
                    .zip(av.iter())
                    .map(|(&gi, &x)| {
                        let sig = F::one() / (F::one() + (-x).exp());
                        gi * (sig + x * sig * (F::one() - sig))
                    })
                    .collect();
                acc!(*a, da);
            }
            Op::Gelu { a } => {
                let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
                let k = F::from_f64(0.044715);
                let half = F::from_f64(0.5);
                let three = F::from_f64(3.0);
                let av = &self.nodes[a.0].value.data;
                let da: Vec<F> = g
                    .iter()
                    .zip(av.iter())
                    .map(|(&gi, &x)| {
                        let inner = c * (x + k * x * x * x);
                        let t = inner.tanh();
                        let sech2 = F::one() - t * t;
                        let dinner = c * (F::one() + three * k * x * x);
                        gi * (half * (F::one() + t) + half * x * sech2 * dinner)
                    })
                    .collect();
                acc!(*a, da);
            }
            Op::MeanAxis { a, axis } => {
                let sa = &self.nodes[a.0].value.shape;
                let (n, d) = (sa[0], sa[1]);
                let mut da = vec![F::zero(); n * d];
                if *axis == 0 {
                    let inv = F::from_usize(n).recip();
                    for r in 0..n {
                        for j in 0..d {
                            da[r * d + j] = g[j] * inv;
                        }
                    }
                } else {
                    let inv = F::from_usize(d).recip();
                    for r in 0..n {
                        for j in 0..d {
                            da[r * d + j] = g[r] * inv;
                        }
                    }
                }
                acc!(*a, da);
            }
            Op::SumAll { a } => {
                let n = self.nodes[a.0].value.numel();
                acc!(*a, vec![g[0]; n]);
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a.0].value.numel();
                let v = g[0] / F::from_usize(n);
                acc!(*a, vec![v; n]);
            }
            Op::Mse { a, b } => {
                let av = &self.nodes[a.0].value.data;
                let bv = &self.nodes[b.0].value.data;
                let scale = g[0] * F::from_f64(2.0) / F::from_usize(av.len());
                if self.nodes[a.0].needs_grad {
                    acc!(
                        *a,
                        av.iter()
                            .zip(bv.iter())
                            .map(|(&x, &y)| scale * (x - y))
                            .collect::<Vec<_>>()
                    );
                }
                if self.nodes[b.0].needs_grad {
                    acc!(
                        *b,
                        av.iter()
                            .zip(bv.iter())
                            .map(|(&x, &y)| scale * (y - x))
                            .collect::<Vec<_>>()
                    );
                }
            }
            Op::CosineRowwise { a, b } => {
                let av = &self.nodes[a.0].value.data;
                let bv = &self.nodes[b.0].value.data;
                let out = &self.nodes[i].value.data;
                let n = out.len();
                let d = av.len() / n;
                let mut da = vec![F::zero(); av.len()];
                let mut db = vec![F::zero(); bv.len()];
                for r in 0..n {
                    let ra = &av[r * d..(r + 1) * d];
                    let rb = &bv[r * d..(r + 1) * d];
                    let na = ra.iter().map(|&x| x * x).sum::<F>().sqrt();
                    let nb = rb.iter().map(|&x| x * x).sum::<F>().sqrt();
                    let cos = out[r];
                    let gr = g[r];
                    for j in 0..d {
                        da[r * d + j] = gr * (rb[j] / (na * nb) - cos * ra[j] / (na * na));
                        db[r * d + j] = gr * (ra[j] / (na * nb) - cos * rb[j] / (nb * nb));
                    }
                }
                acc!(*a, da);
                acc!(*b, db);
            }
            Op::MaskedMeanRows { a, keep, count } => {
                let sa = &self.nodes[a.0].value.shape;
                let n = sa[0];
                let d = if sa.len() == 2 { sa[1] } else { 1 };
                let inv = F::from_usize(*count).recip();
                let mut da = vec![F::zero(); n * d];
                for (r, &k) in keep.iter().enumerate() {
                    if k {
                        for j in 0..d {
                            da[r * d + j] = g[j] * inv;
                        }
                    }
                }
                acc!(*a, da);
            }
            Op::RowNormalize { a } => {
                let av = &self.nodes[a.0].value.data;
                let out = &self.nodes[i].value.data;
                let sa = &self.nodes[a.0].value.shape;
                let (n, d) = (sa[0], sa[1]);
                let mut da = vec![F::zero(); n * d];
                for r in 0..n {
                    let ra = &av[r * d..(r + 1) * d];
                    let xhat = &out[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let norm = ra.iter().map(|&x| x * x).sum::<F>().sqrt();
                    let dot: F = gr.iter().zip(xhat.iter()).map(|(&x, &y)| x * y).sum();
                    for j in 0..d {
                        da[r * d + j] = (gr[j] - dot * xhat[j]) / norm;
                    }
                }
                acc!(*a, da);
            }
            Op::ScaleByExp { a, s } => {
                let e = self.nodes[s.0].value.data[0].exp();
                if self.nodes[a.0].needs_grad {
                    acc!(*a, g.iter().map(|&x| x * e).collect::<Vec<_>>());
                }
                if self.nodes[s.0].needs_grad {
                    let av = &self.nodes[a.0].value.data;
                    let ds: F = g.iter().zip(av.iter()).map(|(&x, &y)| x * y).sum::<F>() * e;
                    acc!(*s, vec![ds]);
                }
            }
            Op::CrossEntropyRows { logits, targets } => {
                let lv = &self.nodes[logits.0].value.data;
                let (n, m) = (
                    self.nodes[logits.0].value.shape[0],
                    self.nodes[logits.0].value.shape[1],
                );
                let gn = g[0] / F::from_usize(n);
                let mut dl = vec![F::zero(); n * m];
                for (r, &t) in targets.iter().enumerate() {
                    let row = &lv[r * m..(r + 1) * m];
                    let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
                    let exps: Vec<F> = row.iter().map(|&x| (x - max).exp()).collect();
                    let sum: F = exps.iter().cloned().sum();
                    for j in 0..m {
                        let sm = exps[j] / sum;
                        let onehot = if j == t { F::one() } else { F::zero() };
                        dl[r * m + j] = gn * (sm - onehot);
                    }
                }
                acc!(*logits, dl);
            }
            Op::MaskRenormRows { a, mask, eps } => {
                let av = &self.nodes[a.0].value.data;
                let out = &self.nodes[i].value.data;
                let sa = &self.nodes[a.0].value.shape;
                let (n, d) = (sa[0], sa[1]);
                let mut da = vec![F::zero(); n * d];
                for r in 0..n {
                    let row = &av[r * d..(r + 1) * d];
                    let mut s = F::zero();
                    for (j, &m) in mask.iter().enumerate() {
                        if m {
                            s += row[j];
                        }
                    }
                    let denom = s + *eps;
                    let gdot: F = (0..d)
                        .filter(|&j| mask[j])
                        .map(|j| g[r * d + j] * out[r * d + j])
                        .sum();
                    for j in 0..d {
                        if mask[j] {
                            da[r * d + j] = (g[r * d + j] - gdot) / denom;
                        }
                    }
                }
                acc!(*a, da);
            }
            Op::Conv2d(rec) => {
                let ohow = rec.oh * rec.ow;
                let ckk = rec.c_in * rec.kh * rec.kw;
                if self.nodes[rec.w.0].needs_grad {
                    // dW = g . cols^T  (cols is [ckk, ohow], treat as B stored [n,k] for nt)
                    let mut dw = vec![F::zero(); rec.c_out * ckk];
                    matmul_nt(g, &rec.cols, &mut dw, rec.c_out, ohow, ckk);
                    acc!(rec.w, dw);
                }
                if let Some(bias) = rec.b {
                    if self.nodes[bias.0].needs_grad {
                        let mut db = vec![F::zero(); rec.c_out];
                        for (c, db_v) in db.iter_mut().enumerate() {
                            *db_v = g[c * ohow..(c + 1) * ohow].iter().cloned().sum();
                        }
                        acc!(bias, db);
                    }
                }
                if self.nodes[rec.x.0].needs_grad {
                    // dcols = W^T . g, then scatter back through im2col
                    let mut dcols = vec![F::zero(); ckk * ohow];
                    matmul_tn(
                        &self.nodes[rec.w.0].value.data,
                        g,
                        &mut dcols,
                        ckk,
                        rec.c_out,
                        ohow,
                    );
                    let dx = col2im(
                        &dcols, rec.c_in, rec.h, rec.width, rec.kh, rec.kw, rec.stride, rec.pad,
                        rec.oh, rec.ow,
                    );
                    acc!(rec.x, dx);
                }
            }
            Op::UpsampleNearest2x { x } => {
                let sx = &self.nodes[x.0].value.shape;
                let (c, h, w) = (sx[0], sx[1], sx[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![F::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let mut s = F::zero();
                            for dy in 0..2 {
                                for dx2 in 0..2 {
                                    s += g[ch * oh * ow + (2 * y + dy) * ow + 2 * xx + dx2];
                                }
                            }
                            dx[ch * h * w + y * w + xx] = s;
                        }
                    }
                }
                acc!(*x, dx);
            }
            Op::ChwToTokens { x } => {
                let sx = &self.nodes[x.0].value.shape;
                let (c, hw) = (sx[0], sx[1] * sx[2]);
                let mut dx = vec![F::zero(); c * hw];
                for ch in 0..c {
                    for s in 0..hw {
                        dx[ch * hw + s] = g[s * c + ch];
                    }
                }
                acc!(*x, dx);
            }
            Op::TokensToChw { t } => {
                let st = &self.nodes[t.0].value.shape;
                let (hw, c) = (st[0], st[1]);
                let mut dt = vec![F::zero(); hw * c];
                for ch in 0..c {
                    for s in 0..hw {
                        dt[s * c + ch] = g[ch * hw + s];
                    }
                }
                acc!(*t, dt);
            }
            Op::PatchExtract { x, patch } => {
                let sx = &self.nodes[x.0].value.shape;
                let (c, h, w) = (sx[0], sx[1], sx[2]);
                let p = *patch;
                let (gh, gw) = (h / p, w / p);
                let row_len = c * p * p;
                let mut dx = vec![F::zero(); c * h * w];
                for py in 0..gh {
                    for px in 0..gw {
                        let row = (py * gw + px) * row_len;
                        let mut k = 0;
                        for ch in 0..c {
                            for dy in 0..p {
                                for dx2 in 0..p {
                                    dx[ch * h * w + (py * p + dy) * w + px * p + dx2] +=
                                        g[row + k];
                                    k += 1;
                                }
                            }
                        }
                    }
                }
                acc!(*x, dx);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<F: Real>(
    x: &[F],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<F> {
    let ohow = oh * ow;
    let mut cols = vec![F::zero(); c_in * kh * kw * ohow];
    for ci in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[r * ohow..(r + 1) * ohow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = x[ci * h * w + iy as usize * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Real>(
    dcols: &[F],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<F> {
    let ohow = oh * ow;
    let mut dx = vec![F::zero(); c_in * h * w];
    for ci in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                let src = &dcols[r * ohow..(r + 1) * ohow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[ci * h * w + iy as usize * w + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
    dx
}
