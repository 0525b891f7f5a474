//! Gradient tape: every primitive records its inputs (and whatever it needs
//! for the backward pass) as a node in creation order. `backward` replays the
//! nodes in reverse and is read-only with respect to the tape, so it can be
//! replayed any number of times with identical results.

use rand::Rng;

use crate::error::{NumError, Result};
use crate::real::{lit, Real};
use crate::tensor::{numel_of, Tensor};

/// Additive sentinel standing in for negative infinity in masked logits.
pub const MASK_FILL: f64 = -1e9;

/// Rows whose maximum is below this are treated as fully masked.
const MASKED_BELOW: f64 = -1e8;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction applied by [`Tape::cross_entropy`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op<F> {
    Leaf,
    /// Output of an op none of whose inputs require gradients.
    Constant,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: F,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    MaskFill {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        weight: F,
        probs: Vec<F>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    EmbeddingSum {
        table: Var,
        ids: Vec<usize>,
        group: usize,
    },
    Concat {
        parts: Vec<Var>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<F>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients of every gradient-requiring leaf, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Leaf gradients in tape order.
    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<F>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (Var(i), g)))
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn grad_buf<'a, F: Real>(grads: &'a mut [Option<Vec<F>>], nodes: &[Node<F>], var: Var) -> Option<&'a mut Vec<F>> {
    let node = &nodes[var.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[var.0].get_or_insert_with(|| vec![F::zero(); node.value.numel()]))
}

/// Row-major stride view of a matrix, possibly transposed.
#[derive(Clone, Copy)]
struct View {
    rs: usize,
    cs: usize,
}

const fn plain(cols: usize) -> View {
    View { rs: cols, cs: 1 }
}

const fn transposed(cols: usize) -> View {
    View { rs: 1, cs: cols }
}

#[allow(clippy::too_many_arguments)]
fn gemm<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    va: View,
    b: &[F],
    vb: View,
    beta: F,
    c: &mut [F],
    vc: View,
) {
    F::gemm(m, k, n, alpha, a, va.rs, va.cs, b, vb.rs, vb.cs, beta, c, vc.rs, vc.cs);
}

struct MatmulDims {
    batch_a: usize,
    batch_b: usize,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatmulDims, Vec<usize>)> {
    let mismatch = || NumError::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    let split = |s: &[usize]| -> Result<(usize, usize, usize)> {
        match s.len() {
            2 => Ok((1, s[0], s[1])),
            3 => Ok((s[0], s[1], s[2])),
            r => Err(NumError::Rank {
                op: "matmul",
                rank: r,
                expected: "rank 2 or 3",
            }),
        }
    };
    let (batch_a, m, k) = split(a)?;
    let (batch_b, k2, n) = split(b)?;
    if k != k2 || (batch_a != batch_b && batch_a != 1 && batch_b != 1) {
        return Err(mismatch());
    }
    let batch = batch_a.max(batch_b);
    let out = if a.len() == 2 && b.len() == 2 {
        vec![m, n]
    } else {
        vec![batch, m, n]
    };
    Ok((
        MatmulDims {
            batch_a,
            batch_b,
            batch,
            m,
            k,
            n,
        },
        out,
    ))
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<F>, inputs: &[Var], op: Op<F>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Matrix product of rank-2 or rank-3 operands; a leading batch extent of
    /// 1 (or a missing one) broadcasts.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (d, out_shape) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![F::zero(); numel_of(&out_shape)];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..d.batch {
                let ao = if d.batch_a == 1 { 0 } else { i * d.m * d.k };
                let bo = if d.batch_b == 1 { 0 } else { i * d.k * d.n };
                let co = i * d.m * d.n;
                gemm(
                    d.m,
                    d.k,
                    d.n,
                    F::one(),
                    &av[ao..ao + d.m * d.k],
                    plain(d.k),
                    &bv[bo..bo + d.k * d.n],
                    plain(d.n),
                    F::zero(),
                    &mut out[co..co + d.m * d.n],
                    plain(d.n),
                );
            }
        }
        Ok(self.push(Tensor::from_parts(out_shape, out), &[a, b], Op::MatMul { a, b }))
    }

    /// `a + b` where the shape of `b` is a suffix of the shape of `a`
    /// (so a bias row broadcasts over leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(NumError::Shape {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bv = self.value(b).data();
        let nb = bv.len();
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % nb])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), &[a, b], Op::Add { a, b }))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(NumError::Shape {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let value = self.value(x);
        let out = value.data().iter().map(|&v| v * factor).collect();
        let shape = value.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), &[x], Op::Scale { x, factor })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x);
        let out = value.data().iter().map(|&v| lit(gelu_parts(v.as_f64()).0)).collect();
        let shape = value.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), &[x], Op::Gelu { x })
    }

    /// Normalizes over the last axis, then applies `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or(NumError::Rank {
            op: "layer_norm",
            rank: 0,
            expected: "rank >= 1",
        })?;
        for p in [gain, bias] {
            if self.shape(p) != [cols] {
                return Err(NumError::Shape {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / cols;
        let n: F = lit(cols as f64);
        let eps: F = lit(eps);
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Max-stabilized softmax along `axis`. Entries carrying the
    /// [`MASK_FILL`] sentinel (or negative infinity) receive probability 0; a
    /// line with every entry masked is an error.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumError::Rank {
                op: "softmax",
                rank: shape.len(),
                expected: "axis < rank",
            });
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * extent + j) * inner + i;
                let max = (0..extent).map(|j| xv[idx(j)]).fold(F::neg_infinity(), F::max);
                if max.as_f64() <= MASKED_BELOW {
                    return Err(NumError::DegenerateRow {
                        op: "softmax",
                        row: o * inner + i,
                    });
                }
                let mut total = F::zero();
                for j in 0..extent {
                    let e = (xv[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..extent {
                    out[idx(j)] /= total;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), &[x], Op::Softmax { x, axis }))
    }

    /// Adds [`MASK_FILL`] wherever `allow` is false. `allow` covers the
    /// trailing elements of `x` and repeats over leading axes.
    pub fn mask_fill(&mut self, x: Var, allow: &[bool]) -> Result<Var> {
        let xv = self.value(x).data();
        if allow.is_empty() || xv.len() % allow.len() != 0 {
            return Err(NumError::Shape {
                op: "mask_fill",
                lhs: self.shape(x).to_vec(),
                rhs: vec![allow.len()],
            });
        }
        let fill: F = lit(MASK_FILL);
        let out = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| if allow[i % allow.len()] { v } else { v + fill })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), &[x], Op::MaskFill { x }))
    }

    /// Negative log-softmax likelihood of `targets` under `logits [*, C]`,
    /// skipping rows whose target equals `ignore`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: usize,
        reduction: Reduction,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let classes = *shape.last().ok_or(NumError::Rank {
            op: "cross_entropy",
            rank: 0,
            expected: "rank >= 1",
        })?;
        let lv = self.value(logits).data();
        let rows = lv.len() / classes;
        if targets.len() != rows {
            return Err(NumError::Shape {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![F::zero(); lv.len()];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            if t >= classes {
                return Err(NumError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    extent: classes,
                });
            }
            let row = &lv[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for (c, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * classes + c] = e;
                z += e;
            }
            for p in &mut probs[r * classes..(r + 1) * classes] {
                *p /= z;
            }
            total += (z.ln() + max - row[t]).as_f64();
            count += 1;
        }
        if count == 0 {
            return Err(NumError::EmptyReduction { op: "cross_entropy" });
        }
        let weight = match reduction {
            Reduction::Mean => 1.0 / count as f64,
            Reduction::Sum => 1.0,
        };
        let value = Tensor::scalar(lit(total * weight));
        Ok(self.push(
            value,
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                weight: lit(weight),
                probs,
            },
        ))
    }

    /// Mean-reduced [`Tape::cross_entropy`].
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        self.cross_entropy(logits, targets, ignore, Reduction::Mean)
    }

    /// Gathers rows of `table [V, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(NumError::Rank {
                op: "embedding",
                rank: shape.len(),
                expected: "rank 2 table",
            });
        }
        let (v, d) = (shape[0], shape[1]);
        if ids.is_empty() {
            return Err(NumError::EmptyReduction { op: "embedding" });
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    extent: v,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Sums consecutive groups of `group` gathered rows: output row `r` is
    /// `sum(table[ids[r * group + j]] for j in 0..group)`.
    pub fn embedding_sum(&mut self, table: Var, ids: &[usize], group: usize) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(NumError::Rank {
                op: "embedding_sum",
                rank: shape.len(),
                expected: "rank 2 table",
            });
        }
        if group == 0 || ids.is_empty() || ids.len() % group != 0 {
            return Err(NumError::Shape {
                op: "embedding_sum",
                lhs: vec![ids.len()],
                rhs: vec![group],
            });
        }
        let (v, d) = (shape[0], shape[1]);
        let rows = ids.len() / group;
        let tv = self.value(table).data();
        let mut out = vec![F::zero(); rows * d];
        for (j, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(NumError::IndexOutOfRange {
                    op: "embedding_sum",
                    index: id,
                    extent: v,
                });
            }
            let r = j / group;
            for (o, &t) in out[r * d..(r + 1) * d].iter_mut().zip(&tv[id * d..(id + 1) * d]) {
                *o += t;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, d], out),
            &[table],
            Op::EmbeddingSum {
                table,
                ids: ids.to_vec(),
                group,
            },
        ))
    }

    /// Concatenates along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(NumError::EmptyReduction { op: "concat" })?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(NumError::Shape {
                    op: "concat",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            parts,
            Op::Concat { parts: parts.to_vec() },
        ))
    }

    /// Rows `start..start + len` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || len == 0 || start + len > shape[0] {
            return Err(NumError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                extent: shape.first().copied().unwrap_or(0),
            });
        }
        let row: usize = shape[1..].iter().product();
        let out = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        Ok(self.push(Tensor::from_parts(out_shape, out), &[x], Op::SliceRows { x, start }))
    }

    /// Multi-head scaled dot-product attention over `q [nq, D]`, `k [nk, D]`,
    /// `v [nk, D]`. `allow` is an optional `nq x nk` row-major allow matrix;
    /// disallowed scores receive [`MASK_FILL`] before the softmax.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, allow: Option<&[bool]>) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        let bad = |rhs: &[usize]| NumError::Shape {
            op: "attention",
            lhs: sq.clone(),
            rhs: rhs.to_vec(),
        };
        if sq.len() != 2 || sk.len() != 2 || sk != sv || sq[1] != sk[1] {
            return Err(bad(&sk));
        }
        let (nq, nk, dim) = (sq[0], sk[0], sq[1]);
        if heads == 0 || dim % heads != 0 {
            return Err(bad(&[heads]));
        }
        if let Some(a) = allow {
            if a.len() != nq * nk {
                return Err(bad(&[a.len()]));
            }
            if let Some(row) = (0..nq).find(|&r| !a[r * nk..(r + 1) * nk].iter().any(|&x| x)) {
                return Err(NumError::DegenerateRow { op: "attention", row });
            }
        }
        let hd = dim / heads;
        let scale: F = lit(1.0 / (hd as f64).sqrt());
        let fill: F = lit(MASK_FILL);
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut probs = vec![F::zero(); heads * nq * nk];
        let mut out = vec![F::zero(); nq * dim];
        for h in 0..heads {
            let off = h * hd;
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            gemm(
                nq,
                hd,
                nk,
                scale,
                &qv[off..],
                plain(dim),
                &kv[off..],
                transposed(dim),
                F::zero(),
                p,
                plain(nk),
            );
            for r in 0..nq {
                let row = &mut p[r * nk..(r + 1) * nk];
                if let Some(a) = allow {
                    for (s, &ok) in row.iter_mut().zip(&a[r * nk..(r + 1) * nk]) {
                        if !ok {
                            *s += fill;
                        }
                    }
                }
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                for s in row.iter_mut() {
                    *s /= z;
                }
            }
            gemm(
                nq,
                nk,
                hd,
                F::one(),
                p,
                plain(nk),
                &vv[off..],
                plain(dim),
                F::zero(),
                &mut out[off..],
                plain(dim),
            );
        }
        Ok(self.push(
            Tensor::from_parts(vec![nq, dim], out),
            &[q, k, v],
            Op::Attention { q, k, v, heads, probs },
        ))
    }

    /// Inverted dropout; a no-op (returning `x`) when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep: F = lit(1.0 / (1.0 - p));
        let value = self.value(x);
        let mask: Vec<F> = (0..value.numel())
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let out = value.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = value.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), &[x], Op::Dropout { x, mask })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<F>();
        self.push(Tensor::scalar(total), &[x], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = self.value(x);
        let total = value.data().iter().copied().sum::<F>() / lit(value.numel() as f64);
        self.push(Tensor::scalar(total), &[x], Op::Mean { x })
    }

    /// Reverse-mode sweep from a scalar `loss`. Every gradient-requiring leaf
    /// gets an entry; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(NumError::Rank {
                op: "backward",
                rank: root.value.rank(),
                expected: "a scalar loss",
            });
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        if root.requires_grad {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let mut out: Vec<Option<Tensor<F>>> = vec![None; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let data = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![F::zero(); node.value.numel()]);
                out[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), data));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b } => {
                let (d, _) = matmul_dims(nodes[a.0].value.shape(), nodes[b.0].value.shape())
                    .expect("shapes validated in forward");
                let (av, bv) = (val(*a), val(*b));
                for i in 0..d.batch {
                    let ao = if d.batch_a == 1 { 0 } else { i * d.m * d.k };
                    let bo = if d.batch_b == 1 { 0 } else { i * d.k * d.n };
                    let gi = &g[i * d.m * d.n..(i + 1) * d.m * d.n];
                    if let Some(da) = grad_buf(grads, nodes, *a) {
                        gemm(
                            d.m,
                            d.n,
                            d.k,
                            F::one(),
                            gi,
                            plain(d.n),
                            &bv[bo..],
                            transposed(d.n),
                            F::one(),
                            &mut da[ao..ao + d.m * d.k],
                            plain(d.k),
                        );
                    }
                    if let Some(db) = grad_buf(grads, nodes, *b) {
                        gemm(
                            d.k,
                            d.m,
                            d.n,
                            F::one(),
                            &av[ao..],
                            transposed(d.k),
                            gi,
                            plain(d.n),
                            F::one(),
                            &mut db[bo..bo + d.k * d.n],
                            plain(d.n),
                        );
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = grad_buf(grads, nodes, *a) {
                    for (d, &x) in da.iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if let Some(db) = grad_buf(grads, nodes, *b) {
                    let nb = db.len();
                    for (i, &x) in g.iter().enumerate() {
                        db[i % nb] += x;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(da) = grad_buf(grads, nodes, *a) {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                }
                if let Some(db) = grad_buf(grads, nodes, *b) {
                    for ((d, &x), &y) in db.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    for (d, &v) in dx.iter_mut().zip(g) {
                        *d += v * *factor;
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = val(*x);
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    for ((d, &v), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        *d += v * lit(gelu_parts(xi.as_f64()).1);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = val(*gain);
                let cols = gv.len();
                let rows = g.len() / cols;
                if let Some(dg) = grad_buf(grads, nodes, *gain) {
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if let Some(db) = grad_buf(grads, nodes, *bias) {
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                }
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    let n: F = lit(cols as f64);
                    let mut dxhat = vec![F::zero(); cols];
                    for r in 0..rows {
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut sum = F::zero();
                        let mut dot = F::zero();
                        for c in 0..cols {
                            dxhat[c] = g[r * cols + c] * gv[c];
                            sum += dxhat[c];
                            dot += dxhat[c] * xh[c];
                        }
                        let k = rstd[r] / n;
                        for c in 0..cols {
                            dx[r * cols + c] += k * (n * dxhat[c] - sum - xh[c] * dot);
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, extent, inner) = axis_split(node.value.shape(), *axis);
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * extent + j) * inner + i;
                            let dot = (0..extent).map(|j| g[idx(j)] * y[idx(j)]).sum::<F>();
                            for j in 0..extent {
                                dx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaskFill { x } => {
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    for (d, &v) in dx.iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                weight,
                probs,
            } => {
                let classes = probs.len() / targets.len();
                let scale = g[0] * *weight;
                if let Some(dl) = grad_buf(grads, nodes, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        for c in 0..classes {
                            let onehot = if c == t { F::one() } else { F::zero() };
                            dl[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.shape()[1];
                if let Some(dt) = grad_buf(grads, nodes, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for (t, &v) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *t += v;
                        }
                    }
                }
            }
            Op::EmbeddingSum { table, ids, group } => {
                let d = nodes[table.0].value.shape()[1];
                if let Some(dt) = grad_buf(grads, nodes, *table) {
                    for (j, &id) in ids.iter().enumerate() {
                        let r = j / group;
                        for (t, &v) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *t += v;
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.numel();
                    if let Some(dp) = grad_buf(grads, nodes, *p) {
                        for (d, &v) in dp.iter_mut().zip(&g[offset..offset + n]) {
                            *d += v;
                        }
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let row: usize = nodes[x.0].value.shape()[1..].iter().product();
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    for (d, &v) in dx[start * row..].iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g, grads);
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    for ((d, &v), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += v * m;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean { x } => {
                let n: F = lit(nodes[x.0].value.numel() as f64);
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0] / n;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[F],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let nodes = &self.nodes;
        let (nq, dim) = (nodes[q.0].value.shape()[0], nodes[q.0].value.shape()[1]);
        let nk = nodes[k.0].value.shape()[0];
        let hd = dim / heads;
        let scale: F = lit(1.0 / (hd as f64).sqrt());
        let (qv, kv, vv) = (
            nodes[q.0].value.data(),
            nodes[k.0].value.data(),
            nodes[v.0].value.data(),
        );
        let mut ds = vec![F::zero(); nq * nk];
        for h in 0..heads {
            let off = h * hd;
            let p = &probs[h * nq * nk..(h + 1) * nq * nk];
            if let Some(dv) = grad_buf(grads, nodes, v) {
                gemm(
                    nk,
                    nq,
                    hd,
                    F::one(),
                    p,
                    transposed(nk),
                    &g[off..],
                    plain(dim),
                    F::one(),
                    &mut dv[off..],
                    plain(dim),
                );
            }
            let need_scores = nodes[q.0].requires_grad || nodes[k.0].requires_grad;
            if !need_scores {
                continue;
            }
            // dP = dO V^T, then the softmax Jacobian row by row.
            gemm(
                nq,
                hd,
                nk,
                F::one(),
                &g[off..],
                plain(dim),
                &vv[off..],
                transposed(dim),
                F::zero(),
                &mut ds,
                plain(nk),
            );
            for r in 0..nq {
                let pr = &p[r * nk..(r + 1) * nk];
                let dr = &mut ds[r * nk..(r + 1) * nk];
                let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<F>();
                for (d, &pp) in dr.iter_mut().zip(pr) {
                    *d = pp * (*d - dot);
                }
            }
            if let Some(dq) = grad_buf(grads, nodes, q) {
                gemm(
                    nq,
                    nk,
                    hd,
                    scale,
                    &ds,
                    plain(nk),
                    &kv[off..],
                    plain(dim),
                    F::one(),
                    &mut dq[off..],
                    plain(dim),
                );
            }
            if let Some(dk) = grad_buf(grads, nodes, k) {
                gemm(
                    nk,
                    nq,
                    hd,
                    scale,
                    &ds,
                    transposed(nk),
                    &qv[off..],
                    plain(dim),
                    F::one(),
                    &mut dk[off..],
                    plain(dim),
                );
            }
        }
    }
}
