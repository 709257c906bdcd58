//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays the records in reverse and accumulates total derivatives into a
//! [`Grads`] table indexed by node id. Tape construction and backward are
//! single-threaded; independent runs own independent tapes.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Backward rule: `(grad_out, parent_values) -> parent_grads`.
type BackFn<S> = Box<dyn Fn(&Tensor<S>, &[&Tensor<S>]) -> Vec<Tensor<S>>>;

struct Node<S: Scalar> {
    parents: Vec<usize>,
    backward: Option<BackFn<S>>,
    requires_grad: bool,
}

pub struct Tape<S: Scalar> {
    values: RefCell<Vec<Tensor<S>>>,
    nodes: RefCell<Vec<Node<S>>>,
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    pub(crate) id: usize,
}

/// Gradients produced by one backward pass.
pub struct Grads<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn wrt(&self, v: Var<'_, S>) -> Option<&Tensor<S>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
    pub fn by_id(&self, id: usize) -> Option<&Tensor<S>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            values: RefCell::new(Vec::new()),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        value: Tensor<S>,
        parents: Vec<usize>,
        backward: Option<BackFn<S>>,
        requires_grad: bool,
    ) -> Var<'_, S> {
        let mut values = self.values.borrow_mut();
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        values.push(value);
        nodes.push(Node {
            parents,
            backward,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, vec![], None, true)
    }

    /// Non-trainable input.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, vec![], None, false)
    }

    pub fn value(&self, v: Var<'_, S>) -> Tensor<S> {
        self.values.borrow()[v.id].clone()
    }

    /// Re-create a handle from a raw node id.
    pub fn var_for_node(&self, id: usize) -> Var<'_, S> {
        debug_assert!(id < self.len());
        Var { tape: self, id }
    }

    /// Reverse sweep from a scalar root. Each node is visited exactly once.
    pub fn backward(&self, root: Var<'_, S>) -> Result<Grads<S>> {
        let values = self.values.borrow();
        let nodes = self.nodes.borrow();
        if !values[root.id].is_scalar() {
            return Err(Error::shape(format!(
                "backward root must be scalar, got shape {:?}",
                values[root.id].shape()
            )));
        }
        if !values[root.id].item().is_finite() {
            return Err(Error::numeric("backward root is not finite"));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::scalar(S::one()));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(grad_out) = grads[id].clone() else {
                continue;
            };
            let Some(back) = &node.backward else {
                continue;
            };
            let parent_vals: Vec<&Tensor<S>> =
                node.parents.iter().map(|&p| &values[p]).collect();
            let parent_grads = back(&grad_out, &parent_vals);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[pid].requires_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Grads { grads })
    }
}

fn any_grad<S: Scalar>(tape: &Tape<S>, ids: &[usize]) -> bool {
    let nodes = tape.nodes.borrow();
    ids.iter().any(|&i| nodes[i].requires_grad)
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Tensor<S> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.values.borrow()[self.id].shape().to_vec()
    }

    fn unary(
        &self,
        value: Tensor<S>,
        back: impl Fn(&Tensor<S>, &[&Tensor<S>]) -> Vec<Tensor<S>> + 'static,
    ) -> Var<'t, S> {
        let rg = any_grad(self.tape, &[self.id]);
        self.tape
            .push(value, vec![self.id], Some(Box::new(back)), rg)
    }

    fn binary(
        &self,
        other: Var<'t, S>,
        value: Tensor<S>,
        back: impl Fn(&Tensor<S>, &[&Tensor<S>]) -> Vec<Tensor<S>> + 'static,
    ) -> Var<'t, S> {
        let rg = any_grad(self.tape, &[self.id, other.id]);
        self.tape
            .push(value, vec![self.id, other.id], Some(Box::new(back)), rg)
    }

    pub fn add(&self, other: Var<'t, S>) -> Var<'t, S> {
        let v = self.value().add(&other.value());
        self.binary(other, v, |g, _| vec![g.clone(), g.clone()])
    }

    pub fn sub(&self, other: Var<'t, S>) -> Var<'t, S> {
        let v = self.value().sub(&other.value());
        self.binary(other, v, |g, _| vec![g.clone(), g.scale(-S::one())])
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t, S>) -> Var<'t, S> {
        let v = self.value().mul(&other.value());
        self.binary(other, v, |g, p| vec![g.mul(p[1]), g.mul(p[0])])
    }

    pub fn scale(&self, k: S) -> Var<'t, S> {
        let v = self.value().scale(k);
        self.unary(v, move |g, _| vec![g.scale(k)])
    }

    /// Add a constant tensor (no gradient through the constant).
    pub fn add_const(&self, c: &Tensor<S>) -> Var<'t, S> {
        let v = self.value().add(c);
        self.unary(v, |g, _| vec![g.clone()])
    }

    /// Matrix `[p x q]` plus row vector `[q]` broadcast over rows.
    pub fn add_row(&self, row: Var<'t, S>) -> Var<'t, S> {
        let a = self.value();
        let b = row.value();
        let (p, q) = a.dims2().expect("add_row lhs must be a matrix");
        debug_assert_eq!(b.numel(), q, "add_row vector length");
        let mut out = a.clone();
        for i in 0..p {
            for j in 0..q {
                let v = out.at(i, j) + b.data()[j];
                out.set(i, j, v);
            }
        }
        self.binary(row, out, move |g, _| {
            let mut db = Tensor::zeros(&[q]);
            for i in 0..p {
                for j in 0..q {
                    db.data_mut()[j] = db.data_mut()[j] + g.at(i, j);
                }
            }
            vec![g.clone(), db]
        })
    }

    pub fn matmul(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(other, v, |g, p| {
            // dA = g * B^T ; dB = A^T * g
            let da = g.matmul_nt(p[1]).expect("matmul backward dA");
            let db = p[0].matmul_tn(g).expect("matmul backward dB");
            vec![da, db]
        }))
    }

    /// `A * B^T`.
    pub fn matmul_nt(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let v = self.value().matmul_nt(&other.value())?;
        Ok(self.binary(other, v, |g, p| {
            // C = A B^T : dA = g * B ; dB = g^T * A
            let da = g.matmul(p[1]).expect("matmul_nt backward dA");
            let db = g.matmul_tn(p[0]).expect("matmul_nt backward dB");
            vec![da, db]
        }))
    }

    pub fn tanh(&self) -> Var<'t, S> {
        let y = self.value().map(|x| x.tanh());
        let ysave = y.clone();
        self.unary(y, move |g, _| {
            vec![g.zip(&ysave, |gi, yi| gi * (S::one() - yi * yi))]
        })
    }

    pub fn sigmoid(&self) -> Var<'t, S> {
        let y = self.value().map(|x| S::one() / (S::one() + (-x).exp()));
        let ysave = y.clone();
        self.unary(y, move |g, _| {
            vec![g.zip(&ysave, |gi, yi| gi * yi * (S::one() - yi))]
        })
    }

    /// GELU, tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&self) -> Var<'t, S> {
        let y = self.value().map(gelu_scalar);
        self.unary(y, |g, p| {
            vec![g.zip(p[0], |gi, xi| gi * gelu_grad_scalar(xi))]
        })
    }

    /// Row-wise temperature softmax. `-inf` entries map to exactly zero
    /// weight and receive zero gradient. A row of all `-inf` is an error.
    pub fn row_softmax(&self, tau: S) -> Result<Var<'t, S>> {
        if tau <= S::zero() {
            return Err(Error::config(format!("softmax temperature {} <= 0", tau)));
        }
        let x = self.value();
        let y = row_softmax_tensor(&x, tau)?;
        let ysave = y.clone();
        Ok(self.unary(y, move |g, _| {
            vec![softmax_backward(g, &ysave, tau)]
        }))
    }

    /// Straight-through row hardmax: forward emits exact one-hot rows at
    /// the row argmax (ties break to the lowest index); backward passes the
    /// gradient through unchanged to the soft input.
    pub fn hardmax_st(&self) -> Var<'t, S> {
        let y = row_hardmax_tensor(&self.value());
        self.unary(y, |g, _| vec![g.clone()])
    }

    /// Layer normalization over each row, with per-column gain and bias.
    pub fn layer_norm(&self, gain: Var<'t, S>, bias: Var<'t, S>, eps: S) -> Var<'t, S> {
        let x = self.value();
        let (p, q) = x.dims2().expect("layer_norm input must be a matrix");
        let gv = gain.value();
        let bv = bias.value();
        debug_assert_eq!(gv.numel(), q);
        debug_assert_eq!(bv.numel(), q);

        let mut xhat = Tensor::zeros(&[p, q]);
        let mut inv_sigma = vec![S::zero(); p];
        let mut out = Tensor::zeros(&[p, q]);
        let nq = S::from_usize(q).unwrap();
        for i in 0..p {
            let row = x.row(i);
            let mean = row.iter().copied().sum::<S>() / nq;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<S>()
                / nq;
            let is = S::one() / (var + eps).sqrt();
            inv_sigma[i] = is;
            for j in 0..q {
                let xh = (row[j] - mean) * is;
                xhat.set(i, j, xh);
                out.set(i, j, xh * gv.data()[j] + bv.data()[j]);
            }
        }
        let rg = any_grad(self.tape, &[self.id, gain.id, bias.id]);
        self.tape.push(
            out,
            vec![self.id, gain.id, bias.id],
            Some(Box::new(move |g, _| {
                let mut dx = Tensor::zeros(&[p, q]);
                let mut dgain = Tensor::zeros(&[q]);
                let mut dbias = Tensor::zeros(&[q]);
                for i in 0..p {
                    let mut mean_dxhat = S::zero();
                    let mut mean_dxhat_xhat = S::zero();
                    for j in 0..q {
                        let gij = g.at(i, j);
                        let xh = xhat.at(i, j);
                        dgain.data_mut()[j] = dgain.data_mut()[j] + gij * xh;
                        dbias.data_mut()[j] = dbias.data_mut()[j] + gij;
                        let dxh = gij * gv.data()[j];
                        mean_dxhat = mean_dxhat + dxh;
                        mean_dxhat_xhat = mean_dxhat_xhat + dxh * xh;
                    }
                    mean_dxhat = mean_dxhat / nq;
                    mean_dxhat_xhat = mean_dxhat_xhat / nq;
                    for j in 0..q {
                        let dxh = g.at(i, j) * gv.data()[j];
                        let xh = xhat.at(i, j);
                        dx.set(
                            i,
                            j,
                            inv_sigma[i] * (dxh - mean_dxhat - xh * mean_dxhat_xhat),
                        );
                    }
                }
                vec![dx, dgain, dbias]
            })),
            rg,
        )
    }

    /// Mean negative log-likelihood of `targets` under row logits,
    /// skipping positions whose target equals `pad`.
    pub fn cross_entropy(&self, targets: &[usize], pad: Option<usize>) -> Result<Var<'t, S>> {
        let logits = self.value();
        let (p, vsz) = logits.dims2()?;
        if targets.len() != p {
            return Err(Error::shape(format!(
                "cross_entropy: {} rows vs {} targets",
                p,
                targets.len()
            )));
        }
        let active: Vec<usize> = (0..p)
            .filter(|&i| Some(targets[i]) != pad)
            .collect();
        if active.is_empty() {
            return Err(Error::data("cross_entropy: all positions padded"));
        }
        for &i in &active {
            if targets[i] >= vsz {
                return Err(Error::data(format!(
                    "cross_entropy: target {} out of vocabulary {}",
                    targets[i], vsz
                )));
            }
        }
        let probs = row_softmax_tensor(&logits, S::one())?;
        let n = S::from_usize(active.len()).unwrap();
        let mut loss = S::zero();
        for &i in &active {
            loss = loss - probs.at(i, targets[i]).ln();
        }
        loss = loss / n;
        let targets = targets.to_vec();
        let active_save = active;
        Ok(self.unary(Tensor::scalar(loss), move |g, _| {
            let scale = g.item() / n;
            let mut dl = Tensor::zeros(&[p, vsz]);
            for &i in &active_save {
                for j in 0..vsz {
                    let onehot = if j == targets[i] { S::one() } else { S::zero() };
                    dl.set(i, j, (probs.at(i, j) - onehot) * scale);
                }
            }
            vec![dl]
        }))
    }

    /// Gather rows of an embedding matrix by token id.
    pub fn embed(&self, ids: &[usize]) -> Result<Var<'t, S>> {
        let table = self.value();
        let (v, d) = table.dims2()?;
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (i, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::data(format!(
                    "embed: token id {} out of vocabulary {}",
                    id, v
                )));
            }
            for j in 0..d {
                out.set(i, j, table.at(id, j));
            }
        }
        let ids = ids.to_vec();
        Ok(self.unary(out, move |g, _| {
            let mut dt = Tensor::zeros(&[v, d]);
            for (i, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    let cur = dt.at(id, j);
                    dt.set(id, j, cur + g.at(i, j));
                }
            }
            vec![dt]
        }))
    }

    /// Columns `[lo, hi)` of a matrix.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Var<'t, S> {
        let x = self.value();
        let (p, q) = x.dims2().expect("slice_cols input must be a matrix");
        debug_assert!(lo < hi && hi <= q);
        let w = hi - lo;
        let mut out = Tensor::zeros(&[p, w]);
        for i in 0..p {
            for j in 0..w {
                out.set(i, j, x.at(i, lo + j));
            }
        }
        self.unary(out, move |g, _| {
            let mut dx = Tensor::zeros(&[p, q]);
            for i in 0..p {
                for j in 0..w {
                    dx.set(i, lo + j, g.at(i, j));
                }
            }
            vec![dx]
        })
    }

    /// One row of a matrix as `[1 x q]`.
    pub fn slice_row(&self, r: usize) -> Var<'t, S> {
        let x = self.value();
        let (p, q) = x.dims2().expect("slice_row input must be a matrix");
        debug_assert!(r < p);
        let out = Tensor::new(vec![1, q], x.row(r).to_vec()).unwrap();
        self.unary(out, move |g, _| {
            let mut dx = Tensor::zeros(&[p, q]);
            for j in 0..q {
                dx.set(r, j, g.at(0, j));
            }
            vec![dx]
        })
    }

    /// Single element as a `[1]` scalar node.
    pub fn index(&self, flat: usize) -> Var<'t, S> {
        let x = self.value();
        let n = x.numel();
        debug_assert!(flat < n);
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.data()[flat]);
        self.unary(out, move |g, _| {
            let mut dx = Tensor::zeros(&shape);
            dx.data_mut()[flat] = g.item();
            vec![dx]
        })
    }

    /// Multiply a tensor node by a `[1]` scalar node.
    pub fn scale_by(&self, scalar: Var<'t, S>) -> Var<'t, S> {
        let sv = scalar.value().item();
        let v = self.value().scale(sv);
        self.binary(scalar, v, move |g, p| {
            let dt = g.scale(p[1].item());
            let ds = Tensor::scalar(g.dot(p[0]));
            vec![dt, ds]
        })
    }

    pub fn sum(&self) -> Var<'t, S> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.unary(Tensor::scalar(x.sum()), move |g, _| {
            vec![Tensor::full(&shape, g.item())]
        })
    }

    pub fn mean(&self) -> Var<'t, S> {
        let x = self.value();
        let n = S::from_usize(x.numel()).unwrap();
        let shape = x.shape().to_vec();
        self.unary(Tensor::scalar(x.sum() / n), move |g, _| {
            vec![Tensor::full(&shape, g.item() / n)]
        })
    }

    /// Column-wise mean of a matrix, `[p x q] -> [1 x q]`.
    pub fn mean_rows(&self) -> Var<'t, S> {
        let x = self.value();
        let (p, q) = x.dims2().expect("mean_rows input must be a matrix");
        let np = S::from_usize(p).unwrap();
        let mut out = Tensor::zeros(&[1, q]);
        for i in 0..p {
            for j in 0..q {
                let v = out.at(0, j) + x.at(i, j) / np;
                out.set(0, j, v);
            }
        }
        self.unary(out, move |g, _| {
            let mut dx = Tensor::zeros(&[p, q]);
            for i in 0..p {
                for j in 0..q {
                    dx.set(i, j, g.at(0, j) / np);
                }
            }
            vec![dx]
        })
    }

    /// Stack `[1 x q]` rows into a `[k x q]` matrix.
    pub fn concat_rows(parts: &[Var<'t, S>]) -> Var<'t, S> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let q = parts[0].value().dims2().unwrap().1;
        let mut heights = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for part in parts {
            let v = part.value();
            let (h, w) = v.dims2().unwrap();
            debug_assert_eq!(w, q);
            heights.push(h);
            data.extend_from_slice(v.data());
        }
        let total: usize = heights.iter().sum();
        let value = Tensor::new(vec![total, q], data).unwrap();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = any_grad(tape, &ids);
        let heights_save = heights;
        tape.push(
            value,
            ids,
            Some(Box::new(move |g, _| {
                let mut out = Vec::with_capacity(heights_save.len());
                let mut row = 0;
                for &h in &heights_save {
                    let mut part = Tensor::zeros(&[h, q]);
                    for i in 0..h {
                        for j in 0..q {
                            part.set(i, j, g.at(row + i, j));
                        }
                    }
                    row += h;
                    out.push(part);
                }
                out
            })),
            rg,
        )
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(parts: &[Var<'t, S>]) -> Var<'t, S> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let p = parts[0].value().dims2().unwrap().0;
        let mut widths = Vec::with_capacity(parts.len());
        for part in parts {
            let (h, w) = part.value().dims2().unwrap();
            debug_assert_eq!(h, p);
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut value = Tensor::zeros(&[p, total]);
        let mut off = 0;
        for (part, &w) in parts.iter().zip(&widths) {
            let v = part.value();
            for i in 0..p {
                for j in 0..w {
                    value.set(i, off + j, v.at(i, j));
                }
            }
            off += w;
        }
        let ids: Vec<usize> = parts.iter().map(|x| x.id).collect();
        let rg = any_grad(tape, &ids);
        let widths_save = widths;
        tape.push(
            value,
            ids,
            Some(Box::new(move |g, _| {
                let mut out = Vec::with_capacity(widths_save.len());
                let mut off = 0;
                for &w in &widths_save {
                    let mut part = Tensor::zeros(&[p, w]);
                    for i in 0..p {
                        for j in 0..w {
                            part.set(i, j, g.at(i, off + j));
                        }
                    }
                    off += w;
                    out.push(part);
                }
                out
            })),
            rg,
        )
    }
}

pub(crate) fn gelu_scalar<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = S::from_f64_lossy(0.044_715);
    let half = S::from_f64_lossy(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy(0.797_884_560_802_865_4);
    let a = S::from_f64_lossy(0.044_715);
    let half = S::from_f64_lossy(0.5);
    let three = S::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}

/// Row-wise softmax with temperature on a plain tensor.
///
/// Stable via max subtraction; `-inf` entries yield exactly zero. Errors if
/// any row is entirely `-inf`.
pub fn row_softmax_tensor<S: Scalar>(x: &Tensor<S>, tau: S) -> Result<Tensor<S>> {
    if tau <= S::zero() {
        return Err(Error::config(format!("softmax temperature {} <= 0", tau)));
    }
    let (p, q) = x.dims2()?;
    let mut out = vec![S::zero(); p * q];
    for i in 0..p {
        let row = &x.data()[i * q..(i + 1) * q];
        let max = row
            .iter()
            .copied()
            .fold(S::neg_infinity(), |a, b| if b > a { b } else { a });
        if max == S::neg_infinity() {
            return Err(Error::numeric(format!(
                "softmax row {} has no finite entries",
                i
            )));
        }
        let mut sum = S::zero();
        let mut exps = vec![S::zero(); q];
        for j in 0..q {
            if row[j] == S::neg_infinity() {
                exps[j] = S::zero();
            } else {
                exps[j] = ((row[j] - max) / tau).exp();
            }
            sum = sum + exps[j];
        }
        for j in 0..q {
            out[i * q + j] = exps[j] / sum;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn softmax_backward<S: Scalar>(g: &Tensor<S>, y: &Tensor<S>, tau: S) -> Tensor<S> {
    let (p, q) = y.dims2().unwrap();
    let mut dx = vec![S::zero(); p * q];
    for i in 0..p {
        let mut dot = S::zero();
        for j in 0..q {
            dot = dot + g.data()[i * q + j] * y.data()[i * q + j];
        }
        for j in 0..q {
            dx[i * q + j] = y.data()[i * q + j] * (g.data()[i * q + j] - dot) / tau;
        }
    }
    Tensor::new(y.shape().to_vec(), dx).unwrap()
}

/// Row-wise one-hot at the argmax; ties break toward the lowest index.
pub fn row_hardmax_tensor<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (p, q) = x.dims2().unwrap();
    let mut out = vec![S::zero(); p * q];
    for i in 0..p {
        let row = &x.data()[i * q..(i + 1) * q];
        let mut best = 0;
        for j in 1..q {
            if row[j] > row[best] {
                best = j;
            }
        }
        out[i * q + best] = S::one();
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// Central-difference gradient check.
///
/// Builds the graph with `f` at `x`, runs backward, then compares against
/// per-coordinate central differences with step `h`. Returns the maximum over
/// coordinates of `|g_ad - g_fd| / (|g_fd| + 1e-8)`.
pub fn finite_diff_check<S, F>(f: F, x: &Tensor<S>, h: S) -> S
where
    S: Scalar,
    F: for<'a> Fn(&'a Tape<S>, Var<'a, S>) -> Var<'a, S>,
{
    let eval = |t: &Tensor<S>| -> S {
        let tape = Tape::new();
        let v = tape.leaf(t.clone());
        f(&tape, v).value().item()
    };
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, xv);
    let grads = tape.backward(y).expect("finite_diff_check backward");
    let g_ad = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let floor = S::from_f64_lossy(1e-8);
    let two = S::from_f64_lossy(2.0);
    let mut max_err = S::zero();
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] = plus.data_mut()[i] + h;
        let mut minus = x.clone();
        minus.data_mut()[i] = minus.data_mut()[i] - h;
        let g_fd = (eval(&plus) - eval(&minus)) / (two * h);
        let err = (g_ad.data()[i] - g_fd).abs() / (g_fd.abs() + floor);
        if err > max_err {
            max_err = err;
        }
    }
    max_err
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(id.matmul(&a).unwrap(), a);
        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(z.matmul(&a).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_hand_example() {
        // [[1,2],[3,4]] x [[5],[6]] = [[17],[39]]
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[5.0, 6.0]);
        assert_eq!(a.matmul(&b).unwrap(), t(&[2, 1], &[17.0, 39.0]));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[3, 1], &[5.0, 6.0, 7.0]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn softmax_symmetric_and_closed_form() {
        let x = t(&[1, 3], &[0.0, 0.0, 0.0]);
        let y = row_softmax_tensor(&x, 1.0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = t(&[1, 3], &[2.0f64.ln(), 0.0, 0.0]);
        let y = row_softmax_tensor(&x, 1.0).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-12);
        assert!((y.data()[1] - 0.25).abs() < 1e-12);
        assert!((y.data()[2] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_high_temperature_limit() {
        let x = t(&[1, 3], &[5.0, 1.0, 0.0]);
        let y = row_softmax_tensor(&x, 1e6).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-3);
        }
    }

    #[test]
    fn softmax_masked_and_degenerate() {
        let x = t(&[1, 3], &[1.0, f64::NEG_INFINITY, 0.0]);
        let y = row_softmax_tensor(&x, 1.0).unwrap();
        assert_eq!(y.data()[1], 0.0);
        assert!((y.sum() - 1.0).abs() < 1e-9);
        let all = t(&[1, 2], &[f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert!(row_softmax_tensor(&all, 1.0).is_err());
    }

    #[test]
    fn softmax_sums_to_one_across_taus() {
        let mut rng = crate::rngutil::seeded_rng(7);
        for tau in [1e-3, 0.1, 1.0, 37.0, 1e6] {
            for _ in 0..20 {
                let x = Tensor::<f64>::randn(&[3, 5], 4.0, &mut rng);
                let y = row_softmax_tensor(&x, tau).unwrap();
                for i in 0..3 {
                    let s: f64 = y.row(i).iter().sum();
                    assert!((s - 1.0).abs() < 1e-9);
                    assert!(y.row(i).iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        let x = 8.0f64;
        assert!((gelu_scalar(x) - x).abs() / x < 1e-6);
        assert!((gelu_scalar(1.0f64) - 0.8412).abs() < 1e-3);
    }

    #[test]
    fn cross_entropy_cases() {
        let tape = Tape::new();
        // Near-one-hot logits on the targets -> loss ~ 0.
        let big = 100.0;
        let logits = tape.leaf(t(&[2, 3], &[big, 0.0, 0.0, 0.0, big, 0.0]));
        let loss = logits.cross_entropy(&[0, 1], None).unwrap();
        assert!(loss.value().item() < 1e-6);

        // Uniform logits, V=4 -> ln 4.
        let logits = tape.leaf(Tensor::zeros(&[1, 4]));
        let loss = logits.cross_entropy(&[2], None).unwrap();
        assert!((loss.value().item() - 4.0f64.ln()).abs() < 1e-12);

        // Two-position hand example.
        let logits = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 2.0]));
        let loss = logits.cross_entropy(&[0, 1], None).unwrap();
        let nll = |z: &[f64], k: usize| -> f64 {
            let s: f64 = z.iter().map(|v| v.exp()).sum();
            -(z[k].exp() / s).ln()
        };
        let hand = (nll(&[1.0, 0.0], 0) + nll(&[0.0, 2.0], 1)) / 2.0;
        assert!((loss.value().item() - hand).abs() < 1e-6);

        // All padded -> error.
        let logits = tape.leaf(Tensor::zeros(&[2, 4]));
        assert!(logits.cross_entropy(&[0, 0], Some(0)).is_err());
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 3.0]));
        let grads = tape.backward(x.sum()).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &Tensor::ones(&[3]));

        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 3.0]));
        let grads = tape.backward(x.mul(x).sum()).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &t(&[3], &[2.0, -4.0, 6.0]));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_accumulates_over_reuse() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[3.0, 4.0]));
        // y = sum(x) + sum(x .* x) -> dy/dx = 1 + 2x
        let y = x.sum().add(x.mul(x).sum());
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &t(&[2], &[7.0, 9.0]));
    }

    #[test]
    fn backward_deterministic_across_reruns() {
        let run = || {
            let tape = Tape::new();
            let x = tape.leaf(t(&[2, 2], &[0.3, -0.7, 1.1, 0.2]));
            let w = tape.leaf(t(&[2, 2], &[0.5, 0.1, -0.4, 0.9]));
            let y = x.matmul(w).unwrap().gelu().sum();
            let g = tape.backward(y).unwrap();
            (g.wrt(x).unwrap().clone(), g.wrt(w).unwrap().clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn finite_diff_trivial_cases() {
        // Sum of squares is exact up to O(h^2).
        let x = t(&[4], &[0.5, -1.5, 2.0, 0.1]);
        let err = finite_diff_check(|_, v| v.mul(v).sum(), &x, 1e-4);
        assert!(err < 1e-6, "err = {err}");
        // Constant function: both sides zero.
        let err = finite_diff_check(
            |tape, _| tape.leaf(Tensor::scalar(3.0)).scale(1.0),
            &x,
            1e-4,
        );
        assert_eq!(err, 0.0);
    }

    #[test]
    fn finite_diff_all_ops_randomized() {
        let mut rng = crate::rngutil::seeded_rng(42);
        for seed in 0..50u64 {
            let _ = seed;
            let x = Tensor::<f64>::randn(&[3, 4], 0.8, &mut rng);
            let w = Tensor::<f64>::randn(&[4, 3], 0.8, &mut rng);
            let gain = Tensor::<f64>::randn(&[4], 0.3, &mut rng).map(|v| v + 1.0);
            let bias = Tensor::<f64>::randn(&[4], 0.3, &mut rng);
            let wc = w.clone();
            let gc = gain.clone();
            let bc = bias.clone();
            let err = finite_diff_check(
                move |tape, v| {
                    let w = tape.leaf(wc.clone());
                    let gain = tape.leaf(gc.clone());
                    let bias = tape.leaf(bc.clone());
                    let h = v.layer_norm(gain, bias, 1e-5);
                    let h = h.matmul(w).unwrap().gelu();
                    let h = h.matmul_nt(w.slice_cols(0, 3)).unwrap();
                    let sm = h.row_softmax(0.7).unwrap();
                    sm.mul(sm).sum().add(h.tanh().mean()).add(h.sigmoid().sum().scale(0.1))
                },
                &x,
                1e-4,
            );
            assert!(err < 1e-4, "gradient check failed: {err}");
        }
    }

    #[test]
    fn finite_diff_embed_and_cross_entropy() {
        let mut rng = crate::rngutil::seeded_rng(9);
        let table = Tensor::<f64>::randn(&[5, 3], 0.5, &mut rng);
        let err = finite_diff_check(
            |_tape, v| {
                let e = v.embed(&[0, 3, 3, 1]).unwrap();
                e.cross_entropy(&[1, 0, 2, 1], None).unwrap()
            },
            &table,
            1e-5,
        );
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn hardmax_st_forward_and_backward() {
        let tape = Tape::new();
        let l = tape.leaf(t(&[2, 3], &[0.1, 0.9, 0.2, 0.5, 0.5, 0.4]));
        let soft = l.row_softmax(1.0).unwrap();
        let hard = soft.hardmax_st();
        // Forward is exact one-hot; ties break to the lowest index.
        assert_eq!(
            hard.value(),
            t(&[2, 3], &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0])
        );
        // Backward flows through the soft distribution.
        let y = hard.index(1).scale_by(tape.constant(Tensor::scalar(2.0)));
        let grads = tape.backward(y).unwrap();
        let gl = grads.wrt(l).unwrap();
        assert!(gl.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn scale_by_and_index_gradients() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let err = finite_diff_check(
            |_, v| {
                let s = v.index(3);
                v.scale_by(s).sum()
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn concat_and_slice_gradients() {
        let x = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let err = finite_diff_check(
            |_, v| {
                let a = v.slice_cols(0, 2);
                let b = v.slice_cols(2, 4);
                let cat = Var::concat_cols(&[b, a]);
                let r0 = cat.slice_row(0);
                let r1 = cat.slice_row(1);
                Var::concat_rows(&[r1, r0]).mul(cat).sum()
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn mean_rows_matches_hand() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(x.mean_rows().value(), t(&[1, 2], &[2.0, 3.0]));
    }

    #[test]
    fn masked_logits_receive_zero_gradient() {
        let tape = Tape::new();
        let l = tape.leaf(t(&[1, 3], &[1.0, 0.0, 0.5]));
        let mask = t(&[1, 3], &[0.0, f64::NEG_INFINITY, 0.0]);
        let d = l.add_const(&mask).row_softmax(1.0).unwrap();
        let grads = tape.backward(d.mul(d).sum()).unwrap();
        let gl = grads.wrt(l).unwrap();
        assert_eq!(gl.at(0, 1), 0.0);
        assert!(gl.at(0, 0) != 0.0);
    }

    #[test]
    fn uniform01_is_open_interval() {
        let mut rng = crate::rngutil::seeded_rng(1);
        for _ in 0..1000 {
            let u = f64::uniform_open01(&mut rng);
            assert!(u > 0.0 && u < 1.0);
        }
        let _ = rng.gen::<f64>();
    }
}
