//! Reverse-mode differentiation over a linear tape.
//!
//! Every differentiable operation appends a node holding its parents and a
//! closure that maps the node's output gradient to one gradient per parent.
//! Nodes are appended in evaluation order, so walking the tape backwards
//! visits them in reverse topological order.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use indexmap::IndexMap;

use super::ops::{self, BnMode, BnStats, PoolMode};
use super::{Scalar, Tensor};
use crate::error::{Result, TensorError};

type Backward<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<usize>,
    backward: Option<Backward<T>>,
    param: Option<String>,
    shape: Vec<usize>,
}

/// Record of primitive applications for one forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
    macs: Cell<u64>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Clone)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
    value: Arc<Tensor<T>>,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value)
    }
}

/// Gradients keyed by parameter name, in registration order.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    map: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map.get(name).ok_or_else(|| TensorError::ParamNotOnTape(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), recording: true, macs: Cell::new(0) }
    }

    /// A tape that evaluates without storing backward closures.
    pub fn inference() -> Self {
        Tape { recording: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Multiply-accumulates executed by matmul and convolution nodes so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn add_macs(&self, n: u64) {
        self.macs.set(self.macs.get() + n);
    }

    fn push(&self, value: Tensor<T>, parents: Vec<usize>, backward: Option<Backward<T>>, param: Option<String>) -> Var<'_, T> {
        self.push_arc(Arc::new(value), parents, backward, param)
    }

    fn push_arc(
        &self,
        value: Arc<Tensor<T>>,
        parents: Vec<usize>,
        backward: Option<Backward<T>>,
        param: Option<String>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            parents,
            backward: if self.recording { backward } else { None },
            param,
            shape: value.shape().to_vec(),
        });
        Var { tape: self, id, value }
    }

    /// Differentiable leaf registered under `name`.
    pub fn param(&self, name: impl Into<String>, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, vec![], None, Some(name.into()))
    }

    pub fn param_shared(&self, name: impl Into<String>, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.push_arc(value, vec![], None, Some(name.into()))
    }

    /// Leaf that receives no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, vec![], None, None)
    }

    /// Gradients of a scalar `loss` with respect to the named parameters.
    pub fn grad(&self, loss: &Var<'_, T>, params: &[&str]) -> Result<Gradients<T>> {
        let all = self.gradients(loss)?;
        let mut map = IndexMap::new();
        for &p in params {
            map.insert(p.to_string(), all.get(p)?.clone());
        }
        Ok(Gradients { map })
    }

    /// Gradients of a scalar `loss` with respect to every parameter on the tape.
    /// Parameters the loss does not depend on get zeros.
    pub fn gradients(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(TensorError::NotScalar(loss.value.shape().to_vec()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(loss.value.shape(), T::one()));
        let mut out = IndexMap::new();
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if let Some(name) = &node.param {
                let g = grads[id].take().unwrap_or_else(|| Tensor::zeros(&node.shape));
                match out.get_mut(name) {
                    Some(acc) => Tensor::add_assign_tensor(acc, &g),
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let Some(backward) = &node.backward else { continue };
            for (pid, pg) in node.parents.iter().zip(backward(&g)) {
                let Some(pg) = pg else { continue };
                match &mut grads[*pid] {
                    Some(acc) => acc.add_assign_tensor(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        out.reverse();
        // parameters registered after the loss
        for node in nodes.iter() {
            if let Some(name) = &node.param {
                out.entry(name.clone()).or_insert_with(|| Tensor::zeros(&node.shape));
            }
        }
        Ok(Gradients { map: out })
    }
}

fn same_tape<T: Scalar>(a: &Var<'_, T>, b: &Var<'_, T>) {
    assert!(std::ptr::eq(a.tape, b.tape), "vars belong to different tapes");
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    fn unary(&self, value: Tensor<T>, backward: impl Fn(&Tensor<T>) -> Tensor<T> + 'static) -> Var<'t, T> {
        self.tape.push(
            value,
            vec![self.id],
            Some(Box::new(move |g| vec![Some(backward(g))])),
            None,
        )
    }

    /// `op(self) * op(other)`; see [`ops::matmul_t`].
    pub fn matmul_t(&self, ta: bool, other: &Var<'t, T>, tb: bool) -> Result<Var<'t, T>> {
        same_tape(self, other);
        let value = ops::matmul_t(&self.value, ta, &other.value, tb)?;
        self.tape.add_macs(ops::matmul_macs(&self.value, ta, &other.value, tb));
        let (a, b) = (self.value.clone(), other.value.clone());
        let backward: Backward<T> = Box::new(move |g| {
            let fold = |t: Tensor<T>, like: &Tensor<T>| {
                if t.rank() > like.rank() {
                    ops::sum_leading(&t)
                } else {
                    t
                }
            };
            let da = if ta { ops::matmul_t(&b, tb, g, true) } else { ops::matmul_t(g, false, &b, !tb) };
            let db = if tb { ops::matmul_t(g, true, &a, ta) } else { ops::matmul_t(&a, !ta, g, false) };
            vec![
                Some(fold(da.expect("shapes validated in forward"), &a)),
                Some(fold(db.expect("shapes validated in forward"), &b)),
            ]
        });
        Ok(self.tape.push(value, vec![self.id, other.id], Some(backward), None))
    }

    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_t(false, other, false)
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(self, other);
        let value = self.value.zip_map(&other.value, |a, b| a + b)?.finite("add")?;
        let backward: Backward<T> = Box::new(|g| vec![Some(g.clone()), Some(g.clone())]);
        Ok(self.tape.push(value, vec![self.id, other.id], Some(backward), None))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(self, other);
        let value = self.value.zip_map(&other.value, |a, b| a * b)?.finite("mul")?;
        let (a, b) = (self.value.clone(), other.value.clone());
        let backward: Backward<T> = Box::new(move |g| {
            vec![
                Some(g.zip_map(&b, |x, y| x * y).expect("same shape")),
                Some(g.zip_map(&a, |x, y| x * y).expect("same shape")),
            ]
        });
        Ok(self.tape.push(value, vec![self.id, other.id], Some(backward), None))
    }

    pub fn scale(&self, s: T) -> Result<Var<'t, T>> {
        let value = self.value.map(|v| v * s).finite("scale")?;
        Ok(self.unary(value, move |g| g.map(|v| v * s)))
    }

    /// Add a per-channel bias along `axis` (e.g. axis 1 of `[N, K]` or `[N, C, H, W]`).
    pub fn add_bias(&self, bias: &Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
        same_tape(self, bias);
        let shape = self.value.shape().to_vec();
        if axis >= shape.len() || bias.value.shape() != [shape[axis]] {
            return Err(TensorError::shape(
                "add_bias",
                format!("bias {:?} on axis {axis} of {:?}", bias.value.shape(), shape),
            ));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let ch = shape[axis];
        let bd = bias.value.data().to_vec();
        let data: Vec<T> = self
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[(i / inner) % ch])
            .collect();
        let value = Tensor::from_parts(shape, data).finite("add_bias")?;
        let backward: Backward<T> = Box::new(move |g| {
            let mut db = vec![T::zero(); ch];
            for (i, &v) in g.data().iter().enumerate() {
                db[(i / inner) % ch] += v;
            }
            vec![Some(g.clone()), Some(Tensor::from_parts(vec![ch], db))]
        });
        Ok(self.tape.push(value, vec![self.id, bias.id], Some(backward), None))
    }

    pub fn relu(&self) -> Var<'t, T> {
        let value = self.value.map(|v| v.max(T::zero()));
        let x = self.value.clone();
        self.unary(value, move |g| {
            g.zip_map(&x, |gv, xv| if xv > T::zero() { gv } else { T::zero() }).expect("same shape")
        })
    }

    pub fn sum(&self) -> Var<'t, T> {
        let shape = self.value.shape().to_vec();
        self.unary(Tensor::scalar(self.value.sum()), move |g| Tensor::full(&shape, g.item()))
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        let n = T::of(self.value.numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.value.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid("mean_axis", format!("axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let inv = T::one() / T::of(len as f64);
        let src = self.value.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * len + j) * inner + i];
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let value = Tensor::from_parts(oshape, out);
        Ok(self.unary(value, move |g| {
            let mut dx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        dx[(o * len + j) * inner + i] = g.data()[o * inner + i] * inv;
                    }
                }
            }
            Tensor::from_parts(shape.clone(), dx)
        }))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let value = ops::softmax_axis(&self.value, axis)?;
        let y = Arc::new(value.clone());
        Ok(self.unary(value, move |g| ops::softmax_backward(&y, g, axis)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = (*self.value).clone().reshape(shape)?;
        let orig = self.value.shape().to_vec();
        Ok(self.unary(value, move |g| g.clone().reshape(&orig).expect("same numel")))
    }

    pub fn transpose_last2(&self) -> Var<'t, T> {
        self.unary(self.value.transpose_last2(), |g| g.transpose_last2())
    }

    /// Concatenate along axis 1.
    pub fn concat1(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let rank = first.value.rank();
        let outer = first.value.dim(0);
        let inner: usize = first.value.shape()[2..].iter().product();
        for p in parts {
            same_tape(first, p);
            if p.value.rank() != rank || p.value.dim(0) != outer || p.value.shape()[2..] != first.value.shape()[2..] {
                return Err(TensorError::shape(
                    "concat",
                    format!("{:?} vs {:?}", p.value.shape(), first.value.shape()),
                ));
            }
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.value.dim(1)).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.value.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.value.shape().to_vec();
        shape[1] = total;
        let value = Tensor::from_parts(shape, data);
        let pshapes: Vec<Vec<usize>> = parts.iter().map(|p| p.value.shape().to_vec()).collect();
        let backward: Backward<T> = Box::new(move |g| {
            let mut outs: Vec<Vec<T>> = lens.iter().map(|l| Vec::with_capacity(outer * l * inner)).collect();
            for o in 0..outer {
                let mut off = 0;
                for (k, &l) in lens.iter().enumerate() {
                    let start = (o * total + off) * inner;
                    outs[k].extend_from_slice(&g.data()[start..start + l * inner]);
                    off += l;
                }
            }
            outs.into_iter()
                .zip(&pshapes)
                .map(|(d, s)| Some(Tensor::from_parts(s.clone(), d)))
                .collect()
        });
        Ok(first.tape.push(value, parts.iter().map(|p| p.id).collect(), Some(backward), None))
    }

    /// Slice `[start, start + len)` of axis 1.
    pub fn narrow1(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let shape = self.value.shape().to_vec();
        if shape.len() < 2 || len == 0 || start + len > shape[1] {
            return Err(TensorError::invalid("narrow", format!("[{start}, +{len}) of {shape:?}")));
        }
        let outer = shape[0];
        let total = shape[1];
        let inner: usize = shape[2..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * total + start) * inner;
            data.extend_from_slice(&self.value.data()[s..s + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[1] = len;
        let value = Tensor::from_parts(oshape, data);
        Ok(self.unary(value, move |g| {
            let mut dx = vec![T::zero(); outer * total * inner];
            for o in 0..outer {
                let s = (o * total + start) * inner;
                dx[s..s + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            Tensor::from_parts(shape.clone(), dx)
        }))
    }

    pub fn conv2d(&self, weight: &Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        same_tape(self, weight);
        let value = ops::conv2d(&self.value, &weight.value, stride, pad)?;
        let (n, c, o, g) = ops::conv_geometry(&self.value, &weight.value, stride, pad)?;
        self.tape.add_macs(ops::conv2d_macs(n, c, o, &g));
        let (x, w) = (self.value.clone(), weight.value.clone());
        let backward: Backward<T> = Box::new(move |g| {
            let (dx, dw) = ops::conv2d_backward(&x, &w, g, stride, pad).expect("validated in forward");
            vec![Some(dx), Some(dw)]
        });
        Ok(self.tape.push(value, vec![self.id, weight.id], Some(backward), None))
    }

    pub fn pool2d(&self, mode: PoolMode) -> Result<Var<'t, T>> {
        let (value, argmax) = ops::pool2d_with_index(&self.value, mode)?;
        let in_shape = self.value.shape().to_vec();
        Ok(self.unary(value, move |g| ops::pool2d_backward(&in_shape, mode, argmax.as_deref(), g)))
    }

    /// Batch norm with learnable `gamma`/`beta`. In train mode the batch
    /// statistics are returned so the caller can fold them into its running
    /// stats.
    pub fn batch_norm(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        stats: &BnStats<T>,
        mode: BnMode,
    ) -> Result<(Var<'t, T>, Option<(Vec<T>, Vec<T>)>)> {
        same_tape(self, gamma);
        same_tape(self, beta);
        let f = ops::batch_norm_forward(&self.value, &gamma.value, &beta.value, stats, mode)?;
        let batch = (mode == BnMode::Train).then(|| (f.batch_mean.clone(), f.batch_var_unbiased.clone()));
        let (xhat, inv_std, gm) = (f.xhat, f.inv_std, gamma.value.clone());
        let backward: Backward<T> = Box::new(move |g| {
            let (dx, dg, db) = ops::batch_norm_backward(g, &xhat, &gm, &inv_std, mode);
            vec![Some(dx), Some(dg), Some(db)]
        });
        let out = self.tape.push(f.out, vec![self.id, gamma.id, beta.id], Some(backward), None);
        Ok((out, batch))
    }

    pub fn upsample_bilinear(&self, oh: usize, ow: usize) -> Result<Var<'t, T>> {
        let value = ops::upsample_bilinear(&self.value, oh, ow)?;
        let in_shape = self.value.shape().to_vec();
        Ok(self.unary(value, move |g| ops::upsample_bilinear_backward(&in_shape, g)))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t, T>> {
        let [n, k] = *self.value.shape() else {
            return Err(TensorError::shape("cross_entropy", format!("logits {:?}", self.value.shape())));
        };
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(TensorError::invalid("cross_entropy", format!("{} labels for {n}x{k} logits", labels.len())));
        }
        let probs = ops::softmax_axis(&self.value, 1)?;
        let mut loss = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            let row = &self.value.data()[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            loss += lse - row[l];
        }
        let nf = T::of(n as f64);
        let value = Tensor::scalar(loss / nf).finite("cross_entropy")?;
        let labels = labels.to_vec();
        Ok(self.unary(value, move |g| {
            let mut d = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                d.data_mut()[i * k + l] -= T::one();
            }
            let s = g.item() / nf;
            d.map(|v| v * s)
        }))
    }
}
