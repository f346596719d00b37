use std::collections::HashMap;

use super::kernels;
use super::{numel, Real, Tensor, TensorId};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        shared_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        k: T,
    },
    Softmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sigmoid {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    Narrow {
        a: Var,
        outer: usize,
        len_in: usize,
        start: usize,
        inner: usize,
    },
    Expand {
        a: Var,
        times: usize,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Bce {
        p: Var,
        target: Vec<T>,
        clamp: T,
    },
    SoftCrossEntropy {
        logits: Var,
        target: Vec<T>,
        probs: Vec<T>,
        cols: usize,
    },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation in topological order.
///
/// Parameters enter through [`Tape::param`]; registering the same tensor
/// twice returns the same [`Var`], so a shared block used for several tasks
/// accumulates its gradient in one place.
#[derive(Debug)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<TensorId, Var>,
    grad_enabled: bool,
    non_finite: Option<&'static str>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            non_finite: None,
        }
    }

    /// A tape that never tracks gradients, for inference.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Moves a value out of the tape as a detached tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        self.nodes[v.0].value.detached()
    }

    /// First operation that produced a NaN or infinity, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(name);
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn raw(&self, shape: &[usize], data: Vec<T>) -> Tensor<T> {
        debug_assert_eq!(numel(shape), data.len());
        Tensor::new(shape, data).expect("shape checked by caller")
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push("constant", t, Op::Leaf, false)
    }

    /// A model parameter. Tracks gradients when the tensor has
    /// `requires_grad` set and this tape is not an inference tape.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&t.id()) {
            return v;
        }
        let v = self.push("param", t.clone(), Op::Leaf, t.requires_grad);
        self.params.insert(t.id(), v);
        v
    }

    /// Matrix product over the last two extents.
    ///
    /// `b` is either 2-D (shared across every leading index of `a`) or has
    /// the same leading extents as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two extents; `b` must share `a`'s leading extents.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: need rank >= 2")));
        }
        let k = sa[sa.len() - 1];
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: inner extents differ")));
        }
        let shared_b = sb.len() == 2 && !trans_b;
        let (batch, m) = if shared_b {
            (1, numel(&sa[..sa.len() - 1]))
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(Error::shape(
                    "matmul",
                    format!("{sa:?} x {sb:?}: batch extents differ"),
                ));
            }
            (numel(&sa[..sa.len() - 2]), sa[sa.len() - 2])
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for bi in 0..batch {
                let a_s = &ad[bi * m * k..(bi + 1) * m * k];
                let b_s = if shared_b { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
                let c_s = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    kernels::gemm_nt(a_s, b_s, c_s, m, k, n);
                } else {
                    kernels::gemm_nn(a_s, b_s, c_s, m, k, n);
                }
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let value = self.raw(&shape, out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            "matmul",
            value,
            Op::MatMul {
                a,
                b,
                trans_b,
                shared_b,
                batch,
                m,
                k,
                n,
            },
            ng,
        ))
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, format!("{sa:?} with {sb:?}")));
        }
        Ok(())
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, bool)> {
        self.check_suffix(name, a, b)?;
        let (ad, bd) = (self.data(a), self.data(b));
        let w = bd.len().max(1);
        let out: Vec<T> = ad
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % w]))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok((self.raw(&shape, out), ng))
    }

    /// `a + b`, where `b`'s shape is a suffix of `a`'s (bias broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, ng) = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push("add", v, Op::Add { a, b }, ng))
    }

    /// Element-wise `a - b` of equal shapes.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "sub",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (v, ng) = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push("sub", v, Op::Sub { a, b }, ng))
    }

    /// Element-wise product; `b` broadcasts as in [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, ng) = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push("mul", v, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out: Vec<T> = self.data(a).iter().map(|&x| x * k).collect();
        let v = self.raw(self.shape(a), out);
        let ng = self.needs(a);
        self.push("scale", v, Op::Scale { a, k }, ng)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let out = kernels::softmax(self.data(a), outer, len, inner);
        let v = self.raw(&shape, out);
        let ng = self.needs(a);
        Ok(self.push("softmax", v, Op::Softmax { a, outer, len, inner }, ng))
    }

    /// Layer normalisation over the last extent with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {shape:?}, gain {:?}, bias {:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let (y, xhat, rstd) =
            kernels::layer_norm(self.data(x), self.data(gain), self.data(bias), d, eps);
        let v = self.raw(&shape, y);
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        let (xhat, rstd) = if ng && self.grad_enabled {
            (xhat, rstd)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.push(
            "layer_norm",
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out: Vec<T> = self.data(a).iter().map(|&x| kernels::sigmoid(x)).collect();
        let v = self.raw(self.shape(a), out);
        let ng = self.needs(a);
        self.push("sigmoid", v, Op::Sigmoid { a }, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<T> = self.data(a).iter().map(|&x| kernels::gelu(x)).collect();
        let v = self.raw(self.shape(a), out);
        let ng = self.needs(a);
        self.push("gelu", v, Op::Gelu { a }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let v = self.raw(shape, self.data(a).to_vec());
        let ng = self.needs(a);
        Ok(self.push("reshape", v, Op::Reshape { a }, ng))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} for shape {shape:?}")));
        }
        let (out, out_shape) = kernels::permute(self.data(a), &shape, perm);
        let v = self.raw(&out_shape, out);
        let ng = self.needs(a);
        Ok(self.push(
            "permute",
            v,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            ng,
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::shape("concat", format!("{first:?} with {s:?}")));
            }
            sizes.push((p, s[axis]));
        }
        let (outer, _, inner) = kernels::axis_split(&first, axis);
        let total: usize = sizes.iter().map(|s| s.1).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, len) in &sizes {
                let d = self.data(p);
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = self.raw(&shape, out);
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            "concat",
            v,
            Op::Concat {
                parts: sizes,
                outer,
                inner,
            },
            ng,
        ))
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("{start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, len_in, inner) = kernels::axis_split(&shape, axis);
        let d = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * len_in * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let v = self.raw(&out_shape, out);
        let ng = self.needs(a);
        Ok(self.push(
            "narrow",
            v,
            Op::Narrow {
                a,
                outer,
                len_in,
                start,
                inner,
            },
            ng,
        ))
    }

    /// Repeats `a` along a new leading axis of extent `times`.
    pub fn expand(&mut self, a: Var, times: usize) -> Var {
        let d = self.data(a);
        let mut out = Vec::with_capacity(d.len() * times);
        for _ in 0..times {
            out.extend_from_slice(d);
        }
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(a));
        let v = self.raw(&shape, out);
        let ng = self.needs(a);
        self.push("expand", v, Op::Expand { a, times }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.data(a).iter().copied().sum();
        let ng = self.needs(a);
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s: T = d.iter().copied().sum::<T>() / T::lit(d.len().max(1) as f64);
        let ng = self.needs(a);
        self.push("mean", Tensor::scalar(s), Op::Mean { a }, ng)
    }

    /// Mean binary cross-entropy between probabilities `p` and (soft)
    /// targets, with probabilities clamped to `[clamp, 1 - clamp]`.
    pub fn bce(&mut self, p: Var, target: Vec<T>, clamp: T) -> Result<Var> {
        if target.len() != self.value(p).numel() {
            return Err(Error::shape(
                "bce",
                format!("{} targets for probabilities {:?}", target.len(), self.shape(p)),
            ));
        }
        let hi = T::one() - clamp;
        let n = T::lit(target.len().max(1) as f64);
        let total: T = self
            .data(p)
            .iter()
            .zip(&target)
            .map(|(&pv, &y)| {
                let pc = pv.max(clamp).min(hi);
                -(y * pc.ln() + (T::one() - y) * (T::one() - pc).ln())
            })
            .sum();
        let ng = self.needs(p);
        Ok(self.push(
            "bce",
            Tensor::scalar(total / n),
            Op::Bce { p, target, clamp },
            ng,
        ))
    }

    /// Mean over rows of `-Σ_c target_c · log softmax(logits)_c`.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Vec<T>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || target.len() != numel(&shape) {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {shape:?} with {} targets", target.len()),
            ));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let d = self.data(logits);
        let probs = kernels::softmax(d, rows, cols, 1);
        let mut total = T::zero();
        for r in 0..rows {
            let row = &d[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for c in 0..cols {
                total = total - target[r * cols + c] * (row[c] - lse);
            }
        }
        let ng = self.needs(logits);
        Ok(self.push(
            "cross_entropy",
            Tensor::scalar(total / T::lit(rows.max(1) as f64)),
            Op::SoftCrossEntropy {
                logits,
                target,
                probs,
                cols,
            },
            ng,
        ))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.value(loss);
        if ls.numel() != 1 {
            return Err(Error::NonScalarLoss(ls.shape().to_vec()));
        }
        self.check_finite()?;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, &x)| *b = *b + x),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_b,
                shared_b,
                batch,
                m,
                k,
                n,
            } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if self.needs(a) {
                    let mut da = vec![T::zero(); ad.len()];
                    for bi in 0..batch {
                        let g_s = &g[bi * m * n..(bi + 1) * m * n];
                        let b_s = if shared_b { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
                        let da_s = &mut da[bi * m * k..(bi + 1) * m * k];
                        if trans_b {
                            kernels::gemm_nn(g_s, b_s, da_s, m, n, k);
                        } else {
                            kernels::gemm_nt(g_s, b_s, da_s, m, n, k);
                        }
                    }
                    self.accumulate(grads, a, da);
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); bd.len()];
                    for bi in 0..batch {
                        let g_s = &g[bi * m * n..(bi + 1) * m * n];
                        let a_s = &ad[bi * m * k..(bi + 1) * m * k];
                        let db_s = if shared_b {
                            &mut db[..]
                        } else {
                            &mut db[bi * k * n..(bi + 1) * k * n]
                        };
                        if trans_b {
                            kernels::gemm_tn(g_s, a_s, db_s, m, n, k);
                        } else {
                            kernels::gemm_tn(a_s, g_s, db_s, m, k, n);
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, g.to_vec());
                if self.needs(b) {
                    self.accumulate(grads, b, fold_suffix(g, self.value(b).numel()));
                }
            }
            &Op::Sub { a, b } => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.iter().map(|&x| -x).collect());
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (self.data(a), self.data(b));
                let w = bd.len().max(1);
                if self.needs(a) {
                    let da = g.iter().enumerate().map(|(i, &x)| x * bd[i % w]).collect();
                    self.accumulate(grads, a, da);
                }
                if self.needs(b) {
                    let prod: Vec<T> = g.iter().zip(ad).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, b, fold_suffix(&prod, w));
                }
            }
            &Op::Scale { a, k } => {
                self.accumulate(grads, a, g.iter().map(|&x| x * k).collect());
            }
            &Op::Softmax {
                a,
                outer,
                len,
                inner,
            } => {
                let dx = kernels::softmax_backward(out.data(), g, outer, len, inner);
                self.accumulate(grads, a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gd = self.data(*gain);
                let (dx, dgain, dbias) =
                    kernels::layer_norm_backward(g, xhat, rstd, gd, gd.len());
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *bias, dbias);
            }
            &Op::Sigmoid { a } => {
                let dx = g
                    .iter()
                    .zip(out.data())
                    .map(|(&x, &y)| x * y * (T::one() - y))
                    .collect();
                self.accumulate(grads, a, dx);
            }
            &Op::Gelu { a } => {
                let dx = g
                    .iter()
                    .zip(self.data(a))
                    .map(|(&x, &v)| x * kernels::gelu_grad(v))
                    .collect();
                self.accumulate(grads, a, dx);
            }
            &Op::Reshape { a } => self.accumulate(grads, a, g.to_vec()),
            Op::Permute { a, perm } => {
                let inv = kernels::inverse_permutation(perm);
                let (dx, _) = kernels::permute(g, out.shape(), &inv);
                self.accumulate(grads, *a, dx);
            }
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, len) in parts {
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..*outer {
                            let base = o * total * inner + offset * inner;
                            dp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += len;
                }
            }
            &Op::Narrow {
                a,
                outer,
                len_in,
                start,
                inner,
            } => {
                let len = out.shape().iter().product::<usize>() / (outer * inner).max(1);
                let mut dx = vec![T::zero(); outer * len_in * inner];
                for o in 0..outer {
                    let base = o * len_in * inner + start * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, a, dx);
            }
            &Op::Expand { a, times } => {
                let w = self.value(a).numel();
                let _ = times;
                self.accumulate(grads, a, fold_suffix(g, w));
            }
            &Op::Sum { a } => {
                let n = self.value(a).numel();
                self.accumulate(grads, a, vec![g[0]; n]);
            }
            &Op::Mean { a } => {
                let n = self.value(a).numel();
                self.accumulate(grads, a, vec![g[0] / T::lit(n.max(1) as f64); n]);
            }
            Op::Bce { p, target, clamp } => {
                let hi = T::one() - *clamp;
                let n = T::lit(target.len().max(1) as f64);
                let dx = self
                    .data(*p)
                    .iter()
                    .zip(target)
                    .map(|(&pv, &y)| {
                        if pv < *clamp || pv > hi {
                            T::zero()
                        } else {
                            g[0] * ((T::one() - y) / (T::one() - pv) - y / pv) / n
                        }
                    })
                    .collect();
                self.accumulate(grads, *p, dx);
            }
            Op::SoftCrossEntropy {
                logits,
                target,
                probs,
                cols,
            } => {
                let rows = T::lit((probs.len() / cols).max(1) as f64);
                // d/dz of -Σ t log softmax(z) is softmax(z)·Σt - t.
                let dx = probs
                    .chunks(*cols)
                    .zip(target.chunks(*cols))
                    .flat_map(|(pr, tr)| {
                        let mass: T = tr.iter().copied().sum();
                        pr.iter()
                            .zip(tr)
                            .map(move |(&q, &t)| g[0] * (q * mass - t) / rows)
                            .collect::<Vec<_>>()
                    })
                    .collect();
                self.accumulate(grads, *logits, dx);
            }
        }
    }
}

/// Sums `g` over its leading repeats down to the trailing `width` values.
fn fold_suffix<T: Real>(g: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); width];
    for chunk in g.chunks(width.max(1)) {
        out.iter_mut().zip(chunk).for_each(|(o, &x)| *o = *o + x);
    }
    out
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<TensorId, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a recorded value, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a parameter tensor registered on the tape.
    pub fn for_param(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.params.get(&t.id()).and_then(|&v| self.wrt(v))
    }

    /// Adds this pass's gradient into `t.grad`. Trainable parameters that the
    /// loss never reached receive zeros.
    pub fn accumulate_into(&self, t: &mut Tensor<T>) -> Result<()> {
        if !t.requires_grad {
            return Ok(());
        }
        match self.for_param(t) {
            Some(g) => t.accumulate_grad(g),
            None => {
                let zeros = vec![T::zero(); t.numel()];
                t.accumulate_grad(&zeros)
            }
        }
    }
}
