//! Building blocks: linear maps, layer norms, MLPs and the two attention
//! variants.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Real, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

/// Normal(0, std) samples redrawn until they fall inside ±2·std.
pub fn trunc_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::lit(v);
            }
        })
        .collect();
    Tensor::parameter(shape, data).expect("shape and data agree")
}

fn trainable<T: Real>(t: Tensor<T>) -> Tensor<T> {
    let mut t = t;
    t.requires_grad = true;
    t
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything that owns named parameter tensors.
pub trait Module<T: Real> {
    fn params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)>;
    fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)>;

    fn param_count(&self) -> usize {
        self.params("").iter().map(|(_, t)| t.numel()).sum()
    }
}

impl<T: Real> Module<T> for Tensor<T> {
    fn params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        vec![(prefix.to_string(), self)]
    }
    fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        vec![(prefix.to_string(), self)]
    }
}

impl<T: Real, M: Module<T>> Module<T> for Option<M> {
    fn params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        self.as_ref().map(|m| m.params(prefix)).unwrap_or_default()
    }
    fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        self.as_mut().map(|m| m.params_mut(prefix)).unwrap_or_default()
    }
}

impl<T: Real, M: Module<T>> Module<T> for Vec<M> {
    fn params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        self.iter()
            .enumerate()
            .flat_map(|(i, m)| m.params(&join(prefix, &i.to_string())))
            .collect()
    }
    fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        self.iter_mut()
            .enumerate()
            .flat_map(|(i, m)| m.params_mut(&join(prefix, &i.to_string())))
            .collect()
    }
}

macro_rules! impl_module {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: Real> Module<T> for $ty<T> {
            fn params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
                let mut out = Vec::new();
                $( out.extend(self.$field.params(&$crate::model::layers::join(prefix, stringify!($field)))); )*
                out
            }
            fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
                let mut out = Vec::new();
                $( out.extend(self.$field.params_mut(&$crate::model::layers::join(prefix, stringify!($field)))); )*
                out
            }
        }
    };
}
pub(crate) use impl_module;

/// `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}
impl_module!(Linear { weight, bias });

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize, bias: bool) -> Self {
        Linear {
            weight: trunc_normal(rng, &[input, output], INIT_STD),
            bias: bias.then(|| trainable(Tensor::zeros(&[output]))),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T: Real> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub eps: f64,
}
impl_module!(LayerNorm { gain, bias });

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize, eps: f64) -> Self {
        LayerNorm {
            gain: trainable(Tensor::ones(&[dim])),
            bias: trainable(Tensor::zeros(&[dim])),
            eps,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        tape.layer_norm(x, g, b, T::lit(self.eps))
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Debug)]
pub struct Mlp<T: Real> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}
impl_module!(Mlp { fc1, fc2 });

impl<T: Real> Mlp<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::new(rng, dim, hidden, true),
            fc2: Linear::new(rng, hidden, dim, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }
}

/// Multi-head attention projections: bias-free `W_q`, `W_k`, `W_v` and an
/// output projection `W_o` with a single post-concatenation bias `b_o`.
#[derive(Clone, Debug)]
pub struct Attention<T: Real> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub heads: usize,
}
impl_module!(Attention { wq, wk, wv, wo });

/// Output of an attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[B, queries, D]`
    pub out: Var,
    /// `[B, heads, queries, keys]`; every row sums to one.
    pub weights: Var,
}

impl<T: Real> Attention<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, heads: usize) -> Self {
        Attention {
            wq: Linear::new(rng, dim, dim, false),
            wk: Linear::new(rng, dim, dim, false),
            wv: Linear::new(rng, dim, dim, false),
            wo: Linear::new(rng, dim, dim, true),
            heads,
        }
    }

    fn split_heads(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        let h = self.heads;
        let x = tape.reshape(x, &[b, n, h, d / h])?;
        tape.permute(x, &[0, 2, 1, 3])
    }

    /// Scaled dot-product attention of `queries [B, Nq, D]` over
    /// `context [B, Nk, D]`.
    pub fn attend(&self, tape: &mut Tape<T>, queries: Var, context: Var) -> Result<AttentionOutput> {
        let s = tape.shape(queries).to_vec();
        let (b, nq, d) = (s[0], s[1], s[2]);
        let q = self.wq.forward(tape, queries)?;
        let k = self.wk.forward(tape, context)?;
        let v = self.wv.forward(tape, context)?;
        let q = self.split_heads(tape, q)?;
        let k = self.split_heads(tape, k)?;
        let v = self.split_heads(tape, v)?;
        let scores = tape.matmul_nt(q, k)?;
        let scale = T::lit(1.0 / ((d / self.heads) as f64).sqrt());
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax(scores, 3)?;
        let o = tape.matmul(weights, v)?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[b, nq, d])?;
        let out = self.wo.forward(tape, o)?;
        Ok(AttentionOutput { out, weights })
    }

    /// Self-attention of `x [B, N, D]`; the attention map is `N × N` per head.
    pub fn self_attention(&self, tape: &mut Tape<T>, x: Var) -> Result<AttentionOutput> {
        self.attend(tape, x, x)
    }

    /// Task-attention over `z [B, N+1, D]` whose row 0 is the task token:
    /// the query comes from row 0 only, keys and values from every row, so
    /// the map is `1 × (N+1)` per head.
    pub fn task_attention(&self, tape: &mut Tape<T>, z: Var) -> Result<AttentionOutput> {
        let token = tape.narrow(z, 1, 0, 1)?;
        self.attend(tape, token, z)
    }
}
