use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use super::config::{ModelConfig, ModelOptions};
use super::layers::{impl_module, trunc_normal, Attention, Linear, LayerNorm, Mlp, Module, INIT_STD};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Splits images into non-overlapping patches, projects them linearly and
/// adds a learned positional embedding.
#[derive(Clone, Debug)]
pub struct PatchTokenizer<T: Real> {
    /// `[P·P·C, D]`, equivalent to a convolution with kernel = stride = P.
    pub proj: Linear<T>,
    /// `[N, D]`
    pub pos: Tensor<T>,
    pub patch_size: usize,
}
impl_module!(PatchTokenizer { proj, pos });

/// Rearranges `[B, C, H, W]` images into `[B, N, C·P·P]` patch rows.
/// Patches are in raster order; each row is channel-major, then row, then
/// column within the patch.
pub fn unfold_patches<T: Real>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || !s[2].is_multiple_of(patch) || !s[3].is_multiple_of(patch) {
        return Err(Error::shape("unfold_patches", format!("images {s:?} with patch {patch}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ph, pw) = (h / patch, w / patch);
    let dim = c * patch * patch;
    let src = images.data();
    let mut out = Vec::with_capacity(b * ph * pw * dim);
    for bi in 0..b {
        for py in 0..ph {
            for px in 0..pw {
                for ci in 0..c {
                    for y in 0..patch {
                        let row = ((bi * c + ci) * h + py * patch + y) * w + px * patch;
                        out.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(&[b, ph * pw, dim], out)
}

impl<T: Real> PatchTokenizer<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &ModelConfig) -> Self {
        PatchTokenizer {
            proj: Linear::new(rng, cfg.patch_dim(), cfg.embed_dim, true),
            pos: trunc_normal(rng, &[cfg.num_tokens(), cfg.embed_dim], INIT_STD),
            patch_size: cfg.patch_size,
        }
    }

    /// `[B, C, H, W]` → `[B, N, D]`. No class token is added.
    pub fn forward(&self, tape: &mut Tape<T>, images: &Tensor<T>) -> Result<Var> {
        let patches = unfold_patches(images, self.patch_size)?;
        if patches.shape()[1] != self.pos.shape()[0] {
            return Err(Error::shape(
                "tokenize",
                format!("{} patches, positional table has {}", patches.shape()[1], self.pos.shape()[0]),
            ));
        }
        let x = tape.constant(patches);
        let x = self.proj.forward(tape, x)?;
        let pos = tape.param(&self.pos);
        tape.add(x, pos)
    }
}

/// Pre-norm encoder block: `x' = x + SA(Norm1(x))`, `out = x' + MLP(Norm2(x'))`.
#[derive(Clone, Debug)]
pub struct SabLayer<T: Real> {
    pub norm1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub norm2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}
impl_module!(SabLayer { norm1, attn, norm2, mlp });

impl<T: Real> SabLayer<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &ModelConfig) -> Self {
        SabLayer {
            norm1: LayerNorm::new(cfg.embed_dim, cfg.norm_eps),
            attn: Attention::new(rng, cfg.embed_dim, cfg.heads),
            norm2: LayerNorm::new(cfg.embed_dim, cfg.norm_eps),
            mlp: Mlp::new(rng, cfg.embed_dim, cfg.hidden_dim()),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, x)?;
        let a = self.attn.self_attention(tape, h)?;
        let x = tape.add(x, a.out)?;
        let h = self.norm2.forward(tape, x)?;
        let m = self.mlp.forward(tape, h)?;
        tape.add(x, m)
    }
}

/// The shared task-attention decoder block.
#[derive(Clone, Debug)]
pub struct TabLayer<T: Real> {
    pub norm1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub norm2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}
impl_module!(TabLayer { norm1, attn, norm2, mlp });

impl<T: Real> TabLayer<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &ModelConfig) -> Self {
        TabLayer {
            norm1: LayerNorm::new(cfg.embed_dim, cfg.norm_eps),
            attn: Attention::new(rng, cfg.embed_dim, cfg.heads),
            norm2: LayerNorm::new(cfg.embed_dim, cfg.norm_eps),
            mlp: Mlp::new(rng, cfg.embed_dim, cfg.hidden_dim()),
        }
    }

    /// Task embedding `[B, D]` for patch tokens `x [B, N, D]` and task token
    /// `theta [D]`:
    ///
    /// ```text
    /// z   = [θ, x]
    /// c'  = θ + TA(Norm1(z))
    /// e   = c' + MLP(Norm2(c'))
    /// ```
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, theta: Var) -> Result<Var> {
        let b = tape.shape(x)[0];
        let d = tape.shape(theta)[0];
        let token = tape.reshape(theta, &[1, d])?;
        let token = tape.expand(token, b);
        let z = tape.concat(&[token, x], 1)?;
        let zn = self.norm1.forward(tape, z)?;
        let ta = self.attn.task_attention(tape, zn)?;
        let c = tape.add(token, ta.out)?;
        let h = self.norm2.forward(tape, c)?;
        let m = self.mlp.forward(tape, h)?;
        let e = tape.add(c, m)?;
        tape.reshape(e, &[b, d])
    }
}

#[derive(Clone, Debug)]
pub struct TaskToken<T: Real> {
    pub theta: Tensor<T>,
    pub frozen: bool,
}
impl_module!(TaskToken { theta });

/// Per-task classifier `σ(W Norm(e) + b)`.
#[derive(Clone, Debug)]
pub struct TaskHead<T: Real> {
    pub norm: LayerNorm<T>,
    pub linear: Linear<T>,
    pub frozen: bool,
}
impl_module!(TaskHead { norm, linear });

impl<T: Real> TaskHead<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &ModelConfig, classes: usize) -> Self {
        Self::with_input(rng, cfg.embed_dim, classes, cfg.norm_eps)
    }

    pub fn with_input<R: Rng + ?Sized>(rng: &mut R, input: usize, classes: usize, eps: f64) -> Self {
        TaskHead {
            norm: LayerNorm::new(input, eps),
            linear: Linear::new(rng, input, classes, true),
            frozen: false,
        }
    }

    pub fn classes(&self) -> usize {
        self.linear.output_dim()
    }

    /// Logits `[B, |C_i|]`; apply a sigmoid for probabilities.
    pub fn forward(&self, tape: &mut Tape<T>, e: Var) -> Result<Var> {
        let h = self.norm.forward(tape, e)?;
        self.linear.forward(tape, h)
    }
}

#[derive(Debug, Default)]
pub struct PassCounters {
    encoder: AtomicUsize,
    tab: AtomicUsize,
}

impl Clone for PassCounters {
    fn clone(&self) -> Self {
        PassCounters {
            encoder: AtomicUsize::new(self.encoder.load(Ordering::Relaxed)),
            tab: AtomicUsize::new(self.tab.load(Ordering::Relaxed)),
        }
    }
}

impl PassCounters {
    /// Passes through the whole self-attention stack.
    pub fn encoder(&self) -> usize {
        self.encoder.load(Ordering::Relaxed)
    }

    /// Passes through the task-attention block.
    pub fn tab(&self) -> usize {
        self.tab.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.encoder.store(0, Ordering::Relaxed);
        self.tab.store(0, Ordering::Relaxed);
    }
}

/// Tape handles produced by [`DyToxModel::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, Σ|C_i|]` pre-sigmoid scores.
    pub logits: Var,
    /// `sigmoid(logits)`.
    pub probs: Var,
    /// One `[B, D]` task embedding per task-attention pass.
    pub embeddings: Vec<Var>,
    /// `[B, |C_t| + 1]` logits of the divergence head, when requested.
    pub divergence: Option<Var>,
}

/// Encoder of self-attention blocks, one shared task-attention block, a
/// growing list of task tokens and per-task classifiers.
#[derive(Clone, Debug)]
pub struct DyToxModel<T: Real = f32> {
    pub config: ModelConfig,
    pub options: ModelOptions,
    pub tokenizer: PatchTokenizer<T>,
    pub sabs: Vec<SabLayer<T>>,
    pub tab: TabLayer<T>,
    pub tokens: Vec<TaskToken<T>>,
    pub heads: Vec<TaskHead<T>>,
    /// Single classifier over concatenated embeddings (ablation only).
    pub unified_head: Option<TaskHead<T>>,
    /// Training-only `D → |C_t| + 1` classifier.
    pub divergence: Option<Linear<T>>,
    class_counts: Vec<usize>,
    counters: PassCounters,
}

impl<T: Real> DyToxModel<T> {
    /// A model with no tasks yet; call [`DyToxModel::expand_task`] before
    /// training the first task.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, options: ModelOptions, rng: &mut R) -> Result<Self> {
        config.validate("model")?;
        let tokenizer = PatchTokenizer::new(rng, &config);
        let sabs = (0..config.sab_count).map(|_| SabLayer::new(rng, &config)).collect();
        let tab = TabLayer::new(rng, &config);
        Ok(DyToxModel {
            config,
            options,
            tokenizer,
            sabs,
            tab,
            tokens: Vec::new(),
            heads: Vec::new(),
            unified_head: None,
            divergence: None,
            class_counts: Vec::new(),
            counters: PassCounters::default(),
        })
    }

    /// Tasks learned so far.
    pub fn num_tasks(&self) -> usize {
        self.class_counts.len()
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.iter().sum()
    }

    pub fn counters(&self) -> &PassCounters {
        &self.counters
    }

    /// Adds a task with `num_new_classes` classes: a fresh task token (when
    /// expansion is on, or for the very first task), a new classifier, and
    /// for every task after the first a fresh divergence head.
    pub fn expand_task<R: Rng + ?Sized>(&mut self, num_new_classes: usize, rng: &mut R) -> Result<()> {
        if num_new_classes == 0 {
            return Err(Error::invalid("a task needs at least one class"));
        }
        let d = self.config.embed_dim;
        if self.options.token_expansion || self.tokens.is_empty() {
            self.tokens.push(TaskToken {
                theta: trunc_normal(rng, &[d], INIT_STD),
                frozen: false,
            });
        }
        if self.options.independent_heads {
            self.heads.push(TaskHead::new(rng, &self.config, num_new_classes));
        } else {
            self.grow_unified_head(num_new_classes, rng);
        }
        self.class_counts.push(num_new_classes);
        self.divergence = (self.num_tasks() > 1).then(|| Linear::new(rng, d, num_new_classes + 1, true));
        Ok(())
    }

    fn grow_unified_head<R: Rng + ?Sized>(&mut self, new_classes: usize, rng: &mut R) {
        let input = self.tokens.len() * self.config.embed_dim;
        let output = self.num_classes() + new_classes;
        let mut fresh = TaskHead::with_input(rng, input, output, self.config.norm_eps);
        if let Some(old) = &self.unified_head {
            let (oi, oo) = (old.linear.input_dim(), old.linear.output_dim());
            let w = fresh.linear.weight.data_mut();
            for r in 0..oi {
                w[r * output..r * output + oo].copy_from_slice(&old.linear.weight.data()[r * oo..(r + 1) * oo]);
            }
            if let (Some(nb), Some(ob)) = (&mut fresh.linear.bias, &old.linear.bias) {
                nb.data_mut()[..oo].copy_from_slice(ob.data());
            }
            if oi == input {
                fresh.norm = old.norm.clone();
            }
        }
        self.unified_head = Some(fresh);
    }

    /// Discards the divergence head (it never takes part in inference).
    pub fn drop_divergence(&mut self) {
        self.divergence = None;
    }

    /// Token used for task `i`'s embedding.
    fn token_index(&self, task: usize) -> usize {
        task.min(self.tokens.len().saturating_sub(1))
    }

    /// Encoder output `x_L [B, N, D]`.
    pub fn encode(&self, tape: &mut Tape<T>, images: &Tensor<T>) -> Result<Var> {
        let s = images.shape();
        let want = [self.config.channels, self.config.image_size, self.config.image_size];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::shape("tokenize", format!("images {s:?}, expected [B, {}, {}, {}]", want[0], want[1], want[2])));
        }
        let mut x = self.tokenizer.forward(tape, images)?;
        for sab in &self.sabs {
            x = sab.forward(tape, x)?;
        }
        self.counters.encoder.fetch_add(1, Ordering::Relaxed);
        Ok(x)
    }

    /// Task embedding for token `i` from encoder output `x`.
    pub fn task_embedding(&self, tape: &mut Tape<T>, x: Var, i: usize) -> Result<Var> {
        let theta = tape.param(&self.tokens[i].theta);
        self.counters.tab.fetch_add(1, Ordering::Relaxed);
        self.tab.forward(tape, x, theta)
    }

    /// Full forward over the first `tasks` tasks: one encoder pass, one
    /// task-attention pass per task token, concatenated classifier outputs.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        images: &Tensor<T>,
        tasks: usize,
        with_divergence: bool,
    ) -> Result<ForwardOutput> {
        if tasks == 0 || tasks > self.num_tasks() {
            return Err(Error::invalid(format!(
                "forward over {tasks} tasks, model has learned {}",
                self.num_tasks()
            )));
        }
        let x = self.encode(tape, images)?;
        let passes = if self.options.independent_heads {
            self.token_index(tasks - 1) + 1
        } else {
            self.tokens.len()
        };
        let embeddings = (0..passes)
            .map(|i| self.task_embedding(tape, x, i))
            .collect::<Result<Vec<_>>>()?;

        let logits = if self.options.independent_heads {
            let parts = (0..tasks)
                .map(|i| self.heads[i].forward(tape, embeddings[self.token_index(i)]))
                .collect::<Result<Vec<_>>>()?;
            if parts.len() == 1 {
                parts[0]
            } else {
                tape.concat(&parts, 1)?
            }
        } else {
            let head = self.unified_head.as_ref().ok_or_else(|| Error::invalid("missing classifier"))?;
            let joined = if embeddings.len() == 1 {
                embeddings[0]
            } else {
                tape.concat(&embeddings, 1)?
            };
            let all = head.forward(tape, joined)?;
            let width: usize = self.class_counts[..tasks].iter().sum();
            if width == head.classes() {
                all
            } else {
                tape.narrow(all, 1, 0, width)?
            }
        };
        let probs = tape.sigmoid(logits);

        let divergence = match (&self.divergence, with_divergence) {
            (Some(head), true) => {
                let last = *embeddings.last().expect("at least one embedding");
                Some(head.forward(tape, last)?)
            }
            _ => None,
        };
        Ok(ForwardOutput {
            logits,
            probs,
            embeddings,
            divergence,
        })
    }

    /// Sigmoid predictions `[B, Σ_{i≤t}|C_i|]` without gradient tracking.
    pub fn forward_all(&self, images: &Tensor<T>, tasks: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, images, tasks, false)?;
        tape.check_finite()?;
        Ok(tape.to_tensor(out.probs))
    }

    /// Arg-max class over all learned tasks, per image. Taken over logits,
    /// which order classes like the sigmoid outputs but do not saturate.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, images, self.num_tasks(), false)?;
        tape.check_finite()?;
        let logits = tape.to_tensor(out.logits);
        let width = logits.shape()[1];
        Ok(logits
            .data()
            .chunks(width)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    /// Embedding `[B, D]` of the newest task token, without gradients.
    pub fn newest_embedding(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        if self.tokens.is_empty() {
            return Err(Error::invalid("model has no task token"));
        }
        let mut tape = Tape::inference();
        let x = self.encode(&mut tape, images)?;
        let e = self.task_embedding(&mut tape, x, self.tokens.len() - 1)?;
        tape.check_finite()?;
        Ok(tape.to_tensor(e))
    }

    /// Copies gradients from a backward pass into every trainable tensor.
    pub fn accumulate_grads(&mut self, grads: &crate::tensor::Gradients<T>) -> Result<()> {
        for (_, p) in self.params_mut("") {
            grads.accumulate_into(p)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.params_mut("") {
            p.zero_grad();
        }
    }

    /// Marks every parameter trainable except those named in `frozen`, and
    /// mirrors the result onto the token/head `frozen` flags.
    pub fn set_frozen(&mut self, frozen: &std::collections::BTreeSet<String>) {
        for (name, p) in self.params_mut("") {
            p.requires_grad = !frozen.contains(&name);
        }
        for (i, tok) in self.tokens.iter_mut().enumerate() {
            tok.frozen = frozen.contains(&format!("tokens.{i}.theta"));
        }
        for (i, head) in self.heads.iter_mut().enumerate() {
            head.frozen = frozen.contains(&format!("heads.{i}.linear.weight"));
        }
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Real>(&self) -> DyToxModel<U> {
        fn lin<T: Real, U: Real>(l: &Linear<T>) -> Linear<U> {
            Linear {
                weight: l.weight.cast(),
                bias: l.bias.as_ref().map(|b| b.cast()),
            }
        }
        fn norm<T: Real, U: Real>(n: &LayerNorm<T>) -> LayerNorm<U> {
            LayerNorm {
                gain: n.gain.cast(),
                bias: n.bias.cast(),
                eps: n.eps,
            }
        }
        fn attn<T: Real, U: Real>(a: &Attention<T>) -> Attention<U> {
            Attention {
                wq: lin(&a.wq),
                wk: lin(&a.wk),
                wv: lin(&a.wv),
                wo: lin(&a.wo),
                heads: a.heads,
            }
        }
        fn mlp<T: Real, U: Real>(m: &Mlp<T>) -> Mlp<U> {
            Mlp {
                fc1: lin(&m.fc1),
                fc2: lin(&m.fc2),
            }
        }
        DyToxModel {
            config: self.config.clone(),
            options: self.options,
            tokenizer: PatchTokenizer {
                proj: lin(&self.tokenizer.proj),
                pos: self.tokenizer.pos.cast(),
                patch_size: self.tokenizer.patch_size,
            },
            sabs: self
                .sabs
                .iter()
                .map(|s| SabLayer {
                    norm1: norm(&s.norm1),
                    attn: attn(&s.attn),
                    norm2: norm(&s.norm2),
                    mlp: mlp(&s.mlp),
                })
                .collect(),
            tab: TabLayer {
                norm1: norm(&self.tab.norm1),
                attn: attn(&self.tab.attn),
                norm2: norm(&self.tab.norm2),
                mlp: mlp(&self.tab.mlp),
            },
            tokens: self
                .tokens
                .iter()
                .map(|t| TaskToken {
                    theta: t.theta.cast(),
                    frozen: t.frozen,
                })
                .collect(),
            heads: self
                .heads
                .iter()
                .map(|h| TaskHead {
                    norm: norm(&h.norm),
                    linear: lin(&h.linear),
                    frozen: h.frozen,
                })
                .collect(),
            unified_head: self.unified_head.as_ref().map(|h| TaskHead {
                norm: norm(&h.norm),
                linear: lin(&h.linear),
                frozen: h.frozen,
            }),
            divergence: self.divergence.as_ref().map(lin),
            class_counts: self.class_counts.clone(),
            counters: PassCounters::default(),
        }
    }

    /// Rebuilds the task structure for `class_counts` without training, used
    /// when restoring from disk. Parameter values are overwritten afterwards.
    pub(crate) fn with_tasks<R: Rng + ?Sized>(
        config: ModelConfig,
        options: ModelOptions,
        class_counts: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut m = Self::new(config, options, rng)?;
        for &c in class_counts {
            m.expand_task(c, rng)?;
        }
        m.divergence = None;
        Ok(m)
    }
}

impl<T: Real> Module<T> for DyToxModel<T> {
    fn params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let p = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        let mut out = self.tokenizer.params(&p("tokenizer"));
        out.extend(self.sabs.params(&p("sabs")));
        out.extend(self.tab.params(&p("tab")));
        out.extend(self.tokens.params(&p("tokens")));
        out.extend(self.heads.params(&p("heads")));
        out.extend(self.unified_head.params(&p("unified_head")));
        out.extend(self.divergence.params(&p("divergence")));
        out
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let p = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        let mut out = self.tokenizer.params_mut(&p("tokenizer"));
        out.extend(self.sabs.params_mut(&p("sabs")));
        out.extend(self.tab.params_mut(&p("tab")));
        out.extend(self.tokens.params_mut(&p("tokens")));
        out.extend(self.heads.params_mut(&p("heads")));
        out.extend(self.unified_head.params_mut(&p("unified_head")));
        out.extend(self.divergence.params_mut(&p("divergence")));
        out
    }
}
