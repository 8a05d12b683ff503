//! The pyramid stack: tokenizer, N blocks under a shrinking query schedule,
//! and per-task heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::{BlockCache, MixedBlockParams};
use crate::config::{Backbone, ModelConfig, ParamSharing, ScheduleRule, Task};
use crate::error::{Error, Result};
use crate::features::{CandidateRecord, Embeddings, Request};
use crate::nn::{Mlp, MlpCache};
use crate::numerics::flops::{self, Phase};
use crate::numerics::kernels::{sigmoid, softplus};
use crate::numerics::{Matrix, Real};
use crate::params::{impl_visit, zeros_like, SparseGrads};
use crate::tokenizer::{NsCache, SBlockCache, TokenSequence, Tokenizer, TokenizerParams};

/// Rows entering each layer: `counts[0] = L`, `counts[n]` = rows kept by
/// layer `n`. Only S rows are ever dropped, oldest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PyramidSchedule {
    pub counts: Vec<usize>,
    pub l_ns: usize,
}

impl PyramidSchedule {
    pub fn layers(&self) -> usize {
        self.counts.len() - 1
    }

    pub fn total(&self) -> usize {
        self.counts[0]
    }

    /// S rows kept after layer `n` (`n = 0` is the input).
    pub fn s_rows(&self, n: usize) -> usize {
        self.counts[n] - self.l_ns
    }
}

/// `L_n = round(L − n·(L − L_NS)/N)` with halves rounded up, in exact
/// integer arithmetic.
pub fn make_linear_schedule(l_total: usize, l_ns: usize, n: usize) -> Result<PyramidSchedule> {
    if l_total < l_ns || n == 0 {
        return Err(Error::config(format!(
            "linear schedule needs L ≥ L_NS and N ≥ 1 (L = {l_total}, L_NS = {l_ns}, N = {n})"
        )));
    }
    let span = l_total - l_ns;
    let counts = (0..=n)
        .map(|i| {
            let num = l_total * n - i * span;
            (2 * num + n) / (2 * n)
        })
        .collect();
    Ok(PyramidSchedule { counts, l_ns })
}

/// Schedule of `config` for a request with `l_s` S-tokens.
pub fn schedule_for(config: &ModelConfig, l_s: usize) -> Result<PyramidSchedule> {
    let l_ns = config.l_ns();
    let layers = config.blocks();
    let l = l_s + l_ns;
    if layers == 0 {
        return Ok(PyramidSchedule { counts: vec![l], l_ns });
    }
    match &config.schedule {
        ScheduleRule::Linear => make_linear_schedule(l, l_ns, layers),
        ScheduleRule::Off => Ok(PyramidSchedule {
            counts: vec![l; layers + 1],
            l_ns,
        }),
        ScheduleRule::Custom { s_tokens } => {
            let mut counts = vec![l];
            let mut prev = l_s;
            for &s in s_tokens {
                prev = prev.min(s);
                counts.push(prev + l_ns);
            }
            Ok(PyramidSchedule { counts, l_ns })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<T: Real = f32> {
    pub tokenizer: TokenizerParams<T>,
    pub blocks: Vec<MixedBlockParams<T>>,
    /// One head per task, in `ModelConfig::tasks` order.
    pub heads: Vec<Mlp<T>>,
}

impl_visit!(DenseParams { tokenizer, blocks, heads });

/// Gradients matching [`OneTrans`]'s parameters.
#[derive(Debug, Clone)]
pub struct Grads<T: Real = f32> {
    pub dense: DenseParams<T>,
    pub sparse: SparseGrads<T>,
}

impl<T: Real> Grads<T> {
    pub fn clear(&mut self) {
        crate::params::scale(&mut self.dense, T::zero());
        self.sparse.clear();
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T: Real> {
    s: SBlockCache<T>,
    ns: NsCache<T>,
    l_s: usize,
    blocks: Vec<BlockCache<T>>,
    final_rows: usize,
    heads: Vec<MlpCache<T>>,
}

/// Per-layer states of one monolithic forward.
#[derive(Debug, Clone)]
pub struct LayerTrace<T: Real> {
    /// Layer input (`counts[n-1]` rows).
    pub input: Matrix<T>,
    pub n_shared: usize,
    pub keys: Matrix<T>,
    pub values: Matrix<T>,
    /// Layer output (`counts[n]` rows).
    pub output: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace<T: Real> {
    pub x0: TokenSequence<T>,
    pub schedule: PyramidSchedule,
    pub layers: Vec<LayerTrace<T>>,
    pub logits: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct OneTrans<T: Real = f32> {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub embeddings: Embeddings<T>,
    pub dense: DenseParams<T>,
    seed: u64,
    revision: u64,
}

impl<T: Real> OneTrans<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let names = config.table_names()?;
        let embeddings = Embeddings::new(
            names.iter().map(String::as_str),
            config.embedding.buckets,
            config.embedding.dim,
            seed,
        )?;
        let tokenizer = Tokenizer::new(&config.tokenizer, config.d_model, &embeddings)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tok = tokenizer.init_params(&mut rng);
        let n_ns = match config.params {
            ParamSharing::Mixed => config.l_ns(),
            ParamSharing::Shared => 0,
        };
        let blocks = (0..config.blocks())
            .map(|_| MixedBlockParams::new(config.d_model, config.heads, config.ffn_hidden(), n_ns, &mut rng))
            .collect();
        let heads = config
            .tasks
            .iter()
            .map(|_| Mlp::new(Self::head_input(&config), config.d_model, 1, &mut rng))
            .collect();
        Ok(Self {
            config,
            tokenizer,
            embeddings,
            dense: DenseParams {
                tokenizer: tok,
                blocks,
                heads,
            },
            seed,
            revision: 0,
        })
    }

    fn head_input(config: &ModelConfig) -> usize {
        match config.backbone {
            Backbone::OneTrans => config.l_ns() * config.d_model,
            Backbone::MeanPool => (config.l_ns() + 1) * config.d_model,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Marks the parameters as changed; invalidates cached serving state.
    pub fn bump_revision(&mut self) {
        self.revision += 1;
    }

    pub fn set_revision(&mut self, revision: u64) {
        self.revision = revision;
    }

    /// Identifies the current parameter version.
    pub fn params_fingerprint(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        h.write_u64(self.seed);
        h.write_u64(self.revision);
        h.finish()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            dense: zeros_like(&self.dense),
            sparse: SparseGrads::new(self.embeddings.len()),
        }
    }

    pub fn dense_param_count(&self) -> usize {
        crate::params::param_count(&self.dense)
    }

    pub fn param_count(&self) -> usize {
        self.dense_param_count() + self.embeddings.param_count()
    }

    pub fn build_x0(&self, request: &Request, candidate: &CandidateRecord) -> Result<TokenSequence<T>> {
        self.tokenizer
            .build_x0(&self.dense.tokenizer, &self.embeddings, request, candidate)
    }

    /// Logits from the head input row.
    pub fn apply_heads(&self, head_in: &Matrix<T>) -> Result<Vec<T>> {
        let _p = flops::phase(Phase::Heads);
        self.dense
            .heads
            .iter()
            .map(|h| Ok(h.apply(head_in)?.get(0, 0)))
            .collect()
    }

    fn head_input_row(&self, final_states: &Matrix<T>, s_mean: Option<&Matrix<T>>) -> Result<Matrix<T>> {
        let ns = final_states.slice_rows(final_states.rows() - self.config.l_ns(), final_states.rows());
        match s_mean {
            None => ns.reshape(1, self.config.l_ns() * self.config.d_model),
            Some(mean) => {
                let mut row = mean.data().to_vec();
                row.extend_from_slice(ns.data());
                Ok(Matrix::row_vector(row))
            }
        }
    }

    /// Per-task logits for one impression.
    pub fn forward(&self, request: &Request, candidate: &CandidateRecord) -> Result<Vec<T>> {
        Ok(self.forward_train(request, candidate)?.0)
    }

    /// Forward pass that keeps everything [`OneTrans::backward`] needs.
    pub fn forward_train(&self, request: &Request, candidate: &CandidateRecord) -> Result<(Vec<T>, ForwardCache<T>)> {
        let tok = &self.tokenizer;
        let (s, s_cache) = tok.build_s_block(&self.dense.tokenizer, &self.embeddings, request)?;
        let (ns, ns_cache) = tok.build_ns_block(&self.dense.tokenizer, &self.embeddings, request, candidate)?;
        let l_s = s.tokens.rows();
        let schedule = schedule_for(&self.config, l_s)?;
        let mut x = Matrix::vstack(&[&s.tokens, &ns])?;
        let mut caches = Vec::with_capacity(self.dense.blocks.len());
        for (n, block) in self.dense.blocks.iter().enumerate() {
            let (y, c) = block.forward(&x, schedule.s_rows(n), schedule.counts[n + 1], self.config.attention)?;
            caches.push(c);
            x = y;
        }
        let s_mean = match self.config.backbone {
            Backbone::OneTrans => None,
            Backbone::MeanPool => Some(mean_rows(&s.tokens, self.config.d_model)),
        };
        let head_in = self.head_input_row(&x, s_mean.as_ref())?;
        let _p = flops::phase(Phase::Heads);
        let mut logits = Vec::with_capacity(self.dense.heads.len());
        let mut head_caches = Vec::with_capacity(self.dense.heads.len());
        for h in &self.dense.heads {
            let (y, c) = h.forward(&head_in)?;
            logits.push(y.get(0, 0));
            head_caches.push(c);
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        Ok((
            logits,
            ForwardCache {
                s: s_cache,
                ns: ns_cache,
                l_s,
                blocks: caches,
                final_rows: x.rows(),
                heads: head_caches,
            },
        ))
    }

    /// Accumulates `dL/dθ` for `dL/dlogits` into `grads`.
    pub fn backward(&self, cache: &ForwardCache<T>, d_logits: &[T], grads: &mut Grads<T>) -> Result<()> {
        if cache.heads.len() != self.dense.heads.len() || d_logits.len() != self.dense.heads.len() {
            return Err(Error::MissingActivations("head caches"));
        }
        let d = self.config.d_model;
        let l_ns = self.config.l_ns();
        let mut d_head_in: Option<Matrix<T>> = None;
        {
            let _p = flops::phase(Phase::Heads);
            for ((h, c), (&dl, g)) in self
                .dense
                .heads
                .iter()
                .zip(&cache.heads)
                .zip(d_logits.iter().zip(grads.dense.heads.iter_mut()))
            {
                let dx = h.backward(c, &Matrix::row_vector(vec![dl]), g)?;
                match &mut d_head_in {
                    Some(acc) => acc.add_assign(&dx),
                    None => d_head_in = Some(dx),
                }
            }
        }
        let d_head_in = d_head_in.ok_or(Error::MissingActivations("heads"))?;
        let (d_mean, d_ns) = match self.config.backbone {
            Backbone::OneTrans => (None, d_head_in.reshape(l_ns, d)?),
            Backbone::MeanPool => (
                Some(d_head_in.slice_cols(0, d)),
                d_head_in.slice_cols(d, d_head_in.cols()).reshape(l_ns, d)?,
            ),
        };
        let mut dx = Matrix::zeros(cache.final_rows, d);
        let offset = cache.final_rows - l_ns;
        dx.data_mut()[offset * d..].copy_from_slice(d_ns.data());
        for (block, (c, g)) in self
            .dense
            .blocks
            .iter()
            .zip(cache.blocks.iter().zip(grads.dense.blocks.iter_mut()))
            .rev()
        {
            dx = block.backward(c, &dx, g)?;
        }
        let mut d_s = dx.slice_rows(0, cache.l_s);
        if let Some(dm) = d_mean {
            let inv = T::one() / T::from_usize(cache.l_s.max(1)).expect("fits");
            for i in 0..cache.l_s {
                for (a, &b) in d_s.row_mut(i).iter_mut().zip(dm.data()) {
                    *a += b * inv;
                }
            }
        }
        let d_ns_tokens = dx.slice_rows(cache.l_s, dx.rows());
        let tok = &self.tokenizer;
        tok.backward_s_block(&self.dense.tokenizer, &cache.s, &d_s, &mut grads.dense.tokenizer, &mut grads.sparse)?;
        tok.backward_ns_block(
            &self.dense.tokenizer,
            &cache.ns,
            &d_ns_tokens,
            &mut grads.dense.tokenizer,
            &mut grads.sparse,
        )
    }

    /// Monolithic forward recording every layer's input, keys, values and
    /// output.
    pub fn forward_trace(&self, request: &Request, candidate: &CandidateRecord) -> Result<ForwardTrace<T>> {
        let x0 = self.build_x0(request, candidate)?;
        let schedule = schedule_for(&self.config, x0.l_s)?;
        let mut x = x0.tokens.clone();
        let mut layers = Vec::new();
        for (n, block) in self.dense.blocks.iter().enumerate() {
            let n_shared = schedule.s_rows(n);
            let (y, c) = block.forward(&x, n_shared, schedule.counts[n + 1], self.config.attention)?;
            layers.push(LayerTrace {
                input: x,
                n_shared,
                keys: c.keys().clone(),
                values: c.values().clone(),
                output: y.clone(),
            });
            x = y;
        }
        let s_mean = match self.config.backbone {
            Backbone::OneTrans => None,
            Backbone::MeanPool => Some(mean_rows(&x0.s_tokens(), self.config.d_model)),
        };
        let logits = self.apply_heads(&self.head_input_row(&x, s_mean.as_ref())?)?;
        Ok(ForwardTrace {
            x0,
            schedule,
            layers,
            logits,
        })
    }

    /// Logits from final states (`≥ L_NS` rows, NS last) as produced by the
    /// cached serving path.
    pub fn logits_from_final(&self, final_ns: &Matrix<T>) -> Result<Vec<T>> {
        if self.config.backbone != Backbone::OneTrans {
            return Err(Error::config("cached serving requires the OneTrans backbone"));
        }
        self.apply_heads(&self.head_input_row(final_ns, None)?)
    }
}

fn mean_rows<T: Real>(x: &Matrix<T>, d: usize) -> Matrix<T> {
    let mut mean = Matrix::zeros(1, d);
    if x.rows() == 0 {
        return mean;
    }
    for i in 0..x.rows() {
        for (a, &b) in mean.data_mut().iter_mut().zip(x.row(i)) {
            *a += b;
        }
    }
    mean.scale(T::one() / T::from_usize(x.rows()).expect("fits"));
    mean
}

/// Binary cross-entropy on a logit: `softplus(x) − y·x`.
pub fn bce_with_logits<T: Real>(logit: T, label: T) -> T {
    softplus(logit) - label * logit
}

/// Summed task losses for one impression and their logit gradients. CVR is
/// conditioned on the click: unclicked impressions contribute nothing.
pub fn loss<T: Real>(logits: &[T], tasks: &[Task], click: u8, conv: u8) -> (T, Vec<T>) {
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(logits.len());
    for (&x, task) in logits.iter().zip(tasks) {
        let label = match task {
            Task::Ctr => Some(click),
            Task::Cvr => (click == 1).then_some(conv),
        };
        match label {
            Some(y) => {
                let y = T::from_u8(y.min(1)).expect("label fits");
                total += bce_with_logits(x, y);
                grads.push(sigmoid(x) - y);
            }
            None => grads.push(T::zero()),
        }
    }
    (total, grads)
}

/// Mean of [`loss`] over a batch of `(logits, click, conv)`.
pub fn batch_loss<T: Real>(batch: &[(Vec<T>, u8, u8)], tasks: &[Task]) -> T {
    if batch.is_empty() {
        return T::zero();
    }
    let sum: T = batch.iter().map(|(l, click, conv)| loss(l, tasks, *click, *conv).0).sum();
    sum / T::from_usize(batch.len()).expect("fits")
}
