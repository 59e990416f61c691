use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use super::ops::{self, LnCache};
use super::tokenizer::ToyTokenizer;
use crate::backend::{AttentionMode, Backend, BackendError, HiddenStates, Tokenization};
use crate::Scalar;

/// Standard deviation of the Gaussian parameter initialisation.
pub const INIT_STD: f64 = 0.02;
/// Hidden width of the MLP relative to the model width.
pub const MLP_RATIO: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    pub attention: AttentionMode,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            vocab_size: 1024,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 128,
            seed: 0,
            attention: AttentionMode::Causal,
        }
    }
}

impl ToyModelConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_attention(mut self, attention: AttentionMode) -> Self {
        self.attention = attention;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: String| Err(BackendError::InvalidConfig(m));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.max_seq_len == 0 {
            return bad(format!("all dimensions must be at least 1: {self:?}"));
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} leaves no room beside the EOS id", self.vocab_size));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Gaussian-initialised weight, bias or embedding.
    Gaussian,
    /// Layer-norm gain, initialised to one.
    Gain,
    /// Layer-norm shift, initialised to zero.
    Shift,
}

/// One named tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamTensor {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub kind: ParamKind,
}

impl ParamTensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Position of every tensor in the flat parameter vector.
///
/// Order (also the initialisation and checkpoint order): `tok_emb`
/// `[vocab, d]`, `pos_emb` `[max_seq_len, d]`, then per layer `ln1.gain`,
/// `ln1.shift`, `attn.wq`, `attn.bq`, `attn.wk`, `attn.bk`, `attn.wv`,
/// `attn.bv`, `attn.wo`, `attn.bo`, `ln2.gain`, `ln2.shift`, `mlp.w1`
/// `[d, 4d]`, `mlp.b1`, `mlp.w2` `[4d, d]`, `mlp.b2`, and finally
/// `lnf.gain`, `lnf.shift`. Matrices are row-major `[in, out]`.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    tensors: Vec<ParamTensor>,
    pub(crate) tok: usize,
    pub(crate) pos: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    total: usize,
}

impl ParamLayout {
    pub fn new(config: &ToyModelConfig) -> Self {
        let d = config.d_model;
        let h = MLP_RATIO * d;
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut add = |name: String, rows: usize, cols: usize, kind: ParamKind| {
            let offset = total;
            tensors.push(ParamTensor {
                name,
                offset,
                rows,
                cols,
                kind,
            });
            total += rows * cols;
            offset
        };
        let tok = add("tok_emb".into(), config.vocab_size, d, ParamKind::Gaussian);
        let pos = add("pos_emb".into(), config.max_seq_len, d, ParamKind::Gaussian);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut named = |suffix: &str, rows, cols, kind| add(format!("layer{l}.{suffix}"), rows, cols, kind);
            layers.push(LayerOffsets {
                ln1_g: named("ln1.gain", 1, d, ParamKind::Gain),
                ln1_b: named("ln1.shift", 1, d, ParamKind::Shift),
                wq: named("attn.wq", d, d, ParamKind::Gaussian),
                bq: named("attn.bq", 1, d, ParamKind::Gaussian),
                wk: named("attn.wk", d, d, ParamKind::Gaussian),
                bk: named("attn.bk", 1, d, ParamKind::Gaussian),
                wv: named("attn.wv", d, d, ParamKind::Gaussian),
                bv: named("attn.bv", 1, d, ParamKind::Gaussian),
                wo: named("attn.wo", d, d, ParamKind::Gaussian),
                bo: named("attn.bo", 1, d, ParamKind::Gaussian),
                ln2_g: named("ln2.gain", 1, d, ParamKind::Gain),
                ln2_b: named("ln2.shift", 1, d, ParamKind::Shift),
                w1: named("mlp.w1", d, h, ParamKind::Gaussian),
                b1: named("mlp.b1", 1, h, ParamKind::Gaussian),
                w2: named("mlp.w2", h, d, ParamKind::Gaussian),
                b2: named("mlp.b2", 1, d, ParamKind::Gaussian),
            });
        }
        let lnf_g = add("lnf.gain".into(), 1, d, ParamKind::Gain);
        let lnf_b = add("lnf.shift".into(), 1, d, ParamKind::Shift);
        ParamLayout {
            tensors,
            tok,
            pos,
            layers,
            lnf_g,
            lnf_b,
            total,
        }
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// Pre-norm GELU transformer with learned positional embeddings.
#[derive(Clone, Debug)]
pub struct ToyModel<S> {
    config: ToyModelConfig,
    layout: ParamLayout,
    params: Vec<S>,
    tokenizer: ToyTokenizer,
}

struct LayerCache<S> {
    ln1: LnCache<S>,
    a: Vec<S>,
    q: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    probs: Vec<S>,
    ctx: Vec<S>,
    ln2: LnCache<S>,
    c: Vec<S>,
    u: Vec<S>,
    g: Vec<S>,
}

/// Activations kept from a forward pass for [`ToyModel::backward`].
pub struct ForwardCache<S> {
    ids: Vec<u32>,
    mode: AttentionMode,
    layers: Vec<LayerCache<S>>,
    lnf: LnCache<S>,
    out: Vec<S>,
}

impl<S: Scalar> ForwardCache<S> {
    pub fn output(&self) -> &[S] {
        &self.out
    }

    pub fn seq_len(&self) -> usize {
        self.ids.len()
    }

    pub fn into_states(self, dim: usize) -> HiddenStates<S> {
        HiddenStates::from_flat(self.out, dim, self.mode)
    }
}

impl<S: Scalar> ToyModel<S> {
    /// Draws parameters i.i.d. from N(0, 0.02²) with a xoshiro256** stream
    /// seeded through splitmix64, walking the tensors in [`ParamLayout`]
    /// order. Layer-norm gains start at one and shifts at zero, without
    /// consuming draws.
    pub fn init(config: ToyModelConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut rng = Xoshiro256StarStar::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut params = vec![S::zero(); layout.total()];
        for t in layout.tensors() {
            let slot = &mut params[t.range()];
            match t.kind {
                ParamKind::Gaussian => slot.iter_mut().for_each(|p| *p = S::of(normal.sample(&mut rng))),
                ParamKind::Gain => slot.fill(S::one()),
                ParamKind::Shift => {}
            }
        }
        let tokenizer = ToyTokenizer::new(config.vocab_size);
        Ok(ToyModel {
            config,
            layout,
            params,
            tokenizer,
        })
    }

    pub fn from_params(config: ToyModelConfig, params: Vec<S>) -> Result<Self, BackendError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total() {
            return Err(BackendError::DimensionMismatch {
                expected: layout.total(),
                found: params.len(),
            });
        }
        let tokenizer = ToyTokenizer::new(config.vocab_size);
        Ok(ToyModel {
            config,
            layout,
            params,
            tokenizer,
        })
    }

    /// Same model in another scalar type.
    pub fn cast<T: Scalar>(&self) -> ToyModel<T> {
        ToyModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|p| T::of(p.wide())).collect(),
            tokenizer: self.tokenizer,
        }
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn tokenizer(&self) -> &ToyTokenizer {
        &self.tokenizer
    }

    pub fn set_attention(&mut self, attention: AttentionMode) {
        self.config.attention = attention;
    }

    fn p(&self, offset: usize, len: usize) -> &[S] {
        &self.params[offset..offset + len]
    }

    /// Final-layer hidden states. Under causal attention row `j` depends only
    /// on tokens `0..=j`, bit for bit.
    pub fn forward(&self, ids: &[u32], mode: AttentionMode) -> Result<HiddenStates<S>, BackendError> {
        Ok(self.forward_cached(ids, mode)?.into_states(self.config.d_model))
    }

    pub fn forward_cached(&self, ids: &[u32], mode: AttentionMode) -> Result<ForwardCache<S>, BackendError> {
        let cfg = &self.config;
        let (t_len, d) = (ids.len(), cfg.d_model);
        if t_len > cfg.max_seq_len {
            return Err(BackendError::SequenceTooLong {
                len: t_len,
                max: cfg.max_seq_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(BackendError::TokenOutOfVocab {
                id,
                vocab: cfg.vocab_size,
            });
        }
        let hidden = MLP_RATIO * d;
        let mut x = Vec::with_capacity(t_len * d);
        for (t, &id) in ids.iter().enumerate() {
            let tok = self.p(self.layout.tok + id as usize * d, d);
            let pos = self.p(self.layout.pos + t * d, d);
            x.extend(tok.iter().zip(pos).map(|(&a, &b)| a + b));
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for lo in &self.layout.layers {
            let (a, ln1) = ops::layer_norm(&x, d, self.p(lo.ln1_g, d), self.p(lo.ln1_b, d));
            let q = ops::linear(&a, d, self.p(lo.wq, d * d), self.p(lo.bq, d), d);
            let k = ops::linear(&a, d, self.p(lo.wk, d * d), self.p(lo.bk, d), d);
            let v = ops::linear(&a, d, self.p(lo.wv, d * d), self.p(lo.bv, d), d);
            let (ctx, probs) = ops::attention(&q, &k, &v, t_len, d, cfg.n_heads, mode);
            let attn_out = ops::linear(&ctx, d, self.p(lo.wo, d * d), self.p(lo.bo, d), d);
            x.iter_mut().zip(&attn_out).for_each(|(x, &o)| *x += o);

            let (c, ln2) = ops::layer_norm(&x, d, self.p(lo.ln2_g, d), self.p(lo.ln2_b, d));
            let u = ops::linear(&c, d, self.p(lo.w1, d * hidden), self.p(lo.b1, hidden), hidden);
            let g: Vec<S> = u.iter().map(|&u| ops::gelu(u)).collect();
            let m = ops::linear(&g, hidden, self.p(lo.w2, hidden * d), self.p(lo.b2, d), d);
            x.iter_mut().zip(&m).for_each(|(x, &o)| *x += o);

            layers.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                ln2,
                c,
                u,
                g,
            });
        }
        let (out, lnf) = ops::layer_norm(&x, d, self.p(self.layout.lnf_g, d), self.p(self.layout.lnf_b, d));
        Ok(ForwardCache {
            ids: ids.to_vec(),
            mode,
            layers,
            lnf,
            out,
        })
    }

    /// Accumulates into `grads` (flat, [`ParamLayout`] order) the gradient of
    /// a scalar whose derivative with respect to the cached output is `d_out`.
    pub fn backward(&self, cache: &ForwardCache<S>, d_out: &[S], grads: &mut [S]) {
        let cfg = &self.config;
        let (t_len, d) = (cache.ids.len(), cfg.d_model);
        let hidden = MLP_RATIO * d;
        assert_eq!(d_out.len(), t_len * d, "d_out must match the cached output");
        assert_eq!(grads.len(), self.layout.total(), "grads must cover every parameter");
        let lay = &self.layout;

        let mut dx = {
            let (gg, gb) = split_pair(grads, lay.lnf_g, lay.lnf_b, d);
            ops::layer_norm_backward(d_out, &cache.lnf, d, self.p(lay.lnf_g, d), gg, gb)
        };

        for (lo, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // MLP branch: x += W2·gelu(W1·LN2(x))
            let dg = ops::linear_backward(
                &lc.g,
                &dx,
                hidden,
                d,
                self.p(lo.w2, hidden * d),
                grads,
                lo.w2,
                lo.b2,
            );
            let du: Vec<S> = dg.iter().zip(&lc.u).map(|(&g, &u)| g * ops::gelu_grad(u)).collect();
            let dc = ops::linear_backward(&lc.c, &du, d, hidden, self.p(lo.w1, d * hidden), grads, lo.w1, lo.b1);
            let dx_ln2 = {
                let (gg, gb) = split_pair(grads, lo.ln2_g, lo.ln2_b, d);
                ops::layer_norm_backward(&dc, &lc.ln2, d, self.p(lo.ln2_g, d), gg, gb)
            };
            dx.iter_mut().zip(&dx_ln2).for_each(|(a, &b)| *a += b);

            // attention branch: x += Wo·attn(LN1(x))
            let dctx = ops::linear_backward(&lc.ctx, &dx, d, d, self.p(lo.wo, d * d), grads, lo.wo, lo.bo);
            let (dq, dk, dv) = ops::attention_backward(&dctx, &lc.q, &lc.k, &lc.v, &lc.probs, t_len, d, cfg.n_heads, cache.mode);
            let mut da = ops::linear_backward(&lc.a, &dq, d, d, self.p(lo.wq, d * d), grads, lo.wq, lo.bq);
            let da_k = ops::linear_backward(&lc.a, &dk, d, d, self.p(lo.wk, d * d), grads, lo.wk, lo.bk);
            let da_v = ops::linear_backward(&lc.a, &dv, d, d, self.p(lo.wv, d * d), grads, lo.wv, lo.bv);
            da.iter_mut().zip(da_k.iter().zip(&da_v)).for_each(|(a, (&k, &v))| *a += k + v);
            let dx_ln1 = {
                let (gg, gb) = split_pair(grads, lo.ln1_g, lo.ln1_b, d);
                ops::layer_norm_backward(&da, &lc.ln1, d, self.p(lo.ln1_g, d), gg, gb)
            };
            dx.iter_mut().zip(&dx_ln1).for_each(|(a, &b)| *a += b);
        }

        for (t, &id) in cache.ids.iter().enumerate() {
            let row = &dx[t * d..(t + 1) * d];
            let tok = lay.tok + id as usize * d;
            let pos = lay.pos + t * d;
            for e in 0..d {
                grads[tok + e] += row[e];
                grads[pos + e] += row[e];
            }
        }
    }
}

/// Two disjoint, adjacent-or-not parameter slices of length `len`.
fn split_pair<S>(grads: &mut [S], a: usize, b: usize, len: usize) -> (&mut [S], &mut [S]) {
    debug_assert!(a + len <= b);
    let (lo, hi) = grads.split_at_mut(b);
    (&mut lo[a..a + len], &mut hi[..len])
}

impl<S: Scalar> Backend<S> for ToyModel<S> {
    fn encode(&self, text: &str) -> Result<(Tokenization, HiddenStates<S>), BackendError> {
        let tokens = self.tokenizer.tokenize(text);
        let states = self.forward(&tokens.token_ids, self.config.attention)?;
        Ok((tokens, states))
    }

    fn dim(&self) -> usize {
        self.config.d_model
    }

    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }
}
