//! Denoising transformer over token sequences: embeddings, pre-norm blocks of
//! self-attention, feature-conditioned cross-attention and a feed-forward layer,
//! and the reverse-process sampler built on its clean-token predictions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::diffusion::{softmax_f64, ScheduleTables, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{self, Binder, ParamStore};
use crate::perceptual::ConditionSequence;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    /// Sequence tokens query the condition tokens.
    CondKv,
    /// Condition tokens query the sequence; the result is routed back through the
    /// transposed attention map.
    CondQuery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub steps: usize,
    pub cond_mode: CondMode,
    /// Channel count of the feature map fed to the condition projection.
    pub cond_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            n_blocks: 6,
            d_model: 128,
            n_heads: 4,
            ffn_mult: 4,
            seq_len: 128,
            vocab: 64,
            steps: 25,
            cond_mode: CondMode::CondKv,
            cond_dim: 64,
        }
    }
}

pub const ALLOWED_BLOCKS: [usize; 3] = [2, 4, 6];

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if !ALLOWED_BLOCKS.contains(&self.n_blocks) {
            return Err(Error::InvalidArgument(format!(
                "n_blocks must be one of {ALLOWED_BLOCKS:?}, got {}",
                self.n_blocks
            )));
        }
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.ffn_mult == 0 || self.seq_len == 0 || self.vocab == 0 || self.steps == 0 || self.cond_dim == 0 {
            return Err(Error::InvalidArgument("denoiser sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn mask_id(&self) -> usize {
        self.vocab
    }

    /// Expected `(name, shape)` of every tensor, names relative to the denoiser prefix.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let f = d * self.ffn_mult;
        let mut out = vec![
            ("tok_emb".to_string(), vec![self.vocab + 1, d]),
            ("pos_emb".to_string(), vec![self.seq_len, d]),
            ("time_emb".to_string(), vec![self.steps + 1, d]),
        ];
        let mut linear = |name: String, i: usize, o: usize| {
            out.push((format!("{name}.w"), vec![i, o]));
            out.push((format!("{name}.b"), vec![o]));
        };
        linear("cond_proj".into(), self.cond_dim, d);
        for b in 0..self.n_blocks {
            for a in ["attn", "xattn"] {
                for m in ["q", "k", "v", "o"] {
                    linear(format!("b{b}.{a}.{m}"), d, d);
                }
            }
            linear(format!("b{b}.ffn1"), d, f);
            linear(format!("b{b}.ffn2"), f, d);
        }
        linear("head".into(), d, self.vocab);
        for b in 0..self.n_blocks {
            for n in ["ln1", "ln2", "lnc", "ln3"] {
                out.push((format!("b{b}.{n}.g"), vec![d]));
                out.push((format!("b{b}.{n}.b"), vec![d]));
            }
        }
        out.push(("ln_f.g".into(), vec![d]));
        out.push(("ln_f.b".into(), vec![d]));
        out
    }
}

/// Adds freshly initialised denoiser tensors under `prefix`.
pub fn init_denoiser<S: Scalar>(store: &mut ParamStore<S>, rng: &mut impl Rng, prefix: &str, cfg: &DenoiserConfig) {
    for (name, shape) in cfg.tensor_shapes() {
        let t = if name.ends_with("_emb") {
            nn::init_uniform(rng, &shape, 0.1)
        } else if name.ends_with(".g") {
            Tensor::full(&shape, S::one())
        } else if name.ends_with(".w") {
            nn::init_fan_in(rng, &shape, shape[0])
        } else {
            Tensor::zeros(&shape)
        };
        store.insert(format!("{prefix}{name}"), t);
    }
}

/// Summed token, position and timestep embeddings, `[B, L, d]`.
///
/// `tokens` holds `B * L` ids and `t` one timestep per sequence.
pub fn embed_graph<S: Scalar>(
    g: &mut Graph<S>,
    p: &mut Binder<S>,
    prefix: &str,
    cfg: &DenoiserConfig,
    tokens: &[usize],
    t: &[usize],
) -> Var {
    let (b, l) = (t.len(), cfg.seq_len);
    assert_eq!(tokens.len(), b * l, "token count must be batch * seq_len");
    let tok_tab = p.var(g, &format!("{prefix}tok_emb"));
    let pos_tab = p.var(g, &format!("{prefix}pos_emb"));
    let time_tab = p.var(g, &format!("{prefix}time_emb"));
    let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
    let time_ids: Vec<usize> = t.iter().flat_map(|&ti| std::iter::repeat_n(ti, l)).collect();
    let tok = g.embedding(tok_tab, tokens);
    let pos = g.embedding(pos_tab, &pos_ids);
    let time = g.embedding(time_tab, &time_ids);
    let s = g.add(tok, pos);
    let s = g.add(s, time);
    g.reshape(s, &[b, l, cfg.d_model])
}

fn split_heads<S: Scalar>(g: &mut Graph<S>, x: Var, heads: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, l, heads, d / heads]);
    let x = g.permute(x, &[0, 2, 1, 3]);
    g.reshape(x, &[b * heads, l, d / heads])
}

fn merge_heads<S: Scalar>(g: &mut Graph<S>, x: Var, batch: usize, heads: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (l, dh) = (s[1], s[2]);
    let x = g.reshape(x, &[batch, heads, l, dh]);
    let x = g.permute(x, &[0, 2, 1, 3]);
    g.reshape(x, &[batch, l, heads * dh])
}

/// Attention weights `[B*H, Lq, Lk]` and per-head outputs `[B*H, Lq, dh]`.
fn attend<S: Scalar>(g: &mut Graph<S>, q: Var, k: Var, v: Var, heads: usize) -> (Var, Var) {
    let dh = g.shape(q)[2] / heads;
    let (q, k, v) = (split_heads(g, q, heads), split_heads(g, k, heads), split_heads(g, v, heads));
    let scores = g.bmm(q, k, false, true);
    let scores = g.scale(scores, S::lit(1.0 / (dh as f64).sqrt()));
    let att = g.softmax(scores);
    let out = g.bmm(att, v, false, false);
    (att, out)
}

/// Outputs of one block plus its attention maps, kept for inspection.
pub struct BlockNodes {
    pub hidden: Var,
    pub self_attention: Var,
    pub cross_attention: Var,
}

/// One pre-norm residual block; `cond` is `[B, Lc, d]`.
pub fn block_graph<S: Scalar>(
    g: &mut Graph<S>,
    p: &mut Binder<S>,
    prefix: &str,
    cfg: &DenoiserConfig,
    hidden: Var,
    cond: Var,
) -> BlockNodes {
    let batch = g.shape(hidden)[0];
    let heads = cfg.n_heads;
    let name = |s: &str| format!("{prefix}{s}");

    let x = nn::layer_norm(g, p, &name("ln1"), hidden);
    let q = nn::linear(g, p, &name("attn.q"), x);
    let k = nn::linear(g, p, &name("attn.k"), x);
    let v = nn::linear(g, p, &name("attn.v"), x);
    let (self_att, heads_out) = attend(g, q, k, v, heads);
    let merged = merge_heads(g, heads_out, batch, heads);
    let o = nn::linear(g, p, &name("attn.o"), merged);
    let h = g.add(hidden, o);

    let x = nn::layer_norm(g, p, &name("ln2"), h);
    let c = nn::layer_norm(g, p, &name("lnc"), cond);
    let (cross_att, routed) = match cfg.cond_mode {
        CondMode::CondKv => {
            let q = nn::linear(g, p, &name("xattn.q"), x);
            let k = nn::linear(g, p, &name("xattn.k"), c);
            let v = nn::linear(g, p, &name("xattn.v"), c);
            attend(g, q, k, v, heads)
        }
        CondMode::CondQuery => {
            let q = nn::linear(g, p, &name("xattn.q"), c);
            let k = nn::linear(g, p, &name("xattn.k"), x);
            let v = nn::linear(g, p, &name("xattn.v"), x);
            let (att, per_cond) = attend(g, q, k, v, heads);
            // Each sequence position gathers the condition outputs it contributed to.
            let back = g.permute(att, &[0, 2, 1]);
            let back = g.row_normalize(back);
            let out = g.bmm(back, per_cond, false, false);
            (att, out)
        }
    };
    let merged = merge_heads(g, routed, batch, heads);
    let o = nn::linear(g, p, &name("xattn.o"), merged);
    let h = g.add(h, o);

    let x = nn::layer_norm(g, p, &name("ln3"), h);
    let f = nn::linear(g, p, &name("ffn1"), x);
    let f = g.gelu(f);
    let f = nn::linear(g, p, &name("ffn2"), f);
    BlockNodes {
        hidden: g.add(h, f),
        self_attention: self_att,
        cross_attention: cross_att,
    }
}

/// Clean-token logits `[B*L, K]` for a batch of corrupted sequences.
pub fn logits_graph<S: Scalar>(
    g: &mut Graph<S>,
    p: &mut Binder<S>,
    prefix: &str,
    cfg: &DenoiserConfig,
    tokens: &[usize],
    t: &[usize],
    cond: Var,
) -> Var {
    let mut h = embed_graph(g, p, prefix, cfg, tokens, t);
    for b in 0..cfg.n_blocks {
        h = block_graph(g, p, &format!("{prefix}b{b}."), cfg, h, cond).hidden;
    }
    let h = nn::layer_norm(g, p, &format!("{prefix}ln_f"), h);
    let flat = g.reshape(h, &[t.len() * cfg.seq_len, cfg.d_model]);
    nn::linear(g, p, &format!("{prefix}head"), flat)
}

/// Per-position distribution over `z_{t-1}` from clean-token logits (`L x K`, row-major).
pub fn p_prev_from_logits(zt: &[usize], t: usize, logits: &[f64], tables: &ScheduleTables) -> Result<Vec<Vec<f64>>> {
    let k = tables.vocab();
    zt.iter()
        .enumerate()
        .map(|(i, &x)| {
            let p = softmax_f64(&logits[i * k..(i + 1) * k]);
            Ok(tables.mixture(x, t)?.apply(&p))
        })
        .collect()
}

fn sample_categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let r: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &pj) in p.iter().enumerate() {
        if pj > 0.0 {
            acc += pj;
            last = j;
            if r < acc {
                return j;
            }
        }
    }
    last
}

/// A standalone denoiser with names relative to its own store.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<S> {
    pub config: DenoiserConfig,
    pub params: ParamStore<S>,
}

impl<S: Scalar> Denoiser<S> {
    pub fn random(config: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        init_denoiser(&mut params, rng, "", &config);
        Ok(Denoiser { config, params })
    }

    /// Takes the denoiser stored under `prefix` in a larger store.
    pub fn from_store(config: DenoiserConfig, store: &ParamStore<S>, prefix: &str) -> Result<Self> {
        config.validate()?;
        let params = store.extract(prefix);
        for (name, shape) in config.tensor_shapes() {
            match params.get(&name) {
                None => return Err(Error::InvalidState(format!("denoiser tensor {prefix}{name} missing"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::ShapeMismatch(format!(
                        "denoiser tensor {prefix}{name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(Denoiser { config, params })
    }

    fn check_state(&self, zt: &[usize], t: usize) -> Result<()> {
        let c = &self.config;
        if zt.len() != c.seq_len {
            return Err(Error::ShapeMismatch(format!(
                "sequence of length {} for a model of length {}",
                zt.len(),
                c.seq_len
            )));
        }
        if let Some(&bad) = zt.iter().find(|&&x| x > c.mask_id()) {
            return Err(Error::InvalidInput(format!("token {bad} exceeds mask id {}", c.mask_id())));
        }
        if t > c.steps {
            return Err(Error::InvalidArgument(format!("timestep {t} outside 0..={}", c.steps)));
        }
        Ok(())
    }

    /// `[L, d]` embedding of one sequence.
    pub fn embed(&self, zt: &[usize], t: usize) -> Result<Tensor<S>> {
        self.check_state(zt, t)?;
        let mut g = Graph::new();
        let mut p = Binder::frozen(&self.params);
        let h = embed_graph(&mut g, &mut p, "", &self.config, zt, &[t]);
        Ok(g.value(h).clone().reshape(&[self.config.seq_len, self.config.d_model]))
    }

    /// `[L, K]` clean-token logits.
    pub fn predict_x0_logits(&self, zt: &[usize], t: usize, cond: &ConditionSequence<S>) -> Result<Tensor<S>> {
        self.check_state(zt, t)?;
        if cond.dim() != self.config.d_model {
            return Err(Error::ShapeMismatch(format!(
                "condition width {} vs d_model {}",
                cond.dim(),
                self.config.d_model
            )));
        }
        let mut g = Graph::new();
        let mut p = Binder::frozen(&self.params);
        let c = g.constant(cond.tensor().clone().reshape(&[1, cond.len(), cond.dim()]));
        let y = logits_graph(&mut g, &mut p, "", &self.config, zt, &[t], c);
        let out = g.value(y).clone();
        if !out.all_finite() {
            return Err(Error::InvalidState("denoiser produced non-finite logits".into()));
        }
        Ok(out)
    }

    /// Per-position distribution over `z_{t-1}`, each of length `K + 1`.
    pub fn p_prev_distribution(
        &self,
        zt: &[usize],
        t: usize,
        cond: &ConditionSequence<S>,
        tables: &ScheduleTables,
    ) -> Result<Vec<Vec<f64>>> {
        if t == 0 {
            return Err(Error::InvalidArgument("no reverse step from t = 0".into()));
        }
        let logits = self.predict_x0_logits(zt, t, cond)?;
        let l: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
        p_prev_from_logits(zt, t, &l, tables)
    }

    /// Ancestral sampling from `start.t` down to 0.
    pub fn reverse_sample(
        &self,
        start: &TokenSequence,
        cond: &ConditionSequence<S>,
        tables: &ScheduleTables,
        rng: &mut impl Rng,
    ) -> Result<TokenSequence> {
        self.reverse_steps(start, 0, cond, tables, rng)
    }

    /// Ancestral sampling from `start.t` down to `stop`.
    pub fn reverse_steps(
        &self,
        start: &TokenSequence,
        stop: usize,
        cond: &ConditionSequence<S>,
        tables: &ScheduleTables,
        rng: &mut impl Rng,
    ) -> Result<TokenSequence> {
        self.check_state(&start.tokens, start.t)?;
        let mut z = start.tokens.clone();
        for t in (stop + 1..=start.t).rev() {
            let dist = self.p_prev_distribution(&z, t, cond, tables)?;
            z = dist.iter().map(|p| sample_categorical(p, rng)).collect();
        }
        Ok(TokenSequence {
            tokens: z,
            t: stop.min(start.t),
        })
    }

    /// Draws clean tokens directly from the model's prediction at step `t`.
    pub fn sample_clean(
        &self,
        zt: &[usize],
        t: usize,
        cond: &ConditionSequence<S>,
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>> {
        let logits = self.predict_x0_logits(zt, t, cond)?;
        let k = self.config.vocab;
        let l: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
        Ok(l.chunks(k).map(|row| sample_categorical(&softmax_f64(row), rng)).collect())
    }
}
