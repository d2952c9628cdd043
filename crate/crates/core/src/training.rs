//! Training loops: the autoencoder, the denoiser (stage 1) and the decoder plus
//! style-path encoder (stage 2).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::denoiser::{self, Denoiser};
use crate::diffusion::{sample_xt, stage1_objective_with_grad, ObjectiveTerms, TokenSequence};
use crate::error::{Error, Result};
use crate::image_io::ImageTensor;
use crate::nn::{Binder, Optimizer, OptimizerConfig, OptimizerKind, ParamStore};
use crate::perceptual::{self, adain, FeatureMap, PerceptualEncoder};
use crate::pipeline::{StyleModel, APATH_PREFIX, COND_PROJ, DENOISER_PREFIX, FROZEN_PREFIX, VQ_PREFIX};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vq::{self, rows_distinct};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Vqae,
    Stage1,
    Stage2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub lambda_style: f64,
    pub lambda_content: f64,
    pub lambda_feature: f64,
    pub lambda_mlm: f64,
    /// Codebook rows unused for this many steps are re-seeded.
    pub dead_code_steps: usize,
    /// Reverse steps run by the stage-2 sampler.
    pub stage2_chain: usize,
    /// Start of the stage-2 sampler chain; `None` picks `ceil(0.3 T)`.
    pub stage2_t_start: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_stage(Stage::Stage1)
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let (steps, lr, optimizer) = match stage {
            Stage::Vqae => (2000, 1e-3, OptimizerKind::Adam),
            Stage::Stage1 => (5000, 1e-5, OptimizerKind::AdamW),
            Stage::Stage2 => (1000, 1e-4, OptimizerKind::Adam),
        };
        TrainConfig {
            stage,
            steps,
            batch: 8,
            lr,
            optimizer,
            seed: 0,
            lambda_style: 1.0,
            lambda_content: 1.0,
            lambda_feature: 1.0,
            lambda_mlm: 0.01,
            dead_code_steps: 200,
            stage2_chain: 4,
            stage2_t_start: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr)));
        }
        for (name, v) in [
            ("lambda_style", self.lambda_style),
            ("lambda_content", self.lambda_content),
            ("lambda_feature", self.lambda_feature),
            ("lambda_mlm", self.lambda_mlm),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} = {v} must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig::new(self.optimizer, self.lr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub total: f64,
    pub elbo: f64,
    pub mlm: f64,
    pub style: f64,
    pub content: f64,
    pub feature: f64,
    pub wall_ms: f64,
}

/// Append-only per-step losses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    entries: Vec<LogEntry>,
}

pub const LOG_HEADER: &str = "step,total,elbo,mlm,style,content,feature,wall_ms";

impl RunLog {
    pub fn push(&mut self, e: LogEntry) {
        self.entries.push(e);
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{:.3}\n",
                e.step, e.total, e.elbo, e.mlm, e.style, e.content, e.feature, e.wall_ms
            ));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            detail: format!("{what} = {v}"),
        })
    }
}

fn prefix_trainable(prefixes: &'static [&'static str]) -> impl Fn(&str) -> bool {
    move |name: &str| prefixes.iter().any(|p| name.starts_with(p))
}

pub const VQAE_TRAINABLE: &[&str] = &[VQ_PREFIX];
pub const STAGE1_TRAINABLE: &[&str] = &[DENOISER_PREFIX];
pub const STAGE2_TRAINABLE: &[&str] = &["vq.dec.", APATH_PREFIX];

fn elapsed_ms(t0: Instant) -> f64 {
    t0.elapsed().as_secs_f64() * 1e3
}

/// Steps since each codebook row was last selected.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeUsage {
    last_used: Vec<usize>,
}

impl CodeUsage {
    pub fn new(vocab: usize) -> Self {
        CodeUsage {
            last_used: vec![0; vocab],
        }
    }
}

/// One autoencoder update on `batch`; returns the loss terms in `total`/`content`.
pub fn vqae_step<S: Scalar>(
    model: &mut StyleModel<S>,
    batch: &[&ImageTensor],
    opt: &mut Optimizer<S>,
    usage: &mut CodeUsage,
    step: usize,
    dead_code_steps: usize,
    rng: &mut impl Rng,
) -> Result<(LogEntry, vq::VqLossTerms)> {
    let t0 = Instant::now();
    let cfg = model.config.vq.clone();
    let trainable = prefix_trainable(VQAE_TRAINABLE);
    let (terms, grads, tokens, latents) = {
        let mut g = Graph::new();
        let mut p = Binder::new(&model.params, &trainable);
        let x = g.constant(ImageTensor::batch_tensor(batch)?);
        let l = vq::vqae_loss_graph(&mut g, &mut p, VQ_PREFIX, &cfg, x)?;
        check_finite(step, "autoencoder loss", l.terms.total)?;
        let grads = g.backward(l.total);
        (l.terms, p.collect(&grads), l.tokens, g.value(l.latent).clone())
    };
    opt.update(&mut model.params, &grads);
    for &t in &tokens {
        usage.last_used[t] = step;
    }
    reseed_dead_codes(&mut model.params, &cfg, usage, &latents, step, dead_code_steps, rng);
    let entry = LogEntry {
        step,
        total: terms.total,
        content: terms.recon,
        wall_ms: elapsed_ms(t0),
        ..LogEntry::default()
    };
    Ok((entry, terms))
}

fn reseed_dead_codes<S: Scalar>(
    params: &mut ParamStore<S>,
    cfg: &vq::VqConfig,
    usage: &mut CodeUsage,
    latents: &Tensor<S>,
    step: usize,
    dead_code_steps: usize,
    rng: &mut impl Rng,
) {
    let d = cfg.d_code;
    let cells = latents.len() / d;
    let key = format!("{VQ_PREFIX}codebook");
    let cb = params.get_mut(&key).expect("codebook present");
    for k in 0..cfg.vocab {
        if step >= usage.last_used[k] + dead_code_steps {
            let src = rng.gen_range(0..cells);
            for j in 0..d {
                let jitter = S::lit(rng.gen_range(-1e-3..1e-3));
                cb.data_mut()[k * d + j] = latents.data()[src * d + j] + jitter;
            }
            usage.last_used[k] = step;
        }
    }
    while !rows_distinct(cb, 1e-9) {
        for v in cb.data_mut() {
            *v += S::lit(rng.gen_range(-1e-4..1e-4));
        }
    }
}

/// Tokens and style-path features for every training image.
#[derive(Debug, Clone)]
pub struct PairData<S> {
    pub content: Vec<ImageTensor>,
    pub style: Vec<ImageTensor>,
    pub content_tokens: Vec<Vec<usize>>,
    pub style_tokens: Vec<Vec<usize>>,
    pub content_features: Vec<FeatureMap<S>>,
    pub style_features: Vec<FeatureMap<S>>,
}

impl<S: Scalar> PairData<S> {
    pub fn new(model: &StyleModel<S>, content: Vec<ImageTensor>, style: Vec<ImageTensor>) -> Result<Self> {
        if content.is_empty() || style.is_empty() {
            return Err(Error::InvalidArgument("need at least one content and one style image".into()));
        }
        let vq = model.vq()?;
        let enc = model.apath_encoder()?;
        let tok = |imgs: &[ImageTensor]| -> Result<Vec<Vec<usize>>> {
            imgs.iter().map(|i| Ok(vq.encode_tokens(i)?.tokens)).collect()
        };
        Ok(PairData {
            content_tokens: tok(&content)?,
            style_tokens: tok(&style)?,
            content_features: content.iter().map(|i| enc.content_features(i)).collect::<Result<_>>()?,
            style_features: style.iter().map(|i| enc.extract_style_final(i)).collect::<Result<_>>()?,
            content,
            style,
        })
    }

    /// Recomputes the style-path features, e.g. after the encoder changed.
    pub fn refresh_features(&mut self, model: &StyleModel<S>) -> Result<()> {
        let enc = model.apath_encoder()?;
        self.content_features = self.content.iter().map(|i| enc.content_features(i)).collect::<Result<_>>()?;
        self.style_features = self.style.iter().map(|i| enc.extract_style_final(i)).collect::<Result<_>>()?;
        Ok(())
    }

    pub fn clean_sequence(&self, ci: usize, si: usize) -> Vec<usize> {
        let mut z = self.content_tokens[ci].clone();
        z.extend_from_slice(&self.style_tokens[si]);
        z
    }

    pub fn sample_pairs(&self, n: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
        (0..n)
            .map(|_| (rng.gen_range(0..self.content.len()), rng.gen_range(0..self.style.len())))
            .collect()
    }
}

fn stack_maps<S: Scalar>(maps: &[FeatureMap<S>]) -> Tensor<S> {
    let m = &maps[0];
    let mut data = Vec::with_capacity(maps.len() * m.data().len());
    for f in maps {
        data.extend_from_slice(f.data());
    }
    Tensor::new(&[maps.len(), m.height(), m.width(), m.channels()], data)
}

/// A corrupted training example for the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Example {
    pub x0: Vec<usize>,
    pub xt: Vec<usize>,
    pub t: usize,
}

/// Draws `t` uniformly in `1..=t_max` and corrupts each pair's clean sequence.
pub fn stage1_examples<S: Scalar>(
    model: &StyleModel<S>,
    data: &PairData<S>,
    pairs: &[(usize, usize)],
    t_max: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Stage1Example>> {
    pairs
        .iter()
        .map(|&(ci, si)| {
            let x0 = data.clean_sequence(ci, si);
            let t = rng.gen_range(1..=t_max);
            let xt = sample_xt(&x0, t, model.tables(), rng)?;
            Ok(Stage1Example { x0, xt, t })
        })
        .collect()
}

fn stage1_logits<S: Scalar>(
    g: &mut Graph<S>,
    p: &mut Binder<S>,
    model: &StyleModel<S>,
    data: &PairData<S>,
    pairs: &[(usize, usize)],
    examples: &[Stage1Example],
) -> Result<Var> {
    let maps = pairs
        .iter()
        .map(|&(ci, si)| adain(&data.content_features[ci], &data.style_features[si]))
        .collect::<Result<Vec<_>>>()?;
    let cond_in = g.constant(stack_maps(&maps));
    let cond = perceptual::condition_graph(g, p, COND_PROJ, cond_in);
    let tokens: Vec<usize> = examples.iter().flat_map(|e| e.xt.iter().copied()).collect();
    let ts: Vec<usize> = examples.iter().map(|e| e.t).collect();
    Ok(denoiser::logits_graph(g, p, DENOISER_PREFIX, &model.config.denoiser, &tokens, &ts, cond))
}

/// Mean objective over the batch and its gradient with respect to the logits.
fn batch_objective<S: Scalar>(
    model: &StyleModel<S>,
    logits: &Tensor<S>,
    examples: &[Stage1Example],
    lambda_mlm: f64,
) -> Result<(ObjectiveTerms, Tensor<S>)> {
    let k = model.config.denoiser.vocab;
    let l = model.config.denoiser.seq_len;
    let b = examples.len() as f64;
    let mut sum = ObjectiveTerms {
        elbo: 0.0,
        mlm: 0.0,
        total: 0.0,
    };
    let mut grad = Vec::with_capacity(logits.len());
    for (i, e) in examples.iter().enumerate() {
        let rows: Vec<f64> = logits.data()[i * l * k..(i + 1) * l * k].iter().map(|v| v.as_f64()).collect();
        let (terms, g) = stage1_objective_with_grad(&e.x0, e.t, &e.xt, &rows, model.tables(), lambda_mlm)?;
        sum.elbo += terms.elbo / b;
        sum.mlm += terms.mlm / b;
        sum.total += terms.total / b;
        grad.extend(g.into_iter().map(|v| S::lit(v / b)));
    }
    Ok((sum, Tensor::new(logits.shape(), grad)))
}

/// Objective and parameter gradients for a fixed set of corrupted examples.
pub fn stage1_gradients<S: Scalar>(
    model: &StyleModel<S>,
    data: &PairData<S>,
    pairs: &[(usize, usize)],
    examples: &[Stage1Example],
    lambda_mlm: f64,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<(ObjectiveTerms, BTreeMap<String, Tensor<S>>)> {
    let mut g = Graph::new();
    let mut p = Binder::new(&model.params, trainable);
    let logits = stage1_logits(&mut g, &mut p, model, data, pairs, examples)?;
    let (terms, grad) = batch_objective(model, g.value(logits), examples, lambda_mlm)?;
    let loss = g.precomputed(S::lit(terms.total), vec![(logits, grad)]);
    let grads = g.backward(loss);
    Ok((terms, p.collect(&grads)))
}

/// One denoiser update; only denoiser tensors (including the condition projection) change.
pub fn stage1_step<S: Scalar>(
    model: &mut StyleModel<S>,
    data: &PairData<S>,
    pairs: &[(usize, usize)],
    opt: &mut Optimizer<S>,
    step: usize,
    lambda_mlm: f64,
    rng: &mut impl Rng,
) -> Result<LogEntry> {
    let t0 = Instant::now();
    let steps = model.config.schedule.steps;
    let examples = stage1_examples(model, data, pairs, steps, rng)?;
    let trainable = prefix_trainable(STAGE1_TRAINABLE);
    let (terms, grads) = stage1_gradients(model, data, pairs, &examples, lambda_mlm, &trainable)
        .map_err(|e| match e {
            Error::InvalidInput(d) => Error::NonFinite { step, detail: d },
            other => other,
        })?;
    check_finite(step, "stage-1 objective", terms.total)?;
    opt.update(&mut model.params, &grads);
    Ok(LogEntry {
        step,
        total: terms.total,
        elbo: terms.elbo,
        mlm: terms.mlm,
        wall_ms: elapsed_ms(t0),
        ..LogEntry::default()
    })
}

/// Mean objective over `draws` deterministic corruptions of `pairs` (no update).
pub fn stage1_eval<S: Scalar>(
    model: &StyleModel<S>,
    data: &PairData<S>,
    pairs: &[(usize, usize)],
    lambda_mlm: f64,
    draws: usize,
    seed: u64,
) -> Result<ObjectiveTerms> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = ObjectiveTerms {
        elbo: 0.0,
        mlm: 0.0,
        total: 0.0,
    };
    for _ in 0..draws {
        let examples = stage1_examples(model, data, pairs, model.config.schedule.steps, &mut rng)?;
        let mut g = Graph::new();
        let mut p = Binder::frozen(&model.params);
        let logits = stage1_logits(&mut g, &mut p, model, data, pairs, &examples)?;
        let (terms, _) = batch_objective(model, g.value(logits), &examples, lambda_mlm)?;
        acc.elbo += terms.elbo / draws as f64;
        acc.mlm += terms.mlm / draws as f64;
        acc.total += terms.total / draws as f64;
    }
    Ok(acc)
}

/// Share of masked positions whose arg-max clean-token prediction is right, with `t <= t_max`.
pub fn masked_accuracy<S: Scalar>(
    model: &StyleModel<S>,
    data: &PairData<S>,
    pairs: &[(usize, usize)],
    t_max: usize,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = model.config.denoiser.vocab;
    let mask = model.config.denoiser.mask_id();
    let (mut hit, mut total) = (0usize, 0usize);
    for _ in 0..draws {
        let examples = stage1_examples(model, data, pairs, t_max, &mut rng)?;
        let mut g = Graph::new();
        let mut p = Binder::frozen(&model.params);
        let logits = stage1_logits(&mut g, &mut p, model, data, pairs, &examples)?;
        let rows = g.value(logits).data().chunks(k);
        let flat_x0 = examples.iter().flat_map(|e| e.x0.iter());
        let flat_xt = examples.iter().flat_map(|e| e.xt.iter());
        for ((row, &x0), &xt) in rows.zip(flat_x0).zip(flat_xt) {
            if xt != mask {
                continue;
            }
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            total += 1;
            hit += usize::from(best == x0);
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Loss weights and sampler settings for stage 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Weights {
    pub style: f64,
    pub content: f64,
    pub feature: f64,
}

impl From<&TrainConfig> for Stage2Weights {
    fn from(c: &TrainConfig) -> Self {
        Stage2Weights {
            style: c.lambda_style,
            content: c.lambda_content,
            feature: c.lambda_feature,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Terms {
    pub total: f64,
    pub style: f64,
    pub content: f64,
    pub feature: f64,
}

/// Denoised content-half tokens for each pair, produced by a short
/// gradient-free chain from the corrupted clean sequence plus a final
/// clean-token draw if the chain stops above `t = 0`.
pub fn stage2_tokens<S: Scalar>(
    model: &StyleModel<S>,
    data: &PairData<S>,
    pairs: &[(usize, usize)],
    chain: usize,
    t_start: Option<usize>,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    let steps = model.config.schedule.steps;
    let t_start = t_start.unwrap_or_else(|| (0.3 * steps as f64).ceil() as usize).min(steps);
    let den: Denoiser<S> = model.denoiser()?;
    let enc = model.apath_encoder()?;
    let n = model.config.vq.tokens_per_image();
    pairs
        .iter()
        .map(|&(ci, si)| {
            let fc = enc.content_features(&data.content[ci])?;
            let fs = enc.extract_style_final(&data.style[si])?;
            let cond = model.condition_sequence(&adain(&fc, &fs)?)?;
            let z0 = data.clean_sequence(ci, si);
            let start = TokenSequence {
                tokens: sample_xt(&z0, t_start, model.tables(), rng)?,
                t: t_start,
            };
            let stop = t_start.saturating_sub(chain);
            let z = den.reverse_steps(&start, stop, &cond, model.tables(), rng)?;
            let tokens = if stop > 0 {
                den.sample_clean(&z.tokens, stop, &cond, rng)?
            } else {
                z.tokens
            };
            Ok(tokens[..n].to_vec())
        })
        .collect()
}

/// Stage-2 perceptual losses for decoded `tokens` and their gradients.
///
/// The decoder input is a constant lookup of the codebook, so nothing upstream
/// of the token boundary can receive gradient.
pub fn stage2_gradients<S: Scalar>(
    model: &StyleModel<S>,
    data: &PairData<S>,
    pairs: &[(usize, usize)],
    tokens: &[Vec<usize>],
    weights: Stage2Weights,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<(Stage2Terms, BTreeMap<String, Tensor<S>>)> {
    let cfg = &model.config;
    let side = cfg.vq.latent_side();
    let codebook = model.params.expect(&format!("{VQ_PREFIX}codebook"));
    let d = cfg.vq.d_code;
    let mut zq = Vec::with_capacity(pairs.len() * side * side * d);
    for t in tokens {
        for &id in t {
            if id >= cfg.vq.vocab {
                return Err(Error::InvalidInput(format!("token {id} is not a codebook index")));
            }
            zq.extend_from_slice(&codebook.data()[id * d..(id + 1) * d]);
        }
    }
    let contents: Vec<&ImageTensor> = pairs.iter().map(|&(c, _)| &data.content[c]).collect();
    let styles: Vec<&ImageTensor> = pairs.iter().map(|&(_, s)| &data.style[s]).collect();

    let mut g = Graph::new();
    let mut p = Binder::new(&model.params, trainable);
    let pc = &cfg.perceptual;
    let xc = g.constant(ImageTensor::batch_tensor(&contents)?);
    let xs = g.constant(ImageTensor::batch_tensor(&styles)?);

    // Style-path conditioning map.
    let pyr_c = perceptual::pyramid_graph(&mut g, &mut p, APATH_PREFIX, pc, xc);
    let fc = perceptual::multiscale_graph(&mut g, &mut p, APATH_PREFIX, &pyr_c);
    let fs = *perceptual::pyramid_graph(&mut g, &mut p, APATH_PREFIX, pc, xs).last().unwrap();
    let a = perceptual::adain_graph(&mut g, fc, fs);

    let z = g.constant(Tensor::new(&[pairs.len(), side, side, d], zq));
    let out = vq::decoder_graph(&mut g, &mut p, VQ_PREFIX, z);

    let pyr_o = perceptual::pyramid_graph(&mut g, &mut p, FROZEN_PREFIX, pc, out);
    let fo = *pyr_o.last().unwrap();
    let mo = perceptual::multiscale_graph(&mut g, &mut p, FROZEN_PREFIX, &pyr_o);
    let target_s = *perceptual::pyramid_graph(&mut g, &mut p, FROZEN_PREFIX, pc, xs).last().unwrap();
    let pyr_tc = perceptual::pyramid_graph(&mut g, &mut p, FROZEN_PREFIX, pc, xc);
    let target_c = perceptual::multiscale_graph(&mut g, &mut p, FROZEN_PREFIX, &pyr_tc);
    let target_s = g.detach(target_s);
    let target_c = g.detach(target_c);

    let ls = g.l1_loss(fo, target_s);
    let lc = g.l1_loss(mo, target_c);
    let (ah, aw) = (g.shape(a)[1], g.shape(a)[2]);
    let fo_r = g.resize(fo, ah, aw);
    let lf = g.l1_loss(a, fo_r);
    let ws = g.scale(ls, S::lit(weights.style));
    let wc = g.scale(lc, S::lit(weights.content));
    let wf = g.scale(lf, S::lit(weights.feature));
    let sum = g.add(ws, wc);
    let total = g.add(sum, wf);
    let terms = Stage2Terms {
        total: g.value(total).item().as_f64(),
        style: g.value(ls).item().as_f64(),
        content: g.value(lc).item().as_f64(),
        feature: g.value(lf).item().as_f64(),
    };
    let grads = g.backward(total);
    Ok((terms, p.collect(&grads)))
}

/// One decoder + style-path update.
#[allow(clippy::too_many_arguments)]
pub fn stage2_step<S: Scalar>(
    model: &mut StyleModel<S>,
    data: &PairData<S>,
    pairs: &[(usize, usize)],
    opt: &mut Optimizer<S>,
    step: usize,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(LogEntry, Stage2Terms)> {
    let t0 = Instant::now();
    let tokens = stage2_tokens(model, data, pairs, cfg.stage2_chain, cfg.stage2_t_start, rng)?;
    let trainable = prefix_trainable(STAGE2_TRAINABLE);
    let (terms, grads) = stage2_gradients(model, data, pairs, &tokens, cfg.into(), &trainable)?;
    check_finite(step, "stage-2 loss", terms.total)?;
    opt.update(&mut model.params, &grads);
    let entry = LogEntry {
        step,
        total: terms.total,
        style: terms.style,
        content: terms.content,
        feature: terms.feature,
        wall_ms: elapsed_ms(t0),
        ..LogEntry::default()
    };
    Ok((entry, terms))
}

/// Stage-2 losses on `pairs` with a fixed sampler seed (no update).
pub fn stage2_eval<S: Scalar>(
    model: &StyleModel<S>,
    data: &PairData<S>,
    pairs: &[(usize, usize)],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Stage2Terms> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = stage2_tokens(model, data, pairs, cfg.stage2_chain, cfg.stage2_t_start, &mut rng)?;
    Ok(stage2_gradients(model, data, pairs, &tokens, cfg.into(), &crate::nn::none_trainable)?.0)
}

/// Mean absolute difference of two equally shaped feature maps.
pub fn feature_l1<S: Scalar>(a: &FeatureMap<S>, b: &FeatureMap<S>) -> Result<f64> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::ShapeMismatch(format!(
            "feature maps {:?} and {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (*x - *y).abs().as_f64()).sum::<f64>() / n)
}

/// Mean L1 between final-stage features of the output and the style image.
pub fn l_style<S: Scalar>(out: &ImageTensor, style: &ImageTensor, enc: &PerceptualEncoder<S>) -> Result<f64> {
    feature_l1(&enc.extract_style_final(out)?, &enc.extract_style_final(style)?)
}

/// Mean L1 between multiscale-projected features of the output and the content image.
pub fn l_content<S: Scalar>(out: &ImageTensor, content: &ImageTensor, enc: &PerceptualEncoder<S>) -> Result<f64> {
    feature_l1(&enc.content_features(out)?, &enc.content_features(content)?)
}

/// Mean L1 between a conditioning map and the output's final features resized to its grid.
pub fn l_feature<S: Scalar>(out: &ImageTensor, cond: &FeatureMap<S>, enc: &PerceptualEncoder<S>) -> Result<f64> {
    let f = enc.extract_style_final(out)?;
    if f.channels() != cond.channels() {
        return Err(Error::ShapeMismatch(format!(
            "condition map has {} channels, features {}",
            cond.channels(),
            f.channels()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(f.tensor().clone());
    let r = g.resize(x, cond.height(), cond.width());
    feature_l1(&FeatureMap::from_batch(g.value(r), 0)?, cond)
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub log: RunLog,
    pub optimizer: Optimizer<S>,
}

/// Runs `cfg.steps` updates of `cfg.stage`. The autoencoder stage trains on the
/// union of both image sets.
pub fn train<S: Scalar>(
    model: &mut StyleModel<S>,
    cfg: &TrainConfig,
    content: &[ImageTensor],
    style: &[ImageTensor],
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer_config());
    let mut log = RunLog::default();
    match cfg.stage {
        Stage::Vqae => {
            let images: Vec<&ImageTensor> = content.iter().chain(style).collect();
            if images.is_empty() {
                return Err(Error::InvalidArgument("no training images".into()));
            }
            let mut usage = CodeUsage::new(model.config.vq.vocab);
            for step in 1..=cfg.steps {
                let batch: Vec<&ImageTensor> = (0..cfg.batch).map(|_| images[rng.gen_range(0..images.len())]).collect();
                let (e, _) = vqae_step(model, &batch, &mut opt, &mut usage, step, cfg.dead_code_steps, &mut rng)?;
                log.push(e);
            }
        }
        Stage::Stage1 => {
            let data = PairData::new(model, content.to_vec(), style.to_vec())?;
            for step in 1..=cfg.steps {
                let pairs = data.sample_pairs(cfg.batch, &mut rng);
                log.push(stage1_step(model, &data, &pairs, &mut opt, step, cfg.lambda_mlm, &mut rng)?);
            }
        }
        Stage::Stage2 => {
            let data = PairData::new(model, content.to_vec(), style.to_vec())?;
            for step in 1..=cfg.steps {
                let pairs = data.sample_pairs(cfg.batch, &mut rng);
                log.push(stage2_step(model, &data, &pairs, &mut opt, step, cfg, &mut rng)?.0);
            }
        }
    }
    Ok(TrainOutcome { log, optimizer: opt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::{synth_images, SynthKind, SynthSpec};
    use crate::nn::all_trainable;
    use crate::pipeline::tiny_config;

    fn imgs(kind: SynthKind, seed: u64, n: usize) -> Vec<ImageTensor> {
        synth_images(&SynthSpec::new(kind, seed, 16, n)).unwrap()
    }

    fn fixture() -> (StyleModel<f64>, PairData<f64>) {
        let m = StyleModel::new(tiny_config(), 5).unwrap();
        let d = PairData::new(&m, imgs(SynthKind::Blobs, 1, 2), imgs(SynthKind::Stripes, 2, 2)).unwrap();
        (m, d)
    }

    #[test]
    fn config_defaults_and_validation() {
        let s1 = TrainConfig::for_stage(Stage::Stage1);
        assert_eq!((s1.lr, s1.optimizer), (1e-5, OptimizerKind::AdamW));
        let s2 = TrainConfig::for_stage(Stage::Stage2);
        assert_eq!((s2.lr, s2.optimizer), (1e-4, OptimizerKind::Adam));
        assert_eq!(TrainConfig::for_stage(Stage::Vqae).lr, 1e-3);
        let zero = TrainConfig { steps: 0, ..s1.clone() };
        assert!(zero.validate().is_err());
        let neg = TrainConfig { lr: -1.0, ..s1 };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn feature_l1_examples() {
        let a = FeatureMap::new(1, 1, 2, vec![1.0f64, 3.0]).unwrap();
        let b = FeatureMap::new(1, 1, 2, vec![2.0, 5.0]).unwrap();
        assert_eq!(feature_l1(&a, &b).unwrap(), 1.5);
        assert_eq!(feature_l1(&b, &a).unwrap(), 1.5);
        assert_eq!(feature_l1(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn perceptual_losses_vanish_on_fixed_points() {
        let (m, d) = fixture();
        let enc = m.frozen_encoder().unwrap();
        let x = &d.content[0];
        let y = &d.style[0];
        assert_eq!(l_style(x, x, &enc).unwrap(), 0.0);
        assert_eq!(l_content(x, x, &enc).unwrap(), 0.0);
        assert_eq!(l_content(x, y, &enc).unwrap(), l_content(y, x, &enc).unwrap());
        assert!(l_style(x, y, &enc).unwrap() > 0.0);
        let own = enc.extract_style_final(x).unwrap();
        assert_eq!(l_feature(x, &own, &enc).unwrap(), 0.0);
        assert!(l_feature(y, &own, &enc).unwrap() >= 0.0);
    }

    #[test]
    fn stage1_perfect_predictor_and_finite_start() {
        let (m, d) = fixture();
        let pairs = vec![(0, 0), (1, 1)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ex = stage1_examples(&m, &d, &pairs, 6, &mut rng).unwrap();
        let k = m.config.vq.vocab;
        let l = m.config.denoiser.seq_len;
        let mut oracle = vec![-1e4; pairs.len() * l * k];
        for (i, e) in ex.iter().enumerate() {
            for (j, &x) in e.x0.iter().enumerate() {
                oracle[(i * l + j) * k + x] = 0.0;
            }
        }
        let t = Tensor::new(&[pairs.len() * l, k], oracle);
        let (terms, _) = batch_objective(&m, &t, &ex, 0.01).unwrap();
        assert!(terms.total.abs() < 1e-9);
        let init = stage1_eval(&m, &d, &pairs, 0.01, 2, 3).unwrap();
        assert!(init.total.is_finite() && init.total > 0.0);
    }

    #[test]
    fn stage1_updates_only_the_denoiser() {
        let (mut m, d) = fixture();
        let before = m.params.clone();
        let mut opt = Optimizer::new(OptimizerConfig::adamw(1e-3));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        stage1_step(&mut m, &d, &[(0, 1)], &mut opt, 1, 0.01, &mut rng).unwrap();
        let mut changed = 0;
        for (name, t) in m.params.iter() {
            let same = before.get(name).unwrap() == t;
            if name.starts_with(DENOISER_PREFIX) {
                changed += usize::from(!same);
            } else {
                assert!(same, "{name}");
            }
        }
        assert!(changed > 10);
    }

    #[test]
    fn stage2_gradient_blocking() {
        let (m, d) = fixture();
        let pairs = vec![(0, 0), (1, 1)];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tokens = stage2_tokens(&m, &d, &pairs, 4, None, &mut rng).unwrap();
        let w = Stage2Weights {
            style: 1.0,
            content: 1.0,
            feature: 1.0,
        };
        let (_, grads) = stage2_gradients(&m, &d, &pairs, &tokens, w, &all_trainable).unwrap();
        for (name, g) in &grads {
            if name.starts_with(DENOISER_PREFIX) || name.starts_with("vq.enc.") || name == "vq.codebook" {
                assert_eq!(g.max_abs(), 0.0, "{name}");
            }
        }
        assert!(grads.keys().any(|k| k.starts_with("vq.dec.")));
        assert!(grads.keys().any(|k| k.starts_with(APATH_PREFIX)));
        let trainable = prefix_trainable(STAGE2_TRAINABLE);
        let (_, grads) = stage2_gradients(&m, &d, &pairs, &tokens, w, &trainable).unwrap();
        assert!(grads.keys().all(|k| k.starts_with("vq.dec.") || k.starts_with(APATH_PREFIX)));
    }

    #[test]
    fn stage2_content_only_on_roundtrip() {
        let (m, d) = fixture();
        let pairs = vec![(0, 1)];
        let tokens = vec![d.content_tokens[0].clone()];
        let w = Stage2Weights {
            style: 0.0,
            content: 1.0,
            feature: 0.0,
        };
        let (terms, _) = stage2_gradients(&m, &d, &pairs, &tokens, w, &crate::nn::none_trainable).unwrap();
        let out = m.vq().unwrap().roundtrip(&d.content[0]).unwrap();
        let want = l_content(&out, &d.content[0], &m.frozen_encoder().unwrap()).unwrap();
        // The image path clamps and round-trips through f32, the graph does not.
        assert!((terms.total - want).abs() < 1e-6, "{} vs {want}", terms.total);
    }

    #[test]
    fn vqae_training_is_deterministic() {
        let run = || {
            let mut m = StyleModel::<f32>::new(tiny_config(), 9).unwrap();
            let cfg = TrainConfig {
                steps: 3,
                batch: 2,
                ..TrainConfig::for_stage(Stage::Vqae)
            };
            let out = train(&mut m, &cfg, &imgs(SynthKind::Checker, 3, 3), &[]).unwrap();
            (m.params, out.log.entries().iter().map(|e| e.total).collect::<Vec<_>>())
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn run_log_csv_layout() {
        let mut log = RunLog::default();
        log.push(LogEntry {
            step: 1,
            total: 0.5,
            ..LogEntry::default()
        });
        let csv = log.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(LOG_HEADER));
        assert!(lines.next().unwrap().starts_with("1,0.5,0,0,0,0,0,"));
    }
}
