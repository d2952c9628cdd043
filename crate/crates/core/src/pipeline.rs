//! The assembled model (autoencoder, two perceptual encoders, denoiser) and
//! stylisation of a content image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::denoiser::{self, Denoiser, DenoiserConfig};
use crate::diffusion::{build_schedule, prior_sample, sample_xt, ScheduleParams, ScheduleTables, TokenSequence};
use crate::error::{Error, Result};
use crate::image_io::ImageTensor;
use crate::nn::{Binder, ParamStore};
use crate::perceptual::{
    self, adain, blend_alpha, blend_multi_features, to_condition_sequence, ConditionSequence, FeatureMap,
    PerceptualConfig, PerceptualEncoder, StyleBlendSpec,
};
use crate::scalar::Scalar;
use crate::vq::{self, TokenGrid, VqConfig, VqModel};

pub const VQ_PREFIX: &str = "vq.";
pub const FROZEN_PREFIX: &str = "percep.frozen.";
pub const APATH_PREFIX: &str = "percep.apath.";
pub const DENOISER_PREFIX: &str = "denoiser.";
/// Linear layer mapping conditioned features to the denoiser width.
pub const COND_PROJ: &str = "denoiser.cond_proj";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ModelConfig {
    pub vq: VqConfig,
    pub perceptual: PerceptualConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleParams,
}

impl ModelConfig {
    /// Overwrites the denoiser and schedule fields that follow from the other parts.
    pub fn harmonize(mut self) -> Self {
        self.denoiser.vocab = self.vq.vocab;
        self.denoiser.seq_len = 2 * self.vq.tokens_per_image();
        self.denoiser.cond_dim = self.perceptual.final_width();
        self.schedule.vocab = self.vq.vocab;
        self.denoiser.steps = self.schedule.steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.vq.validate()?;
        self.perceptual.validate()?;
        self.denoiser.validate()?;
        build_schedule(self.schedule)?;
        if self.perceptual.in_channels != self.vq.in_channels {
            return Err(Error::InvalidArgument("perceptual and VQ input channels differ".into()));
        }
        if self.harmonize_clone() != *self {
            return Err(Error::InvalidArgument(
                "denoiser vocab/seq_len/steps/cond_dim disagree with the VQ, perceptual and schedule settings".into(),
            ));
        }
        Ok(())
    }

    fn harmonize_clone(&self) -> Self {
        self.clone().harmonize()
    }

    /// Default `t_start` for encoder-initialised stylisation: `ceil(0.6 T)`.
    pub fn default_t_start(&self) -> usize {
        (0.6 * self.schedule.steps as f64).ceil() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartMode {
    /// Start from a draw of the fully-corrupted marginal.
    MaskPrior,
    /// Start from the encoded content and style tokens corrupted to `t_start`.
    EncodedStart,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StylizeOptions {
    pub alpha: f64,
    pub mode: StartMode,
    /// Only used by [`StartMode::EncodedStart`]; `None` picks `ceil(0.6 T)`.
    pub t_start: Option<usize>,
    pub seed: u64,
}

impl Default for StylizeOptions {
    fn default() -> Self {
        StylizeOptions {
            alpha: 1.0,
            mode: StartMode::EncodedStart,
            t_start: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StyleInput {
    Single(ImageTensor),
    Blend(StyleBlendSpec),
}

impl StyleInput {
    /// The image whose tokens fill the style half of the sequence.
    fn token_source(&self) -> &ImageTensor {
        match self {
            StyleInput::Single(img) => img,
            // Blend entries are sorted by descending weight.
            StyleInput::Blend(spec) => &spec.entries()[0].0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StylizeOutput {
    pub image: ImageTensor,
    pub start: TokenSequence,
    pub tokens: TokenSequence,
}

/// Every trainable tensor of the pipeline in one store, names prefixed by component.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleModel<S> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    tables: ScheduleTables,
}

impl<S: Scalar> StyleModel<S> {
    /// Fresh model; the style-path encoder starts as a copy of the frozen one.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        vq::init_vq(&mut params, &mut rng, VQ_PREFIX, &config.vq);
        perceptual::init_encoder(&mut params, &mut rng, FROZEN_PREFIX, &config.perceptual);
        params.absorb(APATH_PREFIX, params.extract(FROZEN_PREFIX));
        denoiser::init_denoiser(&mut params, &mut rng, DENOISER_PREFIX, &config.denoiser);
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let tables = build_schedule(config.schedule)?;
        let model = StyleModel { config, params, tables };
        model.vq()?;
        model.frozen_encoder()?;
        model.apath_encoder()?;
        model.denoiser()?;
        Ok(model)
    }

    pub fn tables(&self) -> &ScheduleTables {
        &self.tables
    }

    pub fn vq(&self) -> Result<VqModel<S>> {
        VqModel::from_store(self.config.vq.clone(), &self.params, VQ_PREFIX)
    }

    pub fn frozen_encoder(&self) -> Result<PerceptualEncoder<S>> {
        PerceptualEncoder::from_store(self.config.perceptual.clone(), &self.params, FROZEN_PREFIX)
    }

    pub fn apath_encoder(&self) -> Result<PerceptualEncoder<S>> {
        PerceptualEncoder::from_store(self.config.perceptual.clone(), &self.params, APATH_PREFIX)
    }

    pub fn denoiser(&self) -> Result<Denoiser<S>> {
        Denoiser::from_store(self.config.denoiser.clone(), &self.params, DENOISER_PREFIX)
    }

    /// Multiscale-projected content features through the style path.
    pub fn content_features(&self, img: &ImageTensor) -> Result<FeatureMap<S>> {
        self.apath_encoder()?.content_features(img)
    }

    /// Final-stage style features through the style path.
    pub fn style_features(&self, img: &ImageTensor) -> Result<FeatureMap<S>> {
        self.apath_encoder()?.extract_style_final(img)
    }

    /// The AdaIN map for `style` and its alpha blend with the content features.
    pub fn condition_features(
        &self,
        content: &ImageTensor,
        style: &StyleInput,
        alpha: f64,
    ) -> Result<(FeatureMap<S>, FeatureMap<S>)> {
        let enc = self.apath_encoder()?;
        let fc = enc.content_features(content)?;
        let stylised = match style {
            StyleInput::Single(img) => adain(&fc, &enc.extract_style_final(img)?)?,
            StyleInput::Blend(spec) => {
                let feats = spec
                    .entries()
                    .iter()
                    .map(|(img, w)| Ok((enc.extract_style_final(img)?, *w)))
                    .collect::<Result<Vec<_>>>()?;
                blend_multi_features(&fc, &feats)?
            }
        };
        let blended = blend_alpha(&fc, &stylised, alpha)?;
        Ok((stylised, blended))
    }

    pub fn condition_sequence(&self, features: &FeatureMap<S>) -> Result<ConditionSequence<S>> {
        to_condition_sequence(features, &self.params, COND_PROJ)
    }

    /// Content tokens followed by style tokens.
    pub fn clean_sequence(&self, content: &ImageTensor, style: &ImageTensor) -> Result<Vec<usize>> {
        let vq = self.vq()?;
        let mut z = vq.encode_tokens(content)?.tokens;
        z.extend(vq.encode_tokens(style)?.tokens);
        Ok(z)
    }

    /// Decodes the content half of a full token sequence.
    pub fn decode_content_half(&self, tokens: &[usize]) -> Result<ImageTensor> {
        let side = self.config.vq.latent_side();
        let n = side * side;
        if tokens.len() != 2 * n {
            return Err(Error::ShapeMismatch(format!("expected {} tokens, got {}", 2 * n, tokens.len())));
        }
        self.vq()?.decode_tokens(&TokenGrid::new(side, side, tokens[..n].to_vec())?)
    }

    pub fn stylize(&self, content: &ImageTensor, style: &StyleInput, opts: &StylizeOptions) -> Result<StylizeOutput> {
        let steps = self.config.schedule.steps;
        let t_start = opts.t_start.unwrap_or_else(|| self.config.default_t_start());
        if opts.mode == StartMode::EncodedStart && t_start > steps {
            return Err(Error::InvalidArgument(format!("t_start {t_start} outside 0..={steps}")));
        }
        let (_, features) = self.condition_features(content, style, opts.alpha)?;
        let cond = self.condition_sequence(&features)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let start = match opts.mode {
            StartMode::MaskPrior => prior_sample(self.config.denoiser.seq_len, &self.tables, &mut rng),
            StartMode::EncodedStart => {
                let z0 = self.clean_sequence(content, style.token_source())?;
                TokenSequence {
                    tokens: sample_xt(&z0, t_start, &self.tables, &mut rng)?,
                    t: t_start,
                }
            }
        };
        let tokens = self.denoiser()?.reverse_sample(&start, &cond, &self.tables, &mut rng)?;
        let image = self.decode_content_half(&tokens.tokens)?;
        Ok(StylizeOutput { image, start, tokens })
    }

    /// Frozen-encoder final features for a batch of images, NHWC.
    pub fn frozen_final_batch(&self, images: &[&ImageTensor]) -> Result<crate::tensor::Tensor<S>> {
        let mut g = Graph::new();
        let mut p = Binder::frozen(&self.params);
        let x = g.constant(ImageTensor::batch_tensor(images)?);
        let stages = perceptual::pyramid_graph(&mut g, &mut p, FROZEN_PREFIX, &self.config.perceptual, x);
        Ok(g.value(*stages.last().unwrap()).clone())
    }
}

/// Model settings small enough for quick CPU tests.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vq: VqConfig {
            image_size: 16,
            hidden: [8, 8],
            vocab: 16,
            d_code: 8,
            ..VqConfig::default()
        },
        perceptual: PerceptualConfig {
            in_channels: 3,
            widths: vec![4, 8, 8, 8],
        },
        denoiser: DenoiserConfig {
            n_blocks: 2,
            d_model: 16,
            n_heads: 2,
            ffn_mult: 2,
            ..DenoiserConfig::default()
        },
        schedule: ScheduleParams {
            steps: 6,
            ..ScheduleParams::default()
        },
    }
    .harmonize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::{synth_images, SynthKind, SynthSpec};

    fn images(kind: SynthKind, seed: u64) -> Vec<ImageTensor> {
        synth_images(&SynthSpec::new(kind, seed, 16, 2)).unwrap()
    }

    #[test]
    fn config_harmonizes_and_validates() {
        let cfg = ModelConfig::default().harmonize();
        cfg.validate().unwrap();
        assert_eq!(cfg.denoiser.seq_len, 128);
        assert_eq!(cfg.default_t_start(), 15);
        let mut bad = cfg.clone();
        bad.denoiser.seq_len = 64;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn style_path_starts_as_frozen_copy() {
        let m = StyleModel::<f32>::new(tiny_config(), 3).unwrap();
        assert_eq!(m.params.extract(FROZEN_PREFIX), m.params.extract(APATH_PREFIX));
    }

    #[test]
    fn stylize_contracts() {
        let m = StyleModel::<f32>::new(tiny_config(), 1).unwrap();
        let c = &images(SynthKind::Blobs, 1)[0];
        let s = &images(SynthKind::Stripes, 2)[0];
        let style = StyleInput::Single(s.clone());
        for mode in [StartMode::MaskPrior, StartMode::EncodedStart] {
            let opts = StylizeOptions {
                alpha: 0.8,
                mode,
                t_start: None,
                seed: 7,
            };
            let a = m.stylize(c, &style, &opts).unwrap();
            assert_eq!((a.image.height(), a.image.width()), (16, 16));
            assert!(a.tokens.tokens.iter().all(|&x| x < 16));
            assert_eq!(a, m.stylize(c, &style, &opts).unwrap());
        }
        let zero = StylizeOptions {
            t_start: Some(0),
            ..StylizeOptions::default()
        };
        let out = m.stylize(c, &style, &zero).unwrap();
        assert_eq!(out.image, m.vq().unwrap().roundtrip(c).unwrap());
        let blend = StyleInput::Blend(StyleBlendSpec::new(vec![(s.clone(), 1.0)]).unwrap());
        let opts = StylizeOptions::default();
        assert_eq!(m.stylize(c, &blend, &opts).unwrap(), m.stylize(c, &style, &opts).unwrap());
        let bad = StylizeOptions {
            t_start: Some(7),
            ..opts
        };
        assert!(m.stylize(c, &style, &bad).is_err());
        let bad = StylizeOptions { alpha: 2.0, ..opts };
        assert!(m.stylize(c, &style, &bad).is_err());
    }
}
