//! Small convolutional feature encoder, AdaIN statistic matching and the
//! conversion of conditioned features into a token sequence.
//!
//! Graph-level builders (`*_graph`) are what the training loops use; the
//! value-level functions wrap them in a throwaway graph with frozen parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ChannelOp, Graph, Var};
use crate::error::{Error, Result};
use crate::image_io::ImageTensor;
use crate::nn::{self, Binder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Added to the variance before the square root in every channel std.
pub const STAT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptualConfig {
    pub in_channels: usize,
    /// One stride-2 conv stage per entry.
    pub widths: Vec<usize>,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig {
            in_channels: 3,
            widths: vec![16, 32, 64, 64],
        }
    }
}

impl PerceptualConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "perceptual encoder needs positive channel widths, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    pub fn final_width(&self) -> usize {
        *self.widths.last().expect("validated config")
    }

    pub fn stage_grid(&self, input: usize, stage: usize) -> usize {
        (0..=stage).fold(input, |n, _| n.div_ceil(2))
    }

    /// Expected `(name, shape)` of every tensor, names relative to the encoder prefix.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for (i, &w) in self.widths.iter().enumerate() {
            out.push((format!("s{i}.w"), vec![3, 3, cin, w]));
            out.push((format!("s{i}.b"), vec![w]));
            cin = w;
        }
        let total: usize = self.widths.iter().sum();
        out.push(("msproj.w".into(), vec![1, 1, total, self.final_width()]));
        out.push(("msproj.b".into(), vec![self.final_width()]));
        out
    }
}

/// One feature map, stored NHWC with a batch of one.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<S> {
    tensor: Tensor<S>,
}

impl<S: Scalar> FeatureMap<S> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<S>) -> Result<Self> {
        if height * width * channels != data.len() || height * width == 0 || channels == 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature map {height}x{width}x{channels} with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("feature map has non-finite values".into()));
        }
        Ok(FeatureMap {
            tensor: Tensor::new(&[1, height, width, channels], data),
        })
    }

    /// Takes sample `index` of an NHWC batch.
    pub fn from_batch(t: &Tensor<S>, index: usize) -> Result<Self> {
        if t.rank() != 4 || index >= t.shape()[0] {
            return Err(Error::ShapeMismatch(format!(
                "cannot take sample {index} of tensor {:?}",
                t.shape()
            )));
        }
        let (h, w, c) = (t.shape()[1], t.shape()[2], t.shape()[3]);
        let n = h * w * c;
        FeatureMap::new(h, w, c, t.data()[index * n..(index + 1) * n].to_vec())
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[3]
    }

    pub fn data(&self) -> &[S] {
        self.tensor.data()
    }

    /// `[1, H, W, C]`.
    pub fn tensor(&self) -> &Tensor<S> {
        &self.tensor
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> S {
        self.tensor.data()[(row * self.width() + col) * self.channels() + ch]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    Content,
    Style,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<S> {
    pub stages: Vec<FeatureMap<S>>,
    pub source: FeatureSource,
}

/// Conditioning tokens, `[len, d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSequence<S> {
    tokens: Tensor<S>,
}

impl<S: Scalar> ConditionSequence<S> {
    pub fn new(tokens: Tensor<S>) -> Result<Self> {
        if tokens.rank() != 2 || tokens.shape()[0] == 0 {
            return Err(Error::ShapeMismatch(format!(
                "condition sequence must be [len>0, d], got {:?}",
                tokens.shape()
            )));
        }
        if !tokens.all_finite() {
            return Err(Error::InvalidInput("condition sequence has non-finite values".into()));
        }
        Ok(ConditionSequence { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn token(&self, i: usize) -> &[S] {
        let d = self.dim();
        &self.tokens.data()[i * d..(i + 1) * d]
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.tokens
    }
}

/// Total order on images, used to make blends independent of argument order.
fn image_order(a: &ImageTensor, b: &ImageTensor) -> std::cmp::Ordering {
    (a.height(), a.width(), a.channels())
        .cmp(&(b.height(), b.width(), b.channels()))
        .then_with(|| {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
}

/// Weighted style images for multi-style transfer.
///
/// Entries are kept sorted by descending weight (ties by pixel content), so
/// the blend does not depend on the order styles were given in.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleBlendSpec {
    entries: Vec<(ImageTensor, f64)>,
}

impl StyleBlendSpec {
    pub fn new(entries: Vec<(ImageTensor, f64)>) -> Result<Self> {
        Self::with_tolerance(entries, 1e-9)
    }

    /// As [`StyleBlendSpec::new`] with a caller-chosen tolerance on the weight sum.
    pub fn with_tolerance(entries: Vec<(ImageTensor, f64)>, tol: f64) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("style blend needs at least one style".into()));
        }
        if let Some((_, w)) = entries.iter().find(|(_, w)| !(0.0..=1.0).contains(w)) {
            return Err(Error::InvalidArgument(format!("style weight {w} outside [0,1]")));
        }
        let sum: f64 = entries.iter().map(|(_, w)| w).sum();
        if (sum - 1.0).abs() > tol {
            return Err(Error::InvalidArgument(format!("style weights sum to {sum}, expected 1")));
        }
        let mut entries = entries;
        entries.sort_by(|(a, wa), (b, wb)| wb.total_cmp(wa).then_with(|| image_order(a, b)));
        Ok(StyleBlendSpec { entries })
    }

    pub fn single(style: ImageTensor) -> Self {
        StyleBlendSpec {
            entries: vec![(style, 1.0)],
        }
    }

    pub fn entries(&self) -> &[(ImageTensor, f64)] {
        &self.entries
    }
}

fn key(prefix: &str, name: &str) -> String {
    format!("{prefix}{name}")
}

/// Adds randomly initialised encoder tensors under `prefix`.
pub fn init_encoder<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut impl Rng,
    prefix: &str,
    cfg: &PerceptualConfig,
) {
    let mut cin = cfg.in_channels;
    for (i, &w) in cfg.widths.iter().enumerate() {
        nn::add_conv(store, rng, &key(prefix, &format!("s{i}")), 3, cin, w);
        cin = w;
    }
    let total: usize = cfg.widths.iter().sum();
    nn::add_conv(store, rng, &key(prefix, "msproj"), 1, total, cfg.final_width());
}

/// Stage outputs for an NHWC image batch in `[0,1]`.
pub fn pyramid_graph<S: Scalar>(
    g: &mut Graph<S>,
    p: &mut Binder<S>,
    prefix: &str,
    cfg: &PerceptualConfig,
    images: Var,
) -> Vec<Var> {
    let c = *g.shape(images).last().unwrap();
    let shift = g.constant(Tensor::full(&[c], S::lit(-0.5)));
    let mut x = g.add_tiled(images, shift);
    let mut stages = Vec::with_capacity(cfg.widths.len());
    for i in 0..cfg.widths.len() {
        let y = nn::conv(g, p, &key(prefix, &format!("s{i}")), x, 2);
        x = g.silu(y);
        stages.push(x);
    }
    stages
}

/// Resizes every stage to the last stage's grid, concatenates and projects with a 1x1 conv.
pub fn multiscale_graph<S: Scalar>(g: &mut Graph<S>, p: &mut Binder<S>, prefix: &str, stages: &[Var]) -> Var {
    let last = *stages.last().expect("multiscale projection of an empty pyramid");
    let (h, w) = (g.shape(last)[1], g.shape(last)[2]);
    let resized: Vec<Var> = stages.iter().map(|&s| g.resize(s, h, w)).collect();
    let cat = g.concat_last(&resized);
    nn::conv(g, p, &key(prefix, "msproj"), cat, 1)
}

/// Per-channel AdaIN of `content` onto the statistics of `style` (both NHWC, equal batch).
pub fn adain_graph<S: Scalar>(g: &mut Graph<S>, content: Var, style: Var) -> Var {
    let mu_c = g.spatial_mean(content);
    let sd_c = g.spatial_std(content, STAT_EPS);
    let mu_s = g.spatial_mean(style);
    let sd_s = g.spatial_std(style, STAT_EPS);
    let centred = g.channel_op(ChannelOp::Sub, content, mu_c);
    let normed = g.channel_op(ChannelOp::Div, centred, sd_c);
    let scaled = g.channel_op(ChannelOp::Mul, normed, sd_s);
    g.channel_op(ChannelOp::Add, scaled, mu_s)
}

/// `alpha * stylised + (1 - alpha) * content`.
pub fn blend_alpha_graph<S: Scalar>(g: &mut Graph<S>, content: Var, stylised: Var, alpha: f64) -> Var {
    let a = g.scale(stylised, S::lit(alpha));
    let c = g.scale(content, S::lit(1.0 - alpha));
    g.add(a, c)
}

/// Flattens an NHWC map row-major into `[B, H*W, d_model]` through the linear layer `name`.
pub fn condition_graph<S: Scalar>(g: &mut Graph<S>, p: &mut Binder<S>, name: &str, f: Var) -> Var {
    let s = g.shape(f).to_vec();
    let flat = g.reshape(f, &[s[0] * s[1] * s[2], s[3]]);
    let y = nn::linear(g, p, name, flat);
    let d = *g.shape(y).last().unwrap();
    g.reshape(y, &[s[0], s[1] * s[2], d])
}

/// Per-channel spatial mean and `sqrt(population variance + eps)`.
pub fn channel_stats<S: Scalar>(f: &FeatureMap<S>) -> (Vec<S>, Vec<S>) {
    let mut g = Graph::new();
    let x = g.constant(f.tensor.clone());
    let mu = g.spatial_mean(x);
    let sd = g.spatial_std(x, STAT_EPS);
    (g.value(mu).data().to_vec(), g.value(sd).data().to_vec())
}

fn single_output<S: Scalar>(g: &Graph<S>, v: Var) -> Result<FeatureMap<S>> {
    FeatureMap::from_batch(g.value(v), 0)
}

pub fn adain<S: Scalar>(content: &FeatureMap<S>, style: &FeatureMap<S>) -> Result<FeatureMap<S>> {
    if content.channels() != style.channels() {
        return Err(Error::ShapeMismatch(format!(
            "adain channel mismatch: content {} vs style {}",
            content.channels(),
            style.channels()
        )));
    }
    let mut g = Graph::new();
    let c = g.constant(content.tensor.clone());
    let s = g.constant(style.tensor.clone());
    let out = adain_graph(&mut g, c, s);
    single_output(&g, out)
}

pub fn blend_alpha<S: Scalar>(content: &FeatureMap<S>, stylised: &FeatureMap<S>, alpha: f64) -> Result<FeatureMap<S>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0,1]")));
    }
    if content.tensor.shape() != stylised.tensor.shape() {
        return Err(Error::ShapeMismatch(format!(
            "blend of {:?} and {:?}",
            content.tensor.shape(),
            stylised.tensor.shape()
        )));
    }
    // The endpoints are returned as copies so they are exact.
    if alpha == 0.0 {
        return Ok(content.clone());
    }
    if alpha == 1.0 {
        return Ok(stylised.clone());
    }
    let mut g = Graph::new();
    let c = g.constant(content.tensor.clone());
    let a = g.constant(stylised.tensor.clone());
    let out = blend_alpha_graph(&mut g, c, a, alpha);
    single_output(&g, out)
}

/// `sum_i w_i * adain(content, style_i)` over already-extracted style features.
pub fn blend_multi_features<S: Scalar>(content: &FeatureMap<S>, styles: &[(FeatureMap<S>, f64)]) -> Result<FeatureMap<S>> {
    if styles.is_empty() {
        return Err(Error::InvalidArgument("style blend needs at least one style".into()));
    }
    let sum: f64 = styles.iter().map(|(_, w)| w).sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("style weights sum to {sum}, expected 1")));
    }
    if let [(s, w)] = styles {
        if *w == 1.0 {
            return adain(content, s);
        }
    }
    let mut acc = vec![S::zero(); content.data().len()];
    for (s, w) in styles {
        let a = adain(content, s)?;
        let w = S::lit(*w);
        for (o, &v) in acc.iter_mut().zip(a.data()) {
            *o += w * v;
        }
    }
    FeatureMap::new(content.height(), content.width(), content.channels(), acc)
}

/// Row-major flattening of `f` projected by the linear layer `name` in `params`.
pub fn to_condition_sequence<S: Scalar>(
    f: &FeatureMap<S>,
    params: &ParamStore<S>,
    name: &str,
) -> Result<ConditionSequence<S>> {
    let w = params
        .get(&format!("{name}.w"))
        .ok_or_else(|| Error::InvalidState(format!("missing condition projection {name}.w")))?;
    if w.shape()[0] != f.channels() {
        return Err(Error::ShapeMismatch(format!(
            "condition projection expects {} channels, map has {}",
            w.shape()[0],
            f.channels()
        )));
    }
    let mut g = Graph::new();
    let mut p = Binder::frozen(params);
    let x = g.constant(f.tensor.clone());
    let y = condition_graph(&mut g, &mut p, name, x);
    let t = g.value(y);
    let (l, d) = (t.shape()[1], t.shape()[2]);
    ConditionSequence::new(Tensor::new(&[l, d], t.data().to_vec()))
}

/// A standalone encoder: stage convolutions plus the multiscale projection.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualEncoder<S> {
    pub config: PerceptualConfig,
    pub params: ParamStore<S>,
}

impl<S: Scalar> PerceptualEncoder<S> {
    pub fn random(config: PerceptualConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        init_encoder(&mut params, rng, "", &config);
        Ok(PerceptualEncoder { config, params })
    }

    /// Takes the encoder stored under `prefix` in a larger store.
    pub fn from_store(config: PerceptualConfig, store: &ParamStore<S>, prefix: &str) -> Result<Self> {
        config.validate()?;
        let params = store.extract(prefix);
        for (name, shape) in config.tensor_shapes() {
            match params.get(&name) {
                None => return Err(Error::InvalidState(format!("encoder tensor {prefix}{name} missing"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::ShapeMismatch(format!(
                        "encoder tensor {prefix}{name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(PerceptualEncoder { config, params })
    }

    fn check_image(&self, img: &ImageTensor) -> Result<()> {
        if img.channels() != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects {} channels, image has {}",
                self.config.in_channels,
                img.channels()
            )));
        }
        if img.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("image contains non-finite values".into()));
        }
        Ok(())
    }

    fn run(&self, img: &ImageTensor) -> Result<(Graph<S>, Vec<Var>)> {
        self.check_image(img)?;
        let mut g = Graph::new();
        let mut p = Binder::frozen(&self.params);
        let x = g.constant(img.to_tensor());
        let stages = pyramid_graph(&mut g, &mut p, "", &self.config, x);
        Ok((g, stages))
    }

    pub fn extract_pyramid(&self, img: &ImageTensor, source: FeatureSource) -> Result<FeaturePyramid<S>> {
        let (g, stages) = self.run(img)?;
        let stages = stages
            .iter()
            .map(|&s| single_output(&g, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeaturePyramid { stages, source })
    }

    pub fn extract_style_final(&self, img: &ImageTensor) -> Result<FeatureMap<S>> {
        let (g, stages) = self.run(img)?;
        single_output(&g, *stages.last().unwrap())
    }

    pub fn multiscale_project(&self, pyr: &FeaturePyramid<S>) -> Result<FeatureMap<S>> {
        if pyr.stages.is_empty() {
            return Err(Error::InvalidArgument("empty feature pyramid".into()));
        }
        let mut g = Graph::new();
        let mut p = Binder::frozen(&self.params);
        let stages: Vec<Var> = pyr.stages.iter().map(|s| g.constant(s.tensor.clone())).collect();
        let out = multiscale_graph(&mut g, &mut p, "", &stages);
        single_output(&g, out)
    }

    /// Content features: the multiscale projection of the content pyramid.
    pub fn content_features(&self, img: &ImageTensor) -> Result<FeatureMap<S>> {
        let pyr = self.extract_pyramid(img, FeatureSource::Content)?;
        self.multiscale_project(&pyr)
    }

    pub fn blend_multi(&self, content_f: &FeatureMap<S>, blend: &StyleBlendSpec) -> Result<FeatureMap<S>> {
        let styles = blend
            .entries()
            .iter()
            .map(|(img, w)| Ok((self.extract_style_final(img)?, *w)))
            .collect::<Result<Vec<_>>>()?;
        blend_multi_features(content_f, &styles)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder() -> PerceptualEncoder<f64> {
        PerceptualEncoder::random(PerceptualConfig::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    fn image(v: f32) -> ImageTensor {
        ImageTensor::filled(32, 32, 3, v).unwrap()
    }

    fn ramp(seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(32, 32, 3, (0..32 * 32 * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn pyramid_shapes_follow_widths() {
        let enc = encoder();
        let pyr = enc.extract_pyramid(&ramp(1), FeatureSource::Content).unwrap();
        let dims: Vec<_> = pyr.stages.iter().map(|s| (s.height(), s.channels())).collect();
        assert_eq!(dims, vec![(16, 16), (8, 32), (4, 64), (2, 64)]);
        let again = enc.extract_pyramid(&ramp(1), FeatureSource::Content).unwrap();
        assert_eq!(pyr, again);
    }

    #[test]
    fn style_final_is_non_constant() {
        let enc = encoder();
        let z = enc.extract_style_final(&image(0.0)).unwrap();
        let o = enc.extract_style_final(&image(1.0)).unwrap();
        assert_eq!((z.height(), z.width(), z.channels()), (2, 2, 64));
        assert_ne!(z, o);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let enc = encoder();
        let grey = ImageTensor::filled(32, 32, 1, 0.5).unwrap();
        assert!(matches!(enc.extract_style_final(&grey), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn multiscale_projection_shape_and_zero_pyramid() {
        let enc = encoder();
        let pyr = enc.extract_pyramid(&ramp(2), FeatureSource::Content).unwrap();
        let out = enc.multiscale_project(&pyr).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (2, 2, 64));
        let zeros = FeaturePyramid {
            stages: pyr
                .stages
                .iter()
                .map(|s| FeatureMap::new(s.height(), s.width(), s.channels(), vec![0.0; s.data().len()]).unwrap())
                .collect(),
            source: FeatureSource::Content,
        };
        let out = enc.multiscale_project(&zeros).unwrap();
        let bias = enc.params.expect("msproj.b").data();
        for cell in out.data().chunks(64) {
            assert_eq!(cell, bias);
        }
        let empty = FeaturePyramid::<f64> {
            stages: vec![],
            source: FeatureSource::Style,
        };
        assert!(enc.multiscale_project(&empty).is_err());
    }

    #[test]
    fn channel_stats_examples() {
        let f = FeatureMap::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (mu, sd) = channel_stats(&f);
        assert_eq!(mu, vec![2.5]);
        assert!((sd[0] - (1.25f64 + 1e-5).sqrt()).abs() < 1e-15);
        assert!((sd[0] - 1.118038).abs() < 1e-6);
        let c = FeatureMap::new(1, 3, 1, vec![0.7f64; 3]).unwrap();
        let (mu, sd) = channel_stats(&c);
        assert!((mu[0] - 0.7).abs() < 1e-15);
        assert!((sd[0] - 1e-5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn adain_examples() {
        let c = FeatureMap::new(1, 2, 1, vec![0.0f64, 2.0]).unwrap();
        let s = FeatureMap::new(1, 2, 1, vec![2.0, 8.0]).unwrap();
        let out = adain(&c, &s).unwrap();
        assert!((out.data()[0] - 2.0).abs() < 1e-4 && (out.data()[1] - 8.0).abs() < 1e-4);
        let same = adain(&c, &c).unwrap();
        assert!(same.data().iter().zip(c.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        let three = FeatureMap::new(1, 1, 3, vec![0.0; 3]).unwrap();
        assert!(adain(&c, &three).is_err());
    }

    #[test]
    fn blend_examples() {
        let c = FeatureMap::new(1, 1, 1, vec![2.0]).unwrap();
        let a = FeatureMap::new(1, 1, 1, vec![4.0]).unwrap();
        assert_eq!(blend_alpha(&c, &a, 0.0).unwrap(), c);
        assert_eq!(blend_alpha(&c, &a, 1.0).unwrap(), a);
        assert_eq!(blend_alpha(&c, &a, 0.5).unwrap().data(), &[3.0]);
        assert!(blend_alpha(&c, &a, 1.5).is_err());
        assert!(blend_alpha(&c, &a, -0.1).is_err());
    }

    #[test]
    fn blend_multi_identities() {
        let enc = encoder();
        let content = enc.content_features(&ramp(3)).unwrap();
        let (s1, s2) = (ramp(4), ramp(5));
        let single = enc.blend_multi(&content, &StyleBlendSpec::single(s1.clone())).unwrap();
        assert_eq!(single, adain(&content, &enc.extract_style_final(&s1).unwrap()).unwrap());
        let twice = enc
            .blend_multi(&content, &StyleBlendSpec::new(vec![(s1.clone(), 0.5), (s1.clone(), 0.5)]).unwrap())
            .unwrap();
        assert!(twice.data().iter().zip(single.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        let ab = enc
            .blend_multi(&content, &StyleBlendSpec::new(vec![(s1.clone(), 0.3), (s2.clone(), 0.7)]).unwrap())
            .unwrap();
        let ba = enc
            .blend_multi(&content, &StyleBlendSpec::new(vec![(s2, 0.7), (s1.clone(), 0.3)]).unwrap())
            .unwrap();
        assert!(ab.data().iter().zip(ba.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(StyleBlendSpec::new(vec![(s1.clone(), 0.6), (s1.clone(), 0.6)]).is_err());
        assert!(StyleBlendSpec::new(vec![]).is_err());
    }

    #[test]
    fn condition_sequence_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = ParamStore::<f64>::new();
        nn::add_linear(&mut params, &mut rng, "proj", 64, 64);
        let data: Vec<f64> = (0..2 * 2 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = FeatureMap::new(2, 2, 64, data.clone()).unwrap();
        let seq = to_condition_sequence(&f, &params, "proj").unwrap();
        assert_eq!((seq.len(), seq.dim()), (4, 64));
        let w = params.expect("proj.w").data();
        let want: f64 = (0..64).map(|i| data[64 + i] * w[i * 64]).sum();
        assert!((seq.token(1)[0] - want).abs() < 1e-12);
        let zero = FeatureMap::new(2, 2, 64, vec![0.0; 256]).unwrap();
        let seq = to_condition_sequence(&zero, &params, "proj").unwrap();
        for i in 0..4 {
            assert_eq!(seq.token(i), params.expect("proj.b").data());
        }
    }

    #[test]
    fn nan_inputs_rejected() {
        assert!(matches!(ImageTensor::new(1, 1, 1, vec![f32::NAN]), Err(Error::InvalidInput(_))));
        assert!(matches!(FeatureMap::new(1, 1, 1, vec![f64::NAN]), Err(Error::InvalidInput(_))));
    }
}
