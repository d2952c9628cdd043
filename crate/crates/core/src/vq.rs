//! Vector-quantised autoencoder: conv encoder to a latent grid, nearest-code
//! quantisation with a straight-through estimator, conv decoder back to pixels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image_io::ImageTensor;
use crate::nn::{self, Binder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub vocab: usize,
    pub d_code: usize,
    /// Channel widths of the two stride-2 encoder stages (mirrored in the decoder).
    pub hidden: [usize; 2],
    pub beta_commit: f64,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            image_size: 32,
            in_channels: 3,
            vocab: 64,
            d_code: 32,
            hidden: [32, 64],
            beta_commit: 0.25,
        }
    }
}

/// Spatial downsampling from pixels to latent cells.
pub const DOWNSAMPLE: usize = 4;

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(DOWNSAMPLE) {
            return Err(Error::InvalidArgument(format!(
                "image size {} must be a positive multiple of {DOWNSAMPLE}",
                self.image_size
            )));
        }
        if self.vocab == 0 || self.d_code == 0 || self.hidden.contains(&0) || self.in_channels == 0 {
            return Err(Error::InvalidArgument("VQ widths and vocabulary must be positive".into()));
        }
        if !(self.beta_commit >= 0.0) {
            return Err(Error::InvalidArgument(format!("beta_commit {} < 0", self.beta_commit)));
        }
        Ok(())
    }

    pub fn latent_side(&self) -> usize {
        self.image_size / DOWNSAMPLE
    }

    pub fn tokens_per_image(&self) -> usize {
        self.latent_side() * self.latent_side()
    }

    /// Expected `(name, shape)` of every tensor, names relative to the VQ prefix.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let [h0, h1] = self.hidden;
        let (c, d) = (self.in_channels, self.d_code);
        let convs = [
            ("enc.c0", 3, c, h0),
            ("enc.c1", 3, h0, h1),
            ("enc.out", 1, h1, d),
            ("dec.in", 3, d, h1),
            ("dec.c1", 3, h1, h0),
            ("dec.c2", 3, h0, h0),
            ("dec.out", 3, h0, c),
        ];
        let mut out = Vec::new();
        for (name, k, cin, cout) in convs {
            out.push((format!("{name}.w"), vec![k, k, cin, cout]));
            out.push((format!("{name}.b"), vec![cout]));
        }
        out.push(("codebook".into(), vec![self.vocab, d]));
        out
    }
}

/// Adds freshly initialised VQ tensors under `prefix`.
pub fn init_vq<S: Scalar>(store: &mut ParamStore<S>, rng: &mut impl Rng, prefix: &str, cfg: &VqConfig) {
    for (name, shape) in cfg.tensor_shapes() {
        let full = format!("{prefix}{name}");
        let t = if name == "codebook" {
            nn::init_uniform(rng, &shape, 1.0 / cfg.vocab as f64)
        } else if name.ends_with(".w") {
            let fan_in = shape[0] * shape[1] * shape[2];
            nn::init_fan_in(rng, &shape, fan_in)
        } else {
            Tensor::zeros(&shape)
        };
        store.insert(full, t);
    }
}

pub fn encoder_graph<S: Scalar>(g: &mut Graph<S>, p: &mut Binder<S>, prefix: &str, images: Var) -> Var {
    let c = *g.shape(images).last().unwrap();
    let shift = g.constant(Tensor::full(&[c], S::lit(-0.5)));
    let x = g.add_tiled(images, shift);
    let x = nn::conv(g, p, &format!("{prefix}enc.c0"), x, 2);
    let x = g.silu(x);
    let x = nn::conv(g, p, &format!("{prefix}enc.c1"), x, 2);
    let x = g.silu(x);
    nn::conv(g, p, &format!("{prefix}enc.out"), x, 1)
}

pub fn decoder_graph<S: Scalar>(g: &mut Graph<S>, p: &mut Binder<S>, prefix: &str, latent: Var) -> Var {
    let x = nn::conv(g, p, &format!("{prefix}dec.in"), latent, 1);
    let x = g.silu(x);
    let x = g.upsample2x(x);
    let x = nn::conv(g, p, &format!("{prefix}dec.c1"), x, 1);
    let x = g.silu(x);
    let x = g.upsample2x(x);
    let x = nn::conv(g, p, &format!("{prefix}dec.c2"), x, 1);
    let x = g.silu(x);
    let x = nn::conv(g, p, &format!("{prefix}dec.out"), x, 1);
    g.sigmoid(x)
}

/// Index of the nearest codebook row by squared Euclidean distance, lowest index on ties.
pub fn nearest_code<S: Scalar>(cell: &[S], codebook: &Tensor<S>) -> usize {
    let d = codebook.shape()[1];
    let mut best = (0, S::infinity());
    for (k, row) in codebook.data().chunks(d).enumerate() {
        let dist: S = row.iter().zip(cell).map(|(&e, &z)| (z - e) * (z - e)).sum();
        if dist < best.1 {
            best = (k, dist);
        }
    }
    best.0
}

/// Token indices and looked-up rows for every cell of an NHWC latent batch.
pub fn quantize_tensor<S: Scalar>(latent: &Tensor<S>, codebook: &Tensor<S>) -> Result<(Vec<usize>, Tensor<S>)> {
    if codebook.rank() != 2 || codebook.shape()[0] == 0 {
        return Err(Error::InvalidArgument("empty codebook".into()));
    }
    let d = codebook.shape()[1];
    if latent.last_dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "latent width {} vs code width {d}",
            latent.last_dim()
        )));
    }
    let tokens: Vec<usize> = latent.data().chunks(d).map(|c| nearest_code(c, codebook)).collect();
    let rows = lookup(&tokens, codebook)?;
    Ok((tokens, Tensor::new(latent.shape(), rows)))
}

fn lookup<S: Scalar>(tokens: &[usize], codebook: &Tensor<S>) -> Result<Vec<S>> {
    let (k, d) = (codebook.shape()[0], codebook.shape()[1]);
    let mut out = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        if t >= k {
            return Err(Error::InvalidInput(format!("token {t} outside codebook of size {k}")));
        }
        out.extend_from_slice(&codebook.data()[t * d..(t + 1) * d]);
    }
    Ok(out)
}

/// True when every pair of rows differs by more than `tol` in some coordinate.
pub fn rows_distinct<S: Scalar>(codebook: &Tensor<S>, tol: f64) -> bool {
    let d = codebook.shape()[1];
    let rows: Vec<&[S]> = codebook.data().chunks(d).collect();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            if rows[i].iter().zip(rows[j]).all(|(a, b)| (*a - *b).abs().as_f64() <= tol) {
                return false;
            }
        }
    }
    true
}

/// Latent-grid token indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub tokens: Vec<usize>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, tokens: Vec<usize>) -> Result<Self> {
        if tokens.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} token grid with {} tokens",
                tokens.len()
            )));
        }
        Ok(TokenGrid { height, width, tokens })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqLossTerms {
    pub total: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
}

/// Graph nodes of the autoencoder loss.
pub struct VqLossGraph {
    pub total: Var,
    pub latent: Var,
    pub reconstruction: Var,
    pub tokens: Vec<usize>,
    pub terms: VqLossTerms,
}

/// Reconstruction MSE plus codebook and commitment terms; the decoder sees the
/// quantised grid through a straight-through estimator.
pub fn vqae_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    p: &mut Binder<S>,
    prefix: &str,
    cfg: &VqConfig,
    images: Var,
) -> Result<VqLossGraph> {
    let z_e = encoder_graph(g, p, prefix, images);
    let codebook = p.var(g, &format!("{prefix}codebook"));
    let (tokens, zq) = quantize_tensor(g.value(z_e), g.value(codebook))?;
    let shape = g.shape(z_e).to_vec();
    let rows = g.embedding(codebook, &tokens);
    let e = g.reshape(rows, &shape);
    let d = S::lit(cfg.d_code as f64);

    let z_stop = g.detach(z_e);
    let cb_mse = g.mse_loss(z_stop, e);
    let cb_term = g.scale(cb_mse, d);
    let e_stop = g.detach(e);
    let commit_mse = g.mse_loss(z_e, e_stop);
    let commit_term = g.scale(commit_mse, d * S::lit(cfg.beta_commit));

    let z_st = g.straight_through(z_e, zq);
    let recon_img = decoder_graph(g, p, prefix, z_st);
    let recon = g.mse_loss(recon_img, images);
    let t = g.add(recon, cb_term);
    let total = g.add(t, commit_term);
    let terms = VqLossTerms {
        total: g.value(total).item().as_f64(),
        recon: g.value(recon).item().as_f64(),
        codebook: g.value(cb_term).item().as_f64(),
        commit: g.value(commit_term).item().as_f64(),
    };
    Ok(VqLossGraph {
        total,
        latent: z_e,
        reconstruction: recon_img,
        tokens,
        terms,
    })
}

/// A standalone autoencoder with names relative to its own store.
#[derive(Debug, Clone, PartialEq)]
pub struct VqModel<S> {
    pub config: VqConfig,
    pub params: ParamStore<S>,
}

impl<S: Scalar> VqModel<S> {
    pub fn random(config: VqConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        init_vq(&mut params, rng, "", &config);
        Ok(VqModel { config, params })
    }

    /// Takes the model stored under `prefix` in a larger store.
    pub fn from_store(config: VqConfig, store: &ParamStore<S>, prefix: &str) -> Result<Self> {
        config.validate()?;
        let params = store.extract(prefix);
        for (name, shape) in config.tensor_shapes() {
            match params.get(&name) {
                None => return Err(Error::InvalidState(format!("VQ tensor {prefix}{name} missing"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::ShapeMismatch(format!(
                        "VQ tensor {prefix}{name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(VqModel { config, params })
    }

    pub fn codebook(&self) -> &Tensor<S> {
        self.params.expect("codebook")
    }

    fn check_image(&self, img: &ImageTensor) -> Result<()> {
        let c = &self.config;
        if img.height() != c.image_size || img.width() != c.image_size || img.channels() != c.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "VQ expects {0}x{0}x{1} images, got {2}x{3}x{4}",
                c.image_size,
                c.in_channels,
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        Ok(())
    }

    /// `[1, h_lat, w_lat, d_code]`.
    pub fn encode_latent(&self, img: &ImageTensor) -> Result<Tensor<S>> {
        self.check_image(img)?;
        let mut g = Graph::new();
        let mut p = Binder::frozen(&self.params);
        let x = g.constant(img.to_tensor());
        let z = encoder_graph(&mut g, &mut p, "", x);
        let out = g.value(z).clone();
        if !out.all_finite() {
            return Err(Error::InvalidInput("encoder produced non-finite latents".into()));
        }
        Ok(out)
    }

    pub fn quantize(&self, latent: &Tensor<S>) -> Result<(TokenGrid, Tensor<S>)> {
        if latent.rank() != 4 || latent.shape()[0] != 1 {
            return Err(Error::ShapeMismatch(format!("expected one latent grid, got {:?}", latent.shape())));
        }
        let (tokens, q) = quantize_tensor(latent, self.codebook())?;
        Ok((TokenGrid::new(latent.shape()[1], latent.shape()[2], tokens)?, q))
    }

    pub fn dequantize(&self, tokens: &TokenGrid) -> Result<Tensor<S>> {
        let rows = lookup(&tokens.tokens, self.codebook())?;
        Ok(Tensor::new(&[1, tokens.height, tokens.width, self.config.d_code], rows))
    }

    pub fn encode_tokens(&self, img: &ImageTensor) -> Result<TokenGrid> {
        let z = self.encode_latent(img)?;
        Ok(self.quantize(&z)?.0)
    }

    pub fn decode_latent(&self, latent: &Tensor<S>) -> Result<ImageTensor> {
        let mut g = Graph::new();
        let mut p = Binder::frozen(&self.params);
        let z = g.constant(latent.clone());
        let y = decoder_graph(&mut g, &mut p, "", z);
        ImageTensor::from_tensor(g.value(y), 0)
    }

    pub fn decode_tokens(&self, tokens: &TokenGrid) -> Result<ImageTensor> {
        let q = self.dequantize(tokens)?;
        self.decode_latent(&q)
    }

    /// Encode, quantise and decode.
    pub fn roundtrip(&self, img: &ImageTensor) -> Result<ImageTensor> {
        let t = self.encode_tokens(img)?;
        self.decode_tokens(&t)
    }

    pub fn vqae_loss(&self, img: &ImageTensor) -> Result<VqLossTerms> {
        self.check_image(img)?;
        let mut g = Graph::new();
        let mut p = Binder::frozen(&self.params);
        let x = g.constant(img.to_tensor());
        Ok(vqae_loss_graph(&mut g, &mut p, "", &self.config, x)?.terms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> VqModel<f64> {
        VqModel::random(VqConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn noise(seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(32, 32, 3, (0..3072).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn encode_shape_and_determinism() {
        let m = model();
        let z = m.encode_latent(&noise(2)).unwrap();
        assert_eq!(z.shape(), &[1, 8, 8, 32]);
        assert_eq!(z, m.encode_latent(&noise(2)).unwrap());
        let wrong = ImageTensor::filled(16, 16, 3, 0.0).unwrap();
        assert!(matches!(m.encode_latent(&wrong), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn quantize_examples() {
        let cb = Tensor::from_f64(&[2, 2], &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(nearest_code(&[0.2, 0.1], &cb), 0);
        assert_eq!(nearest_code(&[0.5, 0.5], &cb), 0);
        assert_eq!(nearest_code(&[0.9, 0.8], &cb), 1);
        let m = model();
        let row3 = m.codebook().data()[3 * 32..4 * 32].to_vec();
        assert_eq!(nearest_code(&row3, m.codebook()), 3);
        let empty = Tensor::<f64>::zeros(&[0, 2]);
        assert!(quantize_tensor(&Tensor::zeros(&[1, 1, 1, 2]), &empty).is_err());
    }

    #[test]
    fn dequantize_roundtrip_and_range() {
        let m = model();
        assert!(rows_distinct(m.codebook(), 1e-9));
        let tokens: Vec<usize> = (0..64).map(|i| (i * 37) % 64).collect();
        let grid = TokenGrid::new(8, 8, tokens).unwrap();
        let q = m.dequantize(&grid).unwrap();
        assert_eq!(m.quantize(&q).unwrap().0, grid);
        let zeros = m.dequantize(&TokenGrid::new(8, 8, vec![0; 64]).unwrap()).unwrap();
        for cell in zeros.data().chunks(32) {
            assert_eq!(cell, &m.codebook().data()[..32]);
        }
        let bad = TokenGrid::new(8, 8, vec![64; 64]).unwrap();
        assert!(matches!(m.dequantize(&bad), Err(Error::InvalidInput(_))));
        assert!(m.decode_tokens(&bad).is_err());
    }

    #[test]
    fn decode_shape_and_range() {
        let m = model();
        let img = m.decode_tokens(&TokenGrid::new(8, 8, (0..64).collect()).unwrap()).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (32, 32, 3));
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    fn one_cell_terms(z_e: [f64; 2], e: [f64; 2]) -> VqLossTerms {
        // A 4x4 single-channel image maps to one latent cell.
        let cfg = VqConfig {
            image_size: 4,
            in_channels: 1,
            vocab: 1,
            d_code: 2,
            hidden: [1, 1],
            beta_commit: 0.25,
        };
        let mut params = ParamStore::<f64>::new();
        for (name, shape) in cfg.tensor_shapes() {
            params.insert(name, Tensor::zeros(&shape));
        }
        params.insert("enc.out.b", Tensor::from_f64(&[2], &z_e));
        params.insert("codebook", Tensor::from_f64(&[1, 2], &e));
        let m = VqModel::from_store(cfg, &params, "").unwrap();
        m.vqae_loss(&ImageTensor::filled(4, 4, 1, 0.5).unwrap()).unwrap()
    }

    #[test]
    fn loss_term_examples() {
        let t = one_cell_terms([0.0, 0.0], [1.0, 1.0]);
        assert!((t.codebook - 2.0).abs() < 1e-12);
        assert!((t.commit - 0.5).abs() < 1e-12);
        let t = one_cell_terms([0.3, -0.2], [0.3, -0.2]);
        assert_eq!((t.codebook, t.commit), (0.0, 0.0));
        assert!(t.total >= 0.0 && t.recon >= 0.0);
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let m = model();
        let mut g = Graph::new();
        let trainable = |_: &str| true;
        let mut p = Binder::new(&m.params, &trainable);
        let x = g.constant(noise(5).to_tensor());
        let z = encoder_graph(&mut g, &mut p, "", x);
        let (_, zq) = quantize_tensor(g.value(z), m.codebook()).unwrap();
        let st = g.straight_through(z, zq.clone());
        assert_eq!(g.value(st), &zq);
        let y = decoder_graph(&mut g, &mut p, "", st);
        let loss = g.mean(y);
        let grads = g.backward(loss);
        assert_eq!(grads.get(z).unwrap(), grads.get(st).unwrap());
    }

    #[test]
    fn from_store_validates_shapes() {
        let m = model();
        let mut params = m.params.clone();
        params.insert("codebook", Tensor::zeros(&[3, 3]));
        assert!(matches!(
            VqModel::from_store(VqConfig::default(), &params, ""),
            Err(Error::ShapeMismatch(_))
        ));
        let empty = ParamStore::new();
        assert!(VqModel::<f64>::from_store(VqConfig::default(), &empty, "").is_err());
    }
}
