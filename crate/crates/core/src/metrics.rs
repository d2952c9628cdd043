//! Image-quality and style metrics: SSIM, Gram-matrix distance and an encoder
//! feature distance.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image_io::ImageTensor;
use crate::perceptual::{FeatureMap, PerceptualEncoder};
use crate::scalar::Scalar;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all fully contained windows, averaged over channels.
///
/// Images smaller than the window use a window as large as the shorter side.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let dims = |i: &ImageTensor| (i.height(), i.width(), i.channels());
    if dims(a) != dims(b) {
        return Err(Error::ShapeMismatch(format!("ssim of {:?} and {:?}", dims(a), dims(b))));
    }
    let (h, w, c) = dims(a);
    let k = SSIM_WINDOW.min(h).min(w);
    let g = gaussian_window(k, SSIM_SIGMA);
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let mut acc = 0.0;
        for y in 0..oh {
            for x in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..k {
                    for dx in 0..k {
                        let wt = g[dy] * g[dx];
                        let va = a.get(y + dy, x + dx, ch) as f64;
                        let vb = b.get(y + dy, x + dx, ch) as f64;
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * (va * va);
                        sbb += wt * (vb * vb);
                        sab += wt * (va * vb);
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                acc += ((2.0 * (ma * mb) + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}

/// `F Fᵀ / (C H W)` for the `C × HW` flattening of `f`, row-major `C × C`.
pub fn gram<S: Scalar>(f: &FeatureMap<S>) -> Vec<f64> {
    let c = f.channels();
    let n = f.height() * f.width();
    let d = f.data();
    let mut g = vec![0.0; c * c];
    for p in 0..n {
        let px = &d[p * c..(p + 1) * c];
        for i in 0..c {
            let vi = px[i].as_f64();
            for j in i..c {
                g[i * c + j] += vi * px[j].as_f64();
            }
        }
    }
    let norm = (c * n) as f64;
    for i in 0..c {
        for j in i..c {
            let v = g[i * c + j] / norm;
            g[i * c + j] = v;
            g[j * c + i] = v;
        }
    }
    g
}

fn frobenius(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Frobenius distance between the Gram matrices of two maps with equal channel counts.
pub fn gram_distance_maps<S: Scalar>(a: &FeatureMap<S>, b: &FeatureMap<S>) -> Result<f64> {
    if a.channels() != b.channels() {
        return Err(Error::ShapeMismatch(format!("{} vs {} channels", a.channels(), b.channels())));
    }
    Ok(frobenius(&gram(a), &gram(b)))
}

/// Mean squared difference of two equally shaped maps.
pub fn feat_distance_maps<S: Scalar>(a: &FeatureMap<S>, b: &FeatureMap<S>) -> Result<f64> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>() / n)
}

/// Gram distance of final-stage encoder features.
pub fn gram_distance<S: Scalar>(out: &ImageTensor, style: &ImageTensor, enc: &PerceptualEncoder<S>) -> Result<f64> {
    gram_distance_maps(&enc.extract_style_final(out)?, &enc.extract_style_final(style)?)
}

/// Mean squared difference of final-stage encoder features.
pub fn feat_distance<S: Scalar>(a: &ImageTensor, b: &ImageTensor, enc: &PerceptualEncoder<S>) -> Result<f64> {
    feat_distance_maps(&enc.extract_style_final(a)?, &enc.extract_style_final(b)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairMetrics {
    pub ssim: f64,
    pub gram_dist: f64,
    pub feat_dist: f64,
}

/// Per-pair metrics plus their arithmetic mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub pairs: Vec<PairMetrics>,
    pub mean: PairMetrics,
}

/// SSIM against the content image; Gram distance against the style image;
/// feature distance against the content image.
pub fn evaluate_pair<S: Scalar>(
    content: &ImageTensor,
    style: &ImageTensor,
    output: &ImageTensor,
    enc: &PerceptualEncoder<S>,
) -> Result<PairMetrics> {
    let m = PairMetrics {
        ssim: ssim(output, content)?,
        gram_dist: gram_distance(output, style, enc)?,
        feat_dist: feat_distance(output, content, enc)?,
    };
    if !(m.ssim.is_finite() && m.gram_dist.is_finite() && m.feat_dist.is_finite()) {
        return Err(Error::InvalidState(format!("non-finite metrics {m:?}")));
    }
    Ok(m)
}

impl MetricReport {
    pub fn from_pairs(pairs: Vec<PairMetrics>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("no pairs to aggregate".into()));
        }
        let n = pairs.len() as f64;
        let mean = PairMetrics {
            ssim: pairs.iter().map(|p| p.ssim).sum::<f64>() / n,
            gram_dist: pairs.iter().map(|p| p.gram_dist).sum::<f64>() / n,
            feat_dist: pairs.iter().map(|p| p.feat_dist).sum::<f64>() / n,
        };
        Ok(MetricReport { pairs, mean })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::{synth_images, SynthKind, SynthSpec};

    #[test]
    fn ssim_fixtures() {
        let imgs = synth_images(&SynthSpec::new(SynthKind::Blobs, 3, 24, 2)).unwrap();
        assert_eq!(ssim(&imgs[0], &imgs[0]).unwrap(), 1.0);
        assert_eq!(ssim(&imgs[0], &imgs[1]).unwrap(), ssim(&imgs[1], &imgs[0]).unwrap());
        let z = ImageTensor::filled(16, 16, 3, 0.0).unwrap();
        let o = ImageTensor::filled(16, 16, 3, 1.0).unwrap();
        let want = 1e-4 / (1.0 + 1e-4);
        assert!((ssim(&z, &o).unwrap() - want).abs() <= 1e-9);
        let small = ImageTensor::filled(8, 8, 3, 0.0).unwrap();
        assert!(ssim(&z, &small).is_err());
    }

    #[test]
    fn gram_fixtures() {
        let f = FeatureMap::new(1, 1, 2, vec![1.0f64, 2.0]).unwrap();
        assert_eq!(gram(&f), vec![0.5, 1.0, 1.0, 2.0]);
        let z = FeatureMap::new(2, 2, 3, vec![0.0f64; 12]).unwrap();
        assert!(gram(&z).iter().all(|&v| v == 0.0));
        let a = FeatureMap::new(1, 1, 1, vec![1.0f64]).unwrap();
        let b = FeatureMap::new(1, 1, 1, vec![2.0f64]).unwrap();
        // grams [[1]] and [[4]] normalised by C·H·W = 1.
        assert_eq!(gram_distance_maps(&a, &b).unwrap(), 3.0);
        let a = FeatureMap::new(1, 1, 2, vec![1.0f64, 0.0]).unwrap();
        let b = FeatureMap::new(1, 1, 2, vec![2.0f64, 0.0]).unwrap();
        // grams [[0.5, 0], [0, 0]] and [[2, 0], [0, 0]].
        assert_eq!(gram_distance_maps(&a, &b).unwrap(), 1.5);
    }

    #[test]
    fn feature_distance_fixture() {
        let a = FeatureMap::new(1, 1, 2, vec![1.0f64, 3.0]).unwrap();
        let b = FeatureMap::new(1, 1, 2, vec![2.0f64, 5.0]).unwrap();
        assert_eq!(feat_distance_maps(&a, &b).unwrap(), 2.5);
        assert_eq!(feat_distance_maps(&b, &a).unwrap(), 2.5);
        assert_eq!(feat_distance_maps(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn report_is_mean_of_pairs() {
        let p = |s| PairMetrics {
            ssim: s,
            gram_dist: 2.0 * s,
            feat_dist: 1.0,
        };
        let r = MetricReport::from_pairs(vec![p(0.2), p(0.6)]).unwrap();
        assert!((r.mean.ssim - 0.4).abs() < 1e-15);
        assert!((r.mean.gram_dist - 0.8).abs() < 1e-15);
        assert!(MetricReport::from_pairs(vec![]).is_err());
    }
}
