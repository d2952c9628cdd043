use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use vqstyle::autograd::Graph;
use vqstyle::diffusion::{build_schedule, ScheduleParams};
use vqstyle::image_io::{resize_bilinear, ImageTensor};
use vqstyle::metrics::{gram, ssim};
use vqstyle::perceptual::{adain, blend_alpha, channel_stats, FeatureMap, StyleBlendSpec, STAT_EPS};
use vqstyle::persistence::{Checkpoint, Component};
use vqstyle::pipeline::{tiny_config, StyleModel};
use vqstyle::tensor::Tensor;
use vqstyle::training::TrainConfig;
use vqstyle::vq::quantize_tensor;

fn map(h: usize, w: usize, c: usize, data: Vec<f64>) -> FeatureMap<f64> {
    FeatureMap::new(h, w, c, data).unwrap()
}

fn feature_map(max_side: usize, max_c: usize) -> impl Strategy<Value = FeatureMap<f64>> {
    (3..=max_side, 3..=max_side, 1..=max_c).prop_flat_map(|(h, w, c)| {
        prop::collection::vec(-3.0f64..3.0, h * w * c).prop_map(move |d| map(h, w, c, d))
    })
}

fn image(side: usize) -> impl Strategy<Value = ImageTensor> {
    prop::collection::vec(0.0f32..=1.0, side * side * 3).prop_map(move |d| ImageTensor::new(side, side, 3, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adain_takes_style_statistics(x in feature_map(8, 4), seed in 0u64..1000) {
        let c = x.channels();
        let y = map(5, 4, c, (0..20 * c).map(|i| ((i as u64 * 7919 + seed) % 97) as f64 / 20.0 - 2.0).collect());
        let out = adain(&x, &y).unwrap();
        let (mo, so) = channel_stats(&out);
        let (ms, ss) = channel_stats(&y);
        let (_, sx) = channel_stats(&x);
        for i in 0..c {
            assert_abs_diff_eq!(mo[i], ms[i], epsilon = 1e-9);
            // The stabiliser in the content std shrinks the output spread slightly.
            let raw = sx[i] * sx[i] - STAT_EPS;
            assert_abs_diff_eq!(so[i], (ss[i] * ss[i] * raw / (sx[i] * sx[i]) + STAT_EPS).sqrt(), epsilon = 1e-9);
        }
    }

    #[test]
    fn blend_is_affine(x in feature_map(6, 3), alpha in 0.0f64..=1.0) {
        let a = FeatureMap::new(x.height(), x.width(), x.channels(), x.data().iter().map(|v| 2.0 * v + 1.0).collect()).unwrap();
        let b = blend_alpha(&x, &a, alpha).unwrap();
        for ((o, c), s) in b.data().iter().zip(x.data()).zip(a.data()) {
            assert_abs_diff_eq!(*o, (1.0 - alpha) * c + alpha * s, epsilon = 1e-12);
        }
    }

    #[test]
    fn resize_keeps_constants(v in -2.0f64..2.0, h in 1usize..9, w in 1usize..9, oh in 1usize..12, ow in 1usize..12) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, h, w, 2], v));
        let r = g.resize(x, oh, ow);
        prop_assert_eq!(g.shape(r), &[1, oh, ow, 2][..]);
        for &o in g.value(r).data() {
            assert_abs_diff_eq!(o, v, epsilon = 1e-12);
        }
    }

    #[test]
    fn image_resize_identity_and_range(img in image(6), out in 1usize..10) {
        prop_assert_eq!(resize_bilinear(&img, 6, 6).unwrap(), img.clone());
        let r = resize_bilinear(&img, out, out).unwrap();
        prop_assert!(r.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn quantisation_is_idempotent(cells in prop::collection::vec(-2.0f64..2.0, 30), cb in prop::collection::vec(-2.0f64..2.0, 15)) {
        let codebook = Tensor::new(&[5, 3], cb);
        let latent = Tensor::new(&[1, 2, 5, 3], cells);
        let (tokens, zq) = quantize_tensor(&latent, &codebook).unwrap();
        let (again, zq2) = quantize_tensor(&zq, &codebook).unwrap();
        // Re-quantising lands on identical rows; duplicates resolve to the lowest index.
        prop_assert_eq!(&zq, &zq2);
        for (a, b) in tokens.iter().zip(&again) {
            prop_assert!(b <= a);
        }
    }

    #[test]
    fn gram_is_symmetric_with_nonnegative_diagonal(f in feature_map(5, 6)) {
        let c = f.channels();
        let g = gram(&f);
        for i in 0..c {
            prop_assert!(g[i * c + i] >= 0.0);
            for j in 0..c {
                prop_assert_eq!(g[i * c + j], g[j * c + i]);
                // Cauchy-Schwarz on the Gram entries.
                prop_assert!(g[i * c + j].powi(2) <= g[i * c + i] * g[j * c + j] * (1.0 + 1e-12) + 1e-300);
            }
        }
    }

    #[test]
    fn schedule_rows_are_distributions(steps in 1usize..40, vocab in 1usize..20, u in 0.0f64..0.99) {
        let t = build_schedule(ScheduleParams { steps, vocab, u_replace: u }).unwrap();
        for s in 0..=steps {
            let m = t.cumulative_matrix(s).unwrap();
            for row in m.data.chunks(vocab + 1) {
                assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
            }
            if s >= 1 {
                let q = t.one_step_matrix(s).unwrap();
                for row in q.data.chunks(vocab + 1) {
                    assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn posteriors_normalise(steps in 2usize..12, vocab in 2usize..8, u in 0.0f64..0.9, pick in 0usize..1000) {
        let tab = build_schedule(ScheduleParams { steps, vocab, u_replace: u }).unwrap();
        let t = 1 + pick % steps;
        let x0 = pick % vocab;
        for xt in 0..=vocab {
            if let Ok(p) = tab.posterior(xt, x0, t) {
                assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
                prop_assert!(p.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(a in image(12), b in image(12)) {
        let ab = ssim(&a, &b).unwrap();
        prop_assert_eq!(ab, ssim(&b, &a).unwrap());
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&ab));
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn blend_spec_ignores_argument_order(a in image(4), b in image(4), c in image(4), w in 0.0f64..0.5) {
        let e = vec![(a.clone(), w), (b.clone(), 1.0 - 2.0 * w), (c.clone(), w)];
        let r = vec![(c, w), (a, w), (b, 1.0 - 2.0 * w)];
        prop_assert_eq!(StyleBlendSpec::new(e).unwrap(), StyleBlendSpec::new(r).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn checkpoint_roundtrip_is_lossless(seed in any::<u64>(), steps in 1usize..500) {
        let model = StyleModel::<f32>::new(tiny_config(), seed).unwrap();
        let train = TrainConfig { steps, seed, ..TrainConfig::default() };
        let ck = Checkpoint::from_model(&model, Component::Full, train, None);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        let (m2, _) = back.into_model().unwrap();
        prop_assert_eq!(m2.params, model.params);
    }
}
