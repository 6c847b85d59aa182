//! Property tests for the statistics and transform invariants.

use proptest::prelude::*;

use ossa_core::stats::{channel_mean, channel_std, channel_stats, instance_normalize};
use ossa_core::style::{adain, ossa, NoiseSpec};
use ossa_core::{ChannelStats, FeatureMap, SeededRng};

const EPS: f64 = 1e-5;

/// Random feature map with spatial variance bounded away from zero, so the
/// eps inside sigma stays negligible against the tolerances below.
fn arb_map() -> impl Strategy<Value = FeatureMap> {
    (1usize..=3, 1usize..=4, 2usize..=5, 2usize..=5, any::<u64>()).prop_map(
        |(b, c, h, w, seed)| {
            let mut rng = SeededRng::from_seed(seed);
            let mut fm = FeatureMap::from_fn([b, c, h, w], |_, _, _, _| rng.normal(0.0, 1.0));
            // re-scale each channel to unit sample std and a random mean
            let stats = channel_stats(&fm, 0.0_f64.max(1e-12)).unwrap();
            for bi in 0..b {
                for ci in 0..c {
                    let m = stats.mu(bi, ci);
                    let s = stats.sigma(bi, ci).max(1e-6);
                    let new_mean = rng.uniform_in(-1.0, 1.0);
                    let new_std = rng.uniform_in(0.7, 1.5);
                    for v in fm.channel_mut(bi, ci) {
                        *v = (*v - m) / s * new_std + new_mean;
                    }
                }
            }
            fm
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Shape preservation: declared output shapes for arbitrary valid dims.
    #[test]
    fn shapes_are_preserved(fm in arb_map()) {
        let [b, c, _, _] = fm.dims();
        prop_assert_eq!(channel_mean(&fm).unwrap().len(), b * c);
        prop_assert_eq!(channel_std(&fm, EPS).unwrap().len(), b * c);
        prop_assert_eq!(instance_normalize(&fm, EPS).unwrap().dims(), fm.dims());
    }

    /// sigma(x) * instance_normalize(x) + mu(x) == x (eps-limited).
    #[test]
    fn recomposition_is_exact(fm in arb_map()) {
        let stats = channel_stats(&fm, EPS).unwrap();
        let y = instance_normalize(&fm, EPS).unwrap();
        let [b, c, h, w] = fm.dims();
        for bi in 0..b {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        let rec = stats.sigma(bi, ci) * y.get(bi, ci, hi, wi) + stats.mu(bi, ci);
                        let orig = fm.get(bi, ci, hi, wi);
                        prop_assert!(
                            (rec - orig).abs() <= 1e-4 * orig.abs().max(1.0),
                            "rec {} vs {}", rec, orig
                        );
                    }
                }
            }
        }
    }

    /// channel_mean(a*x + b) = a*mean + b; channel_std(a*x + b) = |a|*std.
    #[test]
    fn translation_scale_covariance(fm in arb_map(), a in -2.0f64..2.0, b in -5.0f64..5.0) {
        // |a| large enough that a^2 * var stays well above eps
        prop_assume!(a.abs() > 0.2);
        let mut scaled = fm.clone();
        for v in scaled.data_mut() {
            *v = a * *v + b;
        }
        let mean = channel_mean(&fm).unwrap();
        let mean_s = channel_mean(&scaled).unwrap();
        for (m, ms) in mean.iter().zip(&mean_s) {
            prop_assert!((a * m + b - ms).abs() < 1e-4, "mean covariance: {} vs {}", a * m + b, ms);
        }
        let std = channel_std(&fm, EPS).unwrap();
        let std_s = channel_std(&scaled, EPS).unwrap();
        for (s, ss) in std.iter().zip(&std_s) {
            prop_assert!(
                (a.abs() * s - ss).abs() < 1e-4 * ss.max(1.0),
                "std covariance: {} vs {}", a.abs() * s, ss
            );
        }
    }

    /// adain forces the target statistics onto every channel.
    #[test]
    fn adain_postcondition(fm in arb_map(), seed in any::<u64>()) {
        let mut rng = SeededRng::from_seed(seed);
        let c = fm.channels();
        let mu: Vec<f64> = (0..c).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let sigma: Vec<f64> = (0..c).map(|_| rng.uniform_in(0.5, 2.0)).collect();
        let target = ChannelStats::new(1, c, mu.clone(), sigma.clone()).unwrap();
        let out = adain(&fm, &target, EPS).unwrap();
        let got_mu = channel_mean(&out).unwrap();
        let got_sd = channel_std(&out, EPS).unwrap();
        for bi in 0..fm.batch() {
            for ci in 0..c {
                let i = bi * c + ci;
                prop_assert!((got_mu[i] - mu[ci]).abs() < 1e-4, "mu {} vs {}", got_mu[i], mu[ci]);
                prop_assert!((got_sd[i] - sigma[ci]).abs() < 1e-4, "sd {} vs {}", got_sd[i], sigma[ci]);
            }
        }
    }

    /// ossa with std = 0 degenerates to adain for arbitrary inputs.
    #[test]
    fn ossa_degenerates_to_adain(fm in arb_map(), seed in any::<u64>()) {
        let mut style_rng = SeededRng::from_seed(seed);
        let c = fm.channels();
        let mu: Vec<f64> = (0..c).map(|_| style_rng.uniform_in(-2.0, 2.0)).collect();
        let sigma: Vec<f64> = (0..c).map(|_| style_rng.uniform_in(0.5, 2.0)).collect();
        let target = ChannelStats::new(1, c, mu, sigma).unwrap();
        let mut rng = SeededRng::from_seed(seed ^ 0xabcd);
        let spec = NoiseSpec::new(0.0).unwrap();
        let got = ossa(&fm, &target, &mut rng, &spec, EPS).unwrap();
        let want = adain(&fm, &target, EPS).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}

/// Over many invocations the per-channel output mean is an unbiased
/// estimator of the target mu (within 3 standard errors).
#[test]
fn ossa_mean_is_unbiased_estimator_of_target_mu() {
    let mut data_rng = SeededRng::from_seed(7001);
    let fm = FeatureMap::from_fn([1, 2, 6, 6], |_, _, _, _| data_rng.normal(0.0, 1.0));
    let target = ChannelStats::new(1, 2, vec![1.5, -0.5], vec![1.0, 2.0]).unwrap();
    let spec = NoiseSpec::default();
    let mut rng = SeededRng::from_seed(7002);

    let trials = 4000;
    let mut sums = [0.0f64; 2];
    for _ in 0..trials {
        let out = ossa(&fm, &target, &mut rng, &spec, EPS).unwrap();
        let mean = channel_mean(&out).unwrap();
        sums[0] += mean[0];
        sums[1] += mean[1];
    }
    for c in 0..2 {
        let est = sums[c] / trials as f64;
        // output channel mean = beta * mu; beta ~ N(1, 0.75)
        // => standard error of the estimate = 0.75 * |mu| / sqrt(trials)
        let se = 0.75 * target.mu(0, c).abs() / (trials as f64).sqrt();
        let diff = (est - target.mu(0, c)).abs();
        assert!(diff <= 3.0 * se, "channel {c}: estimate {est} vs {} (3se = {})", target.mu(0, c), 3.0 * se);
    }
}

/// Prototype stability: averaging over more images shrinks the spread of
/// prototype entries across independent re-samples.
#[test]
fn prototype_variance_shrinks_with_more_images() {
    use ossa_core::backbone::{build_backbone, ArchConfig, InsertionPoint};
    use ossa_core::domains::{generate_content, apply_style, StyleParams};
    use ossa_core::prototype::extract_prototype;

    let arch = ArchConfig {
        in_channels: 3,
        image_size: 16,
        stem_channels: 4,
        stage_channels: [6, 8, 8],
        n_classes: 4,
    };
    let bb = build_backbone(&arch, 77).unwrap();
    let style = StyleParams { fog_intensity: 0.5, ..StyleParams::default() };

    let resamples = 24;
    let make_image = |global: usize| {
        let img = generate_content(9000, global, global % 4, 16);
        apply_style(&img, &style)
    };

    // variance across resamples of the first few prototype mu entries
    let spread = |k: usize| -> f64 {
        let mut per_entry: Vec<Vec<f64>> = vec![Vec::new(); 4];
        let mut next = 0usize;
        for _ in 0..resamples {
            let images: Vec<_> = (0..k).map(|_| { next += 1; make_image(next) }).collect();
            let ids: Vec<String> = (0..k).map(|i| format!("i{i}")).collect();
            let proto =
                extract_prototype(&bb, &images, &ids, &[InsertionPoint::PostStem], EPS).unwrap();
            let stats = proto.layer("post_stem").unwrap();
            for c in 0..4 {
                per_entry[c].push(stats.mu(0, c));
            }
        }
        per_entry
            .iter()
            .map(|vals| {
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64
            })
            .sum::<f64>()
    };

    let var_k1 = spread(1);
    let var_k10 = spread(10);
    assert!(
        var_k10 < var_k1,
        "variance should shrink with K: K=1 gives {var_k1}, K=10 gives {var_k10}"
    );
}
