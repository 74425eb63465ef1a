use morphcons::features::{FeatureNormalizers, MorphologyPass, RawFeatures};
use morphcons::grid::{GrayImage, Grid, SoftMask};
use morphcons::synth::{disc_star_pair, generate, GeneratorProfile, LesionKind, LesionSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Compactness of the thresholded radius-12 disc centered in 64x64.
const DISC_R12_COMPACTNESS: f64 = 0.01499081566469629;

fn hard_features(s: &morphcons::synth::SyntheticSample) -> RawFeatures {
    let mask = SoftMask::from_probabilities(s.mask_gt.clone()).unwrap();
    MorphologyPass::new(&mask, Some(&s.image)).unwrap().raw()
}

fn pairs(n: u64) -> Vec<(RawFeatures, RawFeatures)> {
    let profile = GeneratorProfile::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..n)
        .map(|i| {
            let r = rng.random_range(profile.radius_range.0..profile.radius_range.1);
            let k = rng.random_range(profile.spike_range.0..=profile.spike_range.1);
            let d = rng.random_range(profile.depth_range.0..profile.depth_range.1);
            let (disc, star) = disc_star_pair(&profile, r, k, d, 1000 + i).unwrap();
            (hard_features(&disc), hard_features(&star))
        })
        .collect()
}

#[test]
fn disc_compactness_regression() {
    let disc = generate(&LesionSpec::centered_disc(64, 12.0)).unwrap();
    let c = hard_features(&disc).compactness;
    assert!((c - DISC_R12_COMPACTNESS).abs() < 1e-12, "{c:.17}");
}

#[test]
fn stars_are_rougher_and_less_compact_than_discs() {
    let ps = pairs(60);
    let ok = ps
        .iter()
        .filter(|(d, s)| s.roughness > d.roughness && s.compactness < d.compactness)
        .count();
    assert!(ok as f64 >= 0.95 * ps.len() as f64, "{ok}/{}", ps.len());
}

#[test]
fn malignant_features_dominate_benign() {
    let ps = pairs(60);
    let ok = ps
        .iter()
        .filter(|(d, s)| {
            s.roughness > d.roughness && 1.0 - s.compactness > 1.0 - d.compactness && s.texture > d.texture
        })
        .count();
    assert!(ok as f64 >= 0.95 * ps.len() as f64, "{ok}/{}", ps.len());
}

#[test]
fn roughness_is_roughly_scale_invariant() {
    for kind in [LesionKind::BenignEllipse, LesionKind::MalignantStar] {
        let shape = |size: usize, r: f64| {
            let spec = LesionSpec {
                kind,
                spike_count: 7,
                spike_depth: 0.35,
                ..LesionSpec::centered_disc(size, r)
            };
            let s = generate(&spec).unwrap();
            hard_features(&s)
        };
        let small = shape(64, 10.0);
        let large = shape(128, 20.0);
        let p_ratio = large.perimeter / small.perimeter;
        let r_ratio = large.roughness / small.roughness;
        assert!((p_ratio - 2.0).abs() < 0.3, "{kind:?} perimeter ratio {p_ratio}");
        assert!((r_ratio - 1.0).abs() < 0.15, "{kind:?} roughness ratio {r_ratio}");
    }
}

#[test]
fn frozen_normalizers_give_bitwise_identical_features() {
    let profile = GeneratorProfile::default();
    let (disc, star) = disc_star_pair(&profile, 10.0, 6, 0.3, 5).unwrap();
    let mut norms = FeatureNormalizers::default();
    norms.observe(&[hard_features(&disc), hard_features(&star)]).unwrap();
    let a = norms.normalize(&hard_features(&star)).unwrap();
    let b = norms.normalize(&hard_features(&star)).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn features_lie_in_unit_interval(
        seed in any::<u64>(),
        h in 3usize..20,
        w in 3usize..20,
        hard in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = Grid::from_fn(h, w, |_, _| {
            let v: f64 = rng.random();
            if hard { v.round() } else { v }
        });
        let image = GrayImage::new(Grid::from_fn(h, w, |_, _| rng.random::<f64>())).unwrap();
        let raw = MorphologyPass::new(&SoftMask::from_probabilities(mask).unwrap(), Some(&image))
            .unwrap()
            .raw();
        prop_assert!((0.0..=1.0).contains(&raw.area));
        prop_assert!((0.0..=1.0).contains(&raw.compactness));
        // Texture is a weighted variance of values in [0, 1].
        prop_assert!((0.0..=0.25).contains(&raw.texture));
        prop_assert!(raw.roughness >= 0.0 && raw.perimeter >= 0.0);

        let mut norms = FeatureNormalizers::default();
        norms.observe(&[raw]).unwrap();
        let fv = norms.normalize(&raw).unwrap();
        for v in fv.prior_input() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
