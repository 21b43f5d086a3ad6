mod common;

use common::*;
use m2gan::blocks::{Env, Rdb, RdbConfig, Urdb, UrdbConfig};
use m2gan::conditioning::{attention_rain_map, ToySegmenter};
use m2gan::data::{
    crop_window, random_crop_pair, synthesize, DatasetManifest, DatasetPair, PairEntry, RainSynthesisConfig, Split,
};
use m2gan::generator::{Generator, PipelineConfig};
use m2gan::graph::Graph;
use m2gan::losses::{
    disc_adversarial_from_logits, gen_adversarial_from_logits, loss_mae, loss_perceptual, weighted_total, AdvLossMode,
    LossComponents, LossWeights, PerceptualBackbone,
};
use m2gan::metrics::{fid, psnr, ssim, FeatureStats};
use m2gan::params::{seeded_rng, ParamStore};
use m2gan::plane::ImagePlane;
use m2gan::tensor::Shape;
use proptest::prelude::*;

const MODES: [AdvLossMode; 2] = [AdvLossMode::Standard, AdvLossMode::Literal];

fn logits() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..6).prop_flat_map(|n| (prop::collection::vec(-4.0..4.0f64, n), prop::collection::vec(-4.0..4.0f64, n)))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rdb_with_zero_weights_is_identity(layers in 1usize..4, growth in 1usize..4, ch in 1usize..4, seed in 0u64..1000) {
        let rdb = Rdb::new("r", RdbConfig { num_layers: layers, growth_rate: growth, in_channels: ch }).unwrap();
        let mut p = ParamStore::new();
        rdb.init(&mut p, &mut seeded_rng(seed)).unwrap();
        p.iter_mut().for_each(|(_, t)| t.data_mut().fill(0.0));
        let x = random_tensor(Shape::new(1, ch, 5, 6), seed, -2.0, 2.0);
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = rdb.forward(&mut Env::new(&mut g, &bound), xv).unwrap();
        prop_assert_eq!(g.value(y), &x);
    }

    #[test]
    fn urdb_keeps_spatial_size(k in 1usize..4, hw in (1usize..4, 1usize..4), base in 1usize..4, out in 1usize..4) {
        let cfg = UrdbConfig { in_channels: 2, base_channels: base, out_channels: out, rdb_layers: 1, growth_rate: 2 };
        let urdb = Urdb::new("u", cfg).unwrap();
        let mut p = ParamStore::new();
        urdb.init(&mut p, &mut seeded_rng(k as u64)).unwrap();
        let (h, w) = (4 * hw.0, 4 * hw.1);
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let xv = g.constant(random_tensor(Shape::new(1, 2, h, w), 3, 0.0, 1.0));
        let y = urdb.forward(&mut Env::new(&mut g, &bound), xv).unwrap();
        prop_assert_eq!(g.shape(y), Shape::new(1, out, h, w));
    }

    #[test]
    fn rain_map_is_symmetric_shift_invariant_and_zero_on_equal_inputs(
        s1 in 0u64..1000, s2 in 0u64..1000, shift in -0.5..0.5f64,
    ) {
        let a = random_plane(6, 7, 3, s1);
        let b = random_plane(6, 7, 3, s2);
        let ab = attention_rain_map(&a, &b).unwrap();
        prop_assert_eq!(&ab, &attention_rain_map(&b, &a).unwrap());
        let shifted = |p: &ImagePlane| ImagePlane::from_fn(6, 7, 3, |c, y, x| p.get(c, y, x) + shift);
        let moved = attention_rain_map(&shifted(&a), &shifted(&b)).unwrap();
        for (u, v) in ab.plane().data().iter().zip(moved.plane().data()) {
            prop_assert!((u - v).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(u));
        }
        prop_assert!(attention_rain_map(&a, &a).unwrap().plane().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn segmentation_scores_form_a_simplex(seed in 0u64..1000, k in 2usize..6, temperature in 0.01..1.0f64) {
        let seg = ToySegmenter { num_categories: k, temperature, ..ToySegmenter::default() };
        let map = seg.segment(&random_plane(5, 6, 3, seed)).unwrap();
        let p = map.plane();
        for y in 0..5 {
            for x in 0..6 {
                let total: f64 = (0..k).map(|c| p.get(c, y, x)).sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
                prop_assert!((0..k).all(|c| p.get(c, y, x) >= 0.0));
            }
        }
    }

    #[test]
    fn relativistic_losses_ignore_a_common_logit_shift((r, f) in logits(), shift in -10.0..10.0f64) {
        let rs: Vec<f64> = r.iter().map(|v| v + shift).collect();
        let fs: Vec<f64> = f.iter().map(|v| v + shift).collect();
        for mode in MODES {
            let d = disc_adversarial_from_logits(&r, &f, mode).unwrap();
            let g = gen_adversarial_from_logits(&r, &f, mode).unwrap();
            prop_assert!(close(d, disc_adversarial_from_logits(&rs, &fs, mode).unwrap(), 1e-9));
            prop_assert!(close(g, gen_adversarial_from_logits(&rs, &fs, mode).unwrap(), 1e-9));
        }
    }

    #[test]
    fn relativistic_losses_swap_roles((r, f) in logits()) {
        // Exchanging real and fake turns one player's loss into the other's.
        let d = disc_adversarial_from_logits(&r, &f, AdvLossMode::Standard).unwrap();
        let g = gen_adversarial_from_logits(&f, &r, AdvLossMode::Standard).unwrap();
        prop_assert!(close(d, g, 1e-12));
        // As written the two players' terms cancel.
        let d = disc_adversarial_from_logits(&r, &f, AdvLossMode::Literal).unwrap();
        let g = gen_adversarial_from_logits(&r, &f, AdvLossMode::Literal).unwrap();
        prop_assert!(close(d, -g, 1e-12));
        prop_assert!(close(d, disc_adversarial_from_logits(&f, &r, AdvLossMode::Literal).unwrap(), 1e-12));
    }

    #[test]
    fn mae_is_a_metric(s in (0u64..1000, 0u64..1000, 0u64..1000)) {
        let [a, b, c] = [s.0, s.1, s.2].map(|k| random_plane(4, 5, 3, k).to_tensor());
        let ab = loss_mae(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, loss_mae(&b, &a).unwrap());
        prop_assert_eq!(loss_mae(&a, &a).unwrap(), 0.0);
        prop_assert!(ab <= loss_mae(&a, &c).unwrap() + loss_mae(&c, &b).unwrap() + 1e-12);
    }

    #[test]
    fn total_is_linear_in_each_weight(
        parts in (0.0..5.0f64, 0.0..5.0f64, -5.0..5.0f64),
        w in (0.0..2.0f64, 0.0..2.0f64, 0.0..2.0f64),
        t in 0.0..3.0f64,
    ) {
        let c = LossComponents { mae: parts.0, perceptual: parts.1, adversarial: parts.2 };
        let base = LossWeights { mae: w.0, perceptual: w.1, adversarial: w.2 };
        let at = |weights: LossWeights| weighted_total(c, &weights).unwrap();
        let l0 = at(base);
        let cases = [
            (LossWeights { mae: w.0 + t, ..base }, parts.0),
            (LossWeights { perceptual: w.1 + t, ..base }, parts.1),
            (LossWeights { adversarial: w.2 + t, ..base }, parts.2),
        ];
        for (weights, part) in cases {
            prop_assert!(close(at(weights), l0 + t * part, 1e-12));
        }
    }

    #[test]
    fn psnr_is_symmetric_and_falls_with_error(seed in 0u64..1000, e in 0.01..0.2f64) {
        let a = random_plane(6, 6, 3, seed).data().iter().map(|v| 0.2 + 0.6 * v).collect::<Vec<_>>();
        let a = ImagePlane::new(6, 6, 3, a).unwrap();
        let off = |d: f64| ImagePlane::from_fn(6, 6, 3, |c, y, x| a.get(c, y, x) + d);
        let (near, far) = (off(e), off(e * 1.5));
        prop_assert_eq!(psnr(&a, &near).unwrap(), psnr(&near, &a).unwrap());
        prop_assert!(psnr(&a, &near).unwrap() > psnr(&a, &far).unwrap());
    }

    #[test]
    fn synthesis_is_local_and_repeatable(seed in 0u64..1000) {
        let clean = random_plane(24, 28, 3, seed);
        let cfg = RainSynthesisConfig { seed, ..RainSynthesisConfig::default() };
        let s = synthesize(&clean, &cfg).unwrap();
        let again = synthesize(&clean, &cfg).unwrap();
        prop_assert_eq!(&s.image, &again.image);
        for y in 0..24 {
            for x in 0..28 {
                if !s.mask[y * 28 + x] {
                    prop_assert!((0..3).all(|c| s.image.get(c, y, x) == clean.get(c, y, x)));
                }
            }
        }
    }

    #[test]
    fn crops_share_one_window(seed in 0u64..1000, size in 1usize..12, marker in (0usize..12, 0usize..16)) {
        let mut clean = random_plane(12, 16, 3, seed);
        clean.set(0, marker.0, marker.1, 2.0);
        let rain = ImagePlane::from_fn(12, 16, 3, |c, y, x| clean.get(c, y, x) + 1.0);
        let pair = DatasetPair { id: "p".into(), rain, clean: clean.clone() };
        let cropped = random_crop_pair(&pair, size, seed).unwrap();
        let (top, left) = crop_window(12, 16, size, seed).unwrap();
        prop_assert_eq!(&cropped.clean, &clean.crop(top, left, size, size).unwrap());
        for (r, c) in cropped.rain.data().iter().zip(cropped.clean.data()) {
            prop_assert_eq!(*r, c + 1.0);
        }
        let inside = (top..top + size).contains(&marker.0) && (left..left + size).contains(&marker.1);
        prop_assert_eq!(cropped.clean.data().contains(&2.0), inside);
    }

    #[test]
    fn manifest_round_trips(ids in prop::collection::btree_set("[a-z0-9]{1,8}", 1..6), test in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let pairs: Vec<PairEntry> = ids
            .iter()
            .map(|id| PairEntry { id: id.clone(), rain: format!("rain/{id}.png").into(), gt: format!("gt/{id}.png").into() })
            .collect();
        let split = if test { Split::Test } else { Split::Train };
        let m = DatasetManifest::new(dir.path(), split, pairs).unwrap();
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        prop_assert_eq!(DatasetManifest::load(&path).unwrap(), m);
    }

    #[test]
    fn fid_is_a_distance(s1 in 0u64..1000, s2 in 0u64..1000) {
        let rows = |seed: u64| -> Vec<Vec<f64>> {
            let t = random_tensor(Shape::new(1, 1, 12, 4), seed, -1.0, 1.0);
            t.data().chunks(4).map(<[f64]>::to_vec).collect()
        };
        let a = FeatureStats::from_embeddings(&rows(s1)).unwrap();
        let b = FeatureStats::from_embeddings(&rows(s2)).unwrap();
        prop_assert!(fid(&a, &a).unwrap().abs() < 1e-6);
        let ab = fid(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!(close(ab, fid(&b, &a).unwrap(), 1e-6));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generator_outputs_stay_in_range(seed in 0u64..1000, scale in 0.0..0.5f64) {
        let mut gen = Generator::new(PipelineConfig::tiny(), seed).unwrap();
        let heads: Vec<String> = gen.params.names().filter(|n| n.ends_with("head.weight")).cloned().collect();
        for name in heads {
            let shape = gen.params.require(&name).unwrap().shape();
            gen.params.assign(&name, random_tensor(shape, seed + 1, -scale, scale)).unwrap();
        }
        let seg = m2gan::conditioning::SegmenterHandle::Toy(ToySegmenter::default());
        let outs = gen.multistage_forward(&random_plane(8, 8, 3, seed), &seg, None).unwrap();
        for o in outs {
            prop_assert!(o.estimate.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(o.next_state.hidden.data().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn perceptual_is_nonnegative_and_zero_on_equal_inputs(s1 in 0u64..1000, s2 in 0u64..1000) {
        let b = PerceptualBackbone::fixed_random(s1, 2).unwrap();
        let x = random_plane(8, 8, 3, s1).to_tensor();
        let y = random_plane(8, 8, 3, s2).to_tensor();
        prop_assert!(loss_perceptual(&x, &y, &b).unwrap() >= 0.0);
        prop_assert_eq!(loss_perceptual(&x, &x, &b).unwrap(), 0.0);
    }

    #[test]
    fn ssim_is_symmetric_and_one_on_equal_inputs(s1 in 0u64..1000, s2 in 0u64..1000) {
        let a = random_plane(16, 14, 3, s1);
        let b = random_plane(16, 14, 3, s2);
        prop_assert!(close(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap(), 1e-12));
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}
