//! Evaluation primitives against brute-force oracles, plus their invariants.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{bf_mean_std, oracle_instance, random_eval_instance};
use sclmetric::dataset::{gallery_probe_partition, generate_synthetic, generate_with_ids, SynthConfig};
use sclmetric::evaluation::{
    cmc_curve, distractor_gallery, embed_labelled, extend_gallery, gar_at_far, identify, mean_std, Labelled,
};
use sclmetric::model::init_model;

#[test]
fn evaluation_matches_brute_force_oracles() {
    for seed in 0..25 {
        if let Err(msg) = oracle_instance(seed) {
            panic!("instance {seed}: {msg}");
        }
    }
}

#[test]
fn mean_std_matches_recomputation() {
    let xs = [0.3, 0.55, 0.1, 0.9, 0.42];
    let got = mean_std(&xs);
    let (m, s) = bf_mean_std(&xs);
    assert_eq!((got.mean, got.std), (m, s));
}

fn rank1(gallery: &[Labelled], probes: &[Labelled]) -> f64 {
    let rankings: Vec<(u32, Vec<u32>)> = probes
        .iter()
        .map(|(id, p)| (*id, identify(p, gallery).unwrap()))
        .collect();
    cmc_curve(&rankings).unwrap().curve.values[0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identify_returns_a_permutation_of_gallery_ids(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (gallery, probes) = random_eval_instance(&mut r);
        let mut ids: Vec<u32> = gallery.iter().map(|(id, _)| *id).collect();
        ids.sort();
        ids.dedup();
        for (_, p) in &probes {
            let mut ranked = identify(p, &gallery).unwrap();
            ranked.sort();
            prop_assert_eq!(&ranked, &ids);
        }
    }

    #[test]
    fn cmc_is_monotone_and_reaches_one(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (gallery, probes) = random_eval_instance(&mut r);
        let rankings: Vec<(u32, Vec<u32>)> = probes
            .iter()
            .map(|(id, p)| (*id, identify(p, &gallery).unwrap()))
            .collect();
        let cmc = cmc_curve(&rankings).unwrap();
        prop_assert!(cmc.curve.values.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*cmc.curve.values.last().unwrap(), 1.0);
        prop_assert!(cmc.unmatched.is_empty());
    }

    #[test]
    fn gar_at_far_respects_target_and_is_monotone(
        genuine in prop::collection::vec(0.0f64..4.0, 1..40),
        imposter in prop::collection::vec(0.0f64..4.0, 1..40),
        mut targets in prop::collection::vec(0.001f64..=1.0, 1..8),
    ) {
        targets.sort_by(f64::total_cmp);
        let points = gar_at_far(&genuine, &imposter, &targets).unwrap();
        for p in &points {
            prop_assert!(p.achieved_far <= p.target_far);
        }
        prop_assert!(points.windows(2).all(|w| w[0].gar <= w[1].gar));
    }

    #[test]
    fn extending_the_gallery_never_raises_rank1(seed in 0u64..1000, extra in 1usize..40) {
        let ds = generate_synthetic(&SynthConfig { n_subjects: 8, ..SynthConfig::easy(seed) }).unwrap();
        let distractors = generate_with_ids(&SynthConfig { n_subjects: extra, ..SynthConfig::hard(seed) }, 1000).unwrap();
        let model = init_model(&[16, 32, 16], seed).unwrap();
        let part = gallery_probe_partition(&ds, true);
        let ext = extend_gallery(&part, &distractor_gallery(&distractors)).unwrap();
        prop_assert_eq!(ext.gallery.len(), part.gallery.len() + extra);
        let before = rank1(&embed_labelled(&model, &part.gallery).unwrap(), &embed_labelled(&model, &part.probe).unwrap());
        let after = rank1(&embed_labelled(&model, &ext.gallery).unwrap(), &embed_labelled(&model, &ext.probe).unwrap());
        prop_assert!(after <= before);
    }
}
