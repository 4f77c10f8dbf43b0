mod common;

use proptest::prelude::*;
use qseg_core::data::Vocabulary;
use qseg_core::data::{rle_decode, rle_encode, synth_generate, BinaryMask, Dataset, SynthConfig};
use qseg_core::loss::hungarian;
use qseg_core::metrics::{average_precision, eval_report, Detection, ThresholdGrid, TpRule};
use qseg_core::rng::Rng;

use common::{brute_force_assignment, micro_dataset, oracle_ap, random_cost, RASTER};

fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
    (1usize..20, 1usize..20).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<bool>(), h * w)
            .prop_map(move |bits| BinaryMask::from_bits(h, w, bits).unwrap())
    })
}

fn vocab(categories: usize) -> Vocabulary {
    Vocabulary {
        categories: (0..categories).map(|c| format!("c{c}")).collect(),
        attributes: (0..4).map(|a| format!("a{a}")).collect(),
        attribute_groups: Vec::new(),
        applicability: vec![(0..4).collect(); categories],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rle_round_trip(mask in mask_strategy()) {
        let rle = rle_encode(&mask);
        prop_assert_eq!(rle.counts.iter().sum::<u64>() as usize, mask.height() * mask.width());
        prop_assert_eq!(rle_decode(&rle, mask.height(), mask.width()).unwrap(), mask);
    }

    #[test]
    fn hungarian_is_optimal(seed in any::<u64>()) {
        let cost = random_cost(&mut Rng::seed(seed), 6);
        let a = hungarian(&cost);
        prop_assert!((a.total_cost(&cost) - brute_force_assignment(&cost)).abs() < 1e-9);
    }

    #[test]
    fn hungarian_ignores_positive_affine_maps(seed in any::<u64>(), k in 0.1f64..10.0, c in -5.0f64..5.0) {
        let cost = random_cost(&mut Rng::seed(seed), 6);
        let mapped = cost.map(|v| k * v + c);
        let (a, b) = (hungarian(&cost), hungarian(&mapped));
        // Ties may pick different pairs; the optimal cost must agree.
        prop_assert!((b.total_cost(&mapped) - (k * a.total_cost(&cost) + c * a.pairs.len() as f64)).abs() < 1e-7);
    }

    #[test]
    fn ap_matches_oracle(seed in any::<u64>(), t in prop::sample::select(vec![0.5, 0.65, 0.8, 0.95]), f in prop::sample::select(vec![0.5, 0.75, 1.0])) {
        let (dets, gts) = micro_dataset(seed, 10, 1);
        for rule in [TpRule::Iou(t), TpRule::IouF1 { iou: t, f1: f }] {
            let got = average_precision(&dets, &gts, rule).unwrap();
            let want = oracle_ap(&dets, &gts, rule);
            match (got, want) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9, "{} vs {}", x, y),
                (x, y) => prop_assert_eq!(x, y),
            }
        }
    }

    #[test]
    fn ap_depends_only_on_score_ranks(seed in any::<u64>()) {
        let (dets, gts) = micro_dataset(seed, 10, 1);
        let rescaled: Vec<Detection> = dets.iter().map(|d| Detection { score: (3.0 * d.score).exp() - 7.0, ..d.clone() }).collect();
        for t in [0.5, 0.75] {
            prop_assert_eq!(
                average_precision(&dets, &gts, TpRule::Iou(t)).unwrap(),
                average_precision(&rescaled, &gts, TpRule::Iou(t)).unwrap()
            );
        }
    }

    #[test]
    fn joint_ap_never_exceeds_mask_ap(seed in any::<u64>()) {
        let (dets, gts) = micro_dataset(seed, 10, 2);
        let r = eval_report(&dets, &gts, &vocab(2), &[(RASTER, RASTER); 2], &ThresholdGrid::coco()).unwrap();
        prop_assert!(r.ap_iou_f1 <= r.ap_iou + 1e-12);
        prop_assert!(r.gap_g >= 0.0);
        prop_assert!((0.0..=1.0).contains(&r.ap_iou) && (0.0..=1.0).contains(&r.ap_iou_f1));
        for c in &r.per_category {
            if let (Some(a), Some(j)) = (c.ap_iou, c.ap_iou_f1) {
                prop_assert!(j <= a + 1e-12);
            }
        }
    }

    #[test]
    fn synthetic_annotations_round_trip(seed in any::<u64>()) {
        let cfg = SynthConfig { height: 32, width: 40, num_images: 2, seed, ..SynthConfig::default() };
        let syn = synth_generate(&cfg).unwrap();
        syn.dataset.validate().unwrap();
        let back = Dataset::from_json(&syn.dataset.to_json()).unwrap();
        prop_assert_eq!(back, syn.dataset);
    }
}

fn scene_with_gt(seed: u64) -> Vec<qseg_core::metrics::GroundTruth> {
    (seed..)
        .map(|s| micro_dataset(s, 0, 2).1)
        .find(|g| !g.is_empty())
        .unwrap()
}

#[test]
fn perfect_predictions_score_one() {
    let gts = scene_with_gt(3);
    let dets: Vec<Detection> = gts
        .iter()
        .map(|g| Detection {
            image: g.image,
            category: g.category,
            score: 0.9,
            mask: g.mask.clone(),
            attributes: g.attributes.clone(),
        })
        .collect();
    let r = eval_report(
        &dets,
        &gts,
        &vocab(2),
        &[(RASTER, RASTER); 2],
        &ThresholdGrid::coco(),
    )
    .unwrap();
    assert_eq!((r.ap_iou, r.ap_iou_f1, r.gap_g), (1.0, 1.0, 0.0));
}

#[test]
fn missing_attributes_fail_every_joint_threshold() {
    let mut gts = scene_with_gt(4);
    gts.iter_mut().for_each(|g| g.attributes = vec![1, 2]);
    let dets: Vec<Detection> = gts
        .iter()
        .map(|g| Detection {
            image: g.image,
            category: g.category,
            score: 0.9,
            mask: g.mask.clone(),
            attributes: vec![],
        })
        .collect();
    let r = eval_report(
        &dets,
        &gts,
        &vocab(2),
        &[(RASTER, RASTER); 2],
        &ThresholdGrid::coco(),
    )
    .unwrap();
    assert_eq!((r.ap_iou, r.ap_iou_f1), (1.0, 0.0));
}

#[test]
fn empty_predictions_score_zero() {
    let gts = scene_with_gt(5);
    let r = eval_report(
        &[],
        &gts,
        &vocab(2),
        &[(RASTER, RASTER); 2],
        &ThresholdGrid::coco(),
    )
    .unwrap();
    assert_eq!((r.ap_iou, r.ap_iou_f1), (0.0, 0.0));
}

#[test]
fn random_scenes_are_not_degenerate() {
    let aps: Vec<f64> = (0..200)
        .filter_map(|s| {
            let (d, g) = micro_dataset(s, 10, 1);
            average_precision(&d, &g, TpRule::Iou(0.5)).unwrap()
        })
        .collect();
    let partial = aps.iter().filter(|&&a| a > 0.0 && a < 1.0).count();
    assert!(partial >= 40, "only {partial} scenes with fractional AP");
}
