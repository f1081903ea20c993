mod support;

use bas::eval::{
    loc_accuracies, mask_to_bbox, maxboxaccv2, miou_seed, piou, pxap, threshold_grid, IouRule,
    LocPrediction, LocTarget,
};
use bas::maps::Mask;
use bas::Execution;
use proptest::prelude::*;
use support::*;

fn check_instance(seed: u64, rule: IouRule) {
    let grid = threshold_grid(255);
    let inst = metric_instance(seed, 5, 8, 255);
    let preds: Vec<LocPrediction> = inst
        .maps
        .iter()
        .zip(&inst.logits)
        .map(|(m, l)| LocPrediction {
            logits: l.clone(),
            map: m.clone(),
        })
        .collect();
    let gts: Vec<LocTarget> = inst
        .classes
        .iter()
        .zip(&inst.boxes)
        .map(|(&class, &bbox)| LocTarget { class, bbox })
        .collect();
    for theta in [0.0, 0.3, 0.5, 0.8] {
        let got = loc_accuracies(&preds, &gts, theta, 0.5, rule).unwrap();
        let want = bf_loc(&inst.maps, &inst.logits, &inst.classes, &inst.boxes, theta, 0.5, rule);
        assert_eq!(got.gt_known, want.gt_known, "seed {seed} θ={theta}");
        assert_eq!(got.top1, want.top1, "seed {seed} θ={theta}");
        assert_eq!(got.top5, want.top5, "seed {seed} θ={theta}");
    }
    let deltas = [0.3, 0.5, 0.7];
    let got = maxboxaccv2(&inst.maps, &inst.boxes, &deltas, &grid, rule, Execution::Sequential).unwrap();
    assert_eq!(got.value, bf_maxboxacc(&inst.maps, &inst.boxes, &deltas, &grid, rule), "seed {seed}");
    let (p, _) = piou(&inst.maps, &inst.masks, &grid, Execution::Parallel).unwrap();
    assert_eq!(p, bf_piou(&inst.maps, &inst.masks, &grid), "seed {seed}");
    assert_eq!(pxap(&inst.maps, &inst.masks).unwrap(), bf_pxap(&inst.maps, &inst.masks), "seed {seed}");
    for theta_bg in [0.2, 0.5] {
        let got = miou_seed(&inst.class_maps, &inst.semantic, NUM_CLASSES, theta_bg).unwrap();
        assert_eq!(got, bf_miou(&inst.class_maps, &inst.semantic, NUM_CLASSES, theta_bg), "seed {seed}");
    }
}

#[test]
fn metrics_match_brute_force() {
    for seed in 0..20 {
        check_instance(seed, IouRule { strict: seed % 2 == 1 });
    }
}

proptest! {
    #[test]
    fn largest_component_box_matches_relaxation(bits in proptest::collection::vec(any::<bool>(), 64)) {
        let m = Mask::new(8, 8, bits).unwrap();
        prop_assert_eq!(mask_to_bbox(&m), bf_box(&m));
    }

    #[test]
    fn box_iou_matches_pixel_count(a in (0usize..7, 0usize..7, 1usize..8, 1usize..8), b in (0usize..7, 0usize..7, 1usize..8, 1usize..8)) {
        let mk = |(x, y, w, h): (usize, usize, usize, usize)| bas::eval::BBox::new(x, y, x + w, y + h);
        let (a, b) = (mk(a), mk(b));
        prop_assert_eq!(bas::eval::iou_box(&a, &b), bf_box_iou(Some(a), &b));
    }

    #[test]
    fn pixel_metrics_in_unit_range(seed in 0u64..1000) {
        let inst = metric_instance(seed, 3, 8, 255);
        let (p, curve) = piou(&inst.maps, &inst.masks, &threshold_grid(255), Execution::Sequential).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(curve.iter().all(|v| (0.0..=1.0).contains(v)));
        let ap = pxap(&inst.maps, &inst.masks).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
    }
}
