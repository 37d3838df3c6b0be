use irblock_core::eval::{asr, average_precision};
use irblock_core::{Detection, MaskBox};
use proptest::prelude::*;

fn slot(i: u32) -> MaskBox {
    MaskBox::new(i * 20, 0, 10, 30)
}

/// Images of ground-truth slots with detections `(slot, conf)`.
fn scenes() -> impl Strategy<Value = Vec<(Vec<u32>, Vec<(u32, f64)>)>> {
    let image = (
        proptest::sample::subsequence(vec![0u32, 1, 2, 3], 0..=4),
        proptest::collection::vec((0u32..5, 0.01f64..1.0), 0..=4),
    );
    proptest::collection::vec(image, 1..=5)
}

fn split(s: &[(Vec<u32>, Vec<(u32, f64)>)]) -> (Vec<Vec<MaskBox>>, Vec<Vec<Detection>>) {
    let gt = s.iter().map(|(g, _)| g.iter().map(|&i| slot(i)).collect()).collect();
    let dets = s.iter().map(|(_, d)| d.iter().map(|&(i, c)| Detection::person(slot(i).corners(), c)).collect()).collect();
    (gt, dets)
}

proptest! {
    #[test]
    fn ap_depends_only_on_ranking(s in scenes(), scale in 0.1f64..1.0, shift in 0.0f64..5.0) {
        let (gt, dets) = split(&s);
        prop_assume!(gt.iter().any(|g| !g.is_empty()));
        let ap = average_precision(&dets, &gt, 0.5).unwrap();
        let rescaled: Vec<Vec<Detection>> = dets
            .iter()
            .map(|ds| ds.iter().map(|d| Detection { confidence: (d.confidence * scale + shift).sqrt(), ..d.clone() }).collect())
            .collect();
        prop_assert_eq!(ap, average_precision(&rescaled, &gt, 0.5).unwrap());
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn asr_grows_as_confidence_drops(s in scenes(), factor in 0.0f64..1.0) {
        let (gt, dets) = split(&s);
        let baseline: Vec<Vec<MaskBox>> = gt
            .iter()
            .zip(&dets)
            .map(|(g, d)| g.iter().copied().filter(|b| irblock_core::eval::label_matched(b, d, 0.5, 0.5)).collect())
            .collect();
        prop_assume!(baseline.iter().any(|b| !b.is_empty()));
        let before = asr(&baseline, &dets, 0.5, 0.5).unwrap();
        prop_assert_eq!(before, 0.0);
        let weaker: Vec<Vec<Detection>> = dets
            .iter()
            .map(|ds| ds.iter().map(|d| Detection { confidence: d.confidence * factor, ..d.clone() }).collect())
            .collect();
        prop_assert!(asr(&baseline, &weaker, 0.5, 0.5).unwrap() >= before);
    }
}
