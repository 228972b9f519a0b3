use hepaseg::mask::{LIVER, TUMOR};
use hepaseg::metrics::{dsc, render_table, report, soft_dice_loss, DiceReport};
use hepaseg::{LabelMask, ProbMap};
use proptest::prelude::*;

fn mask(labels: &[u8]) -> LabelMask {
    LabelMask::new(1, labels.len(), labels.to_vec()).unwrap()
}

#[test]
fn dice_examples() {
    let p = mask(&[1, 1, 1, 1, 0, 0]);
    let g = mask(&[0, 0, 1, 1, 1, 1]);
    assert_eq!(dsc(&p, &g, LIVER).unwrap(), 0.5);
    assert_eq!(dsc(&g, &g, LIVER).unwrap(), 1.0);
    assert_eq!(dsc(&mask(&[1, 1, 0]), &mask(&[0, 0, 1]), LIVER).unwrap(), 0.0);
    assert_eq!(dsc(&mask(&[0, 0]), &mask(&[0, 0]), TUMOR).unwrap(), 1.0);
    assert!(dsc(&mask(&[0, 0]), &mask(&[0, 0, 0]), LIVER).is_err());
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let g = LabelMask::new(4, 4, (0..16).map(|i| (i % 3) as u8).collect()).unwrap();
    assert!(soft_dice_loss(&ProbMap::one_hot(&g), &g, 1e-6).unwrap().abs() < 1e-12);
}

#[test]
fn uniform_prediction_on_half_liver() {
    let n = 64;
    let g = LabelMask::new(8, 8, (0..n).map(|i| u8::from(i >= n / 2)).collect()).unwrap();
    let p = ProbMap::new(8, 8, 3, vec![1.0 / 3.0; n * 3]).unwrap();
    let eps = 1e-6;
    let nf = n as f64;
    // Background and liver: overlap n/6, mass n/3, count n/2. Tumor has mass only.
    let half = (2.0 * nf / 6.0 + eps) / (nf / 3.0 + nf / 2.0 + eps);
    let tumor = eps / (nf / 3.0 + eps);
    let expected = 1.0 - (2.0 * half + tumor) / 3.0;
    let got = soft_dice_loss(&p, &g, eps).unwrap();
    assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    assert!((got - 0.7333).abs() < 1e-3);
}

#[test]
fn report_averages_and_drops() {
    let g1 = mask(&[1, 1, 2, 0]);
    let g2 = mask(&[1, 1, 0, 0]);
    let p1 = mask(&[1, 0, 2, 0]);
    let p2 = mask(&[1, 1, 0, 0]);
    let r = report(&[p1, p2], &[g1, g2], None).unwrap();
    assert!((r.liver - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
    assert_eq!(r.tumor, 1.0);
    assert!((r.mean - (r.liver + r.tumor) / 2.0).abs() < 1e-15);
    assert!(report(&[], &[], None).is_err());

    let reference = DiceReport::from_scores(20, 0.966, 0.823);
    let ablated = DiceReport::from_scores(20, 0.961, 0.784).with_reference(&reference);
    let d = ablated.delta.unwrap();
    assert!((d.liver * 100.0 - 0.5).abs() < 1e-9);
    assert!((d.tumor * 100.0 - 3.9).abs() < 1e-9);
    let table = render_table(&[("full".into(), reference.clone()), ("no attention".into(), ablated.clone())]);
    let last = table.lines().last().unwrap();
    assert!(last.contains("96.1") && last.contains("0.5") && last.contains("78.4") && last.contains("3.9"), "{table}");
    assert_eq!(table.lines().count(), 3);

    let back = DiceReport::from_json(&ablated.to_json().unwrap()).unwrap();
    assert_eq!(back, ablated);
}

fn labels(n: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..3, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_is_symmetric_and_bounded(a in labels(30), b in labels(30), class in 1u8..3) {
        let (a, b) = (mask(&a), mask(&b));
        let ab = dsc(&a, &b, class).unwrap();
        prop_assert_eq!(ab, dsc(&b, &a, class).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn dice_ignores_pixel_order(pairs in prop::collection::vec((0u8..3, 0u8..3), 20), shift in 0usize..20) {
        let (a, b): (Vec<u8>, Vec<u8>) = pairs.iter().copied().unzip();
        let mut rotated = pairs.clone();
        rotated.rotate_left(shift);
        let (ra, rb): (Vec<u8>, Vec<u8>) = rotated.into_iter().unzip();
        for class in [LIVER, TUMOR] {
            prop_assert_eq!(dsc(&mask(&a), &mask(&b), class).unwrap(), dsc(&mask(&ra), &mask(&rb), class).unwrap());
        }
    }

    #[test]
    fn loss_falls_toward_the_truth(g in labels(36), t in 0.0f64..0.95) {
        let g = LabelMask::new(6, 6, g).unwrap();
        let at = |t: f64| {
            let p: Vec<f32> = ProbMap::one_hot(&g)
                .probs()
                .iter()
                .map(|&o| ((1.0 - t) / 3.0 + t * f64::from(o)) as f32)
                .collect();
            soft_dice_loss(&ProbMap::new(6, 6, 3, p).unwrap(), &g, 1e-6).unwrap()
        };
        let (now, later) = (at(t), at(t + 0.05));
        prop_assert!((0.0..=1.0).contains(&now));
        prop_assert!(later <= now + 1e-6, "loss {now} -> {later}");
    }
}
