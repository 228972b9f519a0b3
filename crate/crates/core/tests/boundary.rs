use hepaseg::boundary::{boundary_mask, class_region, erode, refine, MbrStrategy, StructuringElement};
use hepaseg::mask::{LIVER, TUMOR};
use hepaseg::{BinaryMask, LabelMask, ProbMap};
use proptest::prelude::*;

const SE: StructuringElement = StructuringElement { size: 3, iterations: 1 };

fn brute_erode(m: &BinaryMask, size: usize) -> Vec<bool> {
    let (h, w) = (m.height() as isize, m.width() as isize);
    let r = size as isize / 2;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut keep = true;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    keep &= yy >= 0 && xx >= 0 && yy < h && xx < w && m.get(yy as usize, xx as usize);
                }
            }
            out.push(keep);
        }
    }
    out
}

fn square(h: usize, w: usize, y0: usize, x0: usize, side: usize, label: u8) -> LabelMask {
    let mut m = LabelMask::zeros(h, w).unwrap();
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            m.set(y, x, label).unwrap();
        }
    }
    m
}

#[test]
fn square_blocks() {
    let m = square(5, 5, 1, 1, 3, LIVER);
    let e = erode(&m.select(&[LIVER]), SE).unwrap();
    assert_eq!(e.count(), 1);
    assert!(e.get(2, 2));
    let ring = boundary_mask(&m, LIVER, SE).unwrap();
    assert_eq!(ring.count(), 8);
    assert!(!ring.get(2, 2));

    let big = square(12, 12, 1, 1, 10, LIVER);
    assert_eq!(erode(&big.select(&[LIVER]), SE).unwrap().count(), 64);
    assert_eq!(boundary_mask(&big, LIVER, SE).unwrap().count(), 36);
    assert_eq!(erode(&BinaryMask::empty(4, 4), SE).unwrap().count(), 0);
}

#[test]
fn single_pixel_and_thin_line_vanish() {
    let dot = square(5, 5, 2, 2, 1, TUMOR);
    assert_eq!(erode(&dot.select(&[TUMOR]), SE).unwrap().count(), 0);
    assert_eq!(boundary_mask(&dot, TUMOR, SE).unwrap().count(), 1);
    let mut line = LabelMask::zeros(5, 9).unwrap();
    for x in 1..8 {
        line.set(2, x, LIVER).unwrap();
    }
    assert_eq!(boundary_mask(&line, LIVER, SE).unwrap().count(), 7);
}

#[test]
fn liver_region_includes_tumor() {
    let mut m = square(9, 9, 1, 1, 7, LIVER);
    for y in 3..6 {
        for x in 3..6 {
            m.set(y, x, TUMOR).unwrap();
        }
    }
    // Tumor in the middle of the liver does not punch a hole in its boundary.
    assert_eq!(class_region(&m, LIVER).unwrap().count(), 49);
    assert_eq!(boundary_mask(&m, LIVER, SE).unwrap().count(), 24);
    assert_eq!(boundary_mask(&m, TUMOR, SE).unwrap().count(), 8);
}

#[test]
fn gated_refinement_rules() {
    let mut m = square(9, 9, 1, 1, 7, LIVER);
    m.set(4, 4, TUMOR).unwrap();
    let mut p = ProbMap::one_hot(&m).probs().to_vec();
    let at = |y: usize, x: usize| (y * 9 + x) * 3;
    // Weak liver edge pixel, confident liver edge pixel, weak interior pixel, weak tumor.
    p[at(1, 1)..at(1, 1) + 3].copy_from_slice(&[0.5, 0.5, 0.0]);
    p[at(1, 2)..at(1, 2) + 3].copy_from_slice(&[0.2, 0.8, 0.0]);
    p[at(3, 3)..at(3, 3) + 3].copy_from_slice(&[0.6, 0.4, 0.0]);
    p[at(4, 4)..at(4, 4) + 3].copy_from_slice(&[0.1, 0.4, 0.5]);
    let probs = ProbMap::new(9, 9, 3, p).unwrap();
    let out = refine(&m, &probs, MbrStrategy::ProbGated, 0.6, SE).unwrap();
    assert_eq!(out.refined.get(1, 1), 0);
    assert_eq!(out.refined.get(1, 2), LIVER);
    assert_eq!(out.refined.get(3, 3), LIVER);
    assert_eq!(out.refined.get(4, 4), LIVER);
    assert_eq!(refine(&m, &probs, MbrStrategy::EmitOnly, 0.6, SE).unwrap().refined, m);
    assert_eq!(refine(&m, &probs, MbrStrategy::Off, 0.6, SE).unwrap().refined, m);
}

#[test]
fn refine_rejects_bad_inputs() {
    let m = LabelMask::zeros(4, 4).unwrap();
    let p = ProbMap::one_hot(&m);
    for tau in [0.0, 1.0, -0.1, f32::NAN] {
        assert!(refine(&m, &p, MbrStrategy::ProbGated, tau, SE).is_err());
    }
    let other = ProbMap::one_hot(&LabelMask::zeros(4, 5).unwrap());
    assert!(refine(&m, &other, MbrStrategy::ProbGated, 0.5, SE).is_err());
    assert!(erode(&BinaryMask::empty(3, 3), StructuringElement { size: 4, iterations: 1 }).is_err());
}

fn label_grid(h: usize, w: usize) -> impl Strategy<Value = LabelMask> {
    prop::collection::vec(0u8..3, h * w).prop_map(move |v| LabelMask::new(h, w, v).unwrap())
}

fn prob_grid(h: usize, w: usize) -> impl Strategy<Value = ProbMap> {
    prop::collection::vec((0.0f32..1.0, 0.0f32..1.0, 0.0f32..1.0), h * w).prop_map(move |v| {
        let p = v
            .into_iter()
            .flat_map(|(a, b, c)| {
                let s = a + b + c + 1e-3;
                [a / s, b / s, c / s]
            })
            .collect();
        ProbMap::new(h, w, 3, p).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn erosion_matches_brute_force(
        bits in prop::collection::vec(prop::bool::weighted(0.8), 12 * 10), size in prop::sample::select(vec![1usize, 3, 5])
    ) {
        let m = BinaryMask::new(12, 10, bits).unwrap();
        let e = erode(&m, StructuringElement { size, iterations: 1 }).unwrap();
        let expected = brute_erode(&m, size);
        prop_assert_eq!(e.bits(), expected.as_slice());
        prop_assert!(e.is_subset_of(&m));
    }

    #[test]
    fn boundary_and_eroded_partition_region(m in label_grid(10, 10)) {
        for class in [LIVER, TUMOR] {
            let region = class_region(&m, class).unwrap();
            let eroded = erode(&region, SE).unwrap();
            let boundary = boundary_mask(&m, class, SE).unwrap();
            prop_assert_eq!(boundary.and(&eroded).unwrap().count(), 0);
            prop_assert_eq!(boundary.count() + eroded.count(), region.count());
        }
    }

    #[test]
    fn refinement_only_touches_boundary(m in label_grid(8, 9), p in prob_grid(8, 9), tau in 0.05f32..0.95) {
        let out = refine(&m, &p, MbrStrategy::ProbGated, tau, SE).unwrap();
        for i in 0..72 {
            let (before, after) = (m.labels()[i], out.refined.labels()[i]);
            if !out.boundary.bits()[i] {
                prop_assert_eq!(before, after);
            } else {
                prop_assert!(after == before || after + 1 == before);
            }
        }
        // Eroded tumor always sits inside eroded liver.
        let t = out.classes[1].eroded.clone();
        prop_assert!(t.is_subset_of(&out.classes[0].eroded));
        prop_assert!(out.refined.select(&[TUMOR]).is_subset_of(&m.select(&[TUMOR])));
    }
}
