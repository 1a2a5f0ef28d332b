use std::path::Path;

use proptest::prelude::*;
use stnet_core::detection::{giou, hungarian_match, iou, CostMatrix, GroundTruth};
use stnet_core::numerics::Tensor;
use stnet_core::oracle;
use stnet_core::synthdata::{decode_tensor, encode_tensor, format_annotations, parse_annotations};

fn unit_box() -> impl Strategy<Value = [f64; 4]> {
    (0.1..0.9f64, 0.1..0.9f64, 0.02..0.5f64, 0.02..0.5f64).prop_map(|(x, y, w, h)| [x, y, w, h])
}

fn inside_box() -> impl Strategy<Value = [f64; 4]> {
    (0.25..0.75f64, 0.25..0.75f64, 0.02..0.5f64, 0.02..0.5f64).prop_map(|(x, y, w, h)| [x, y, w, h])
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn giou_is_symmetric_and_below_iou(a in unit_box(), b in unit_box()) {
        let (g, h) = (giou(&a, &b).unwrap(), giou(&b, &a).unwrap());
        prop_assert!((g - h).abs() < 1e-12);
        prop_assert!(g > -1.0 && g <= iou(&a, &b) + 1e-12);
    }

    #[test]
    fn hungarian_matches_brute_force(
        rows in 1usize..6,
        cols in 1usize..6,
        seed in prop::collection::vec(0.0..10.0f64, 36),
    ) {
        let cost = CostMatrix::new(rows, cols, seed[..rows * cols].to_vec()).unwrap();
        let m = hungarian_match(&cost);
        prop_assert_eq!(m.pairs.len(), rows.min(cols));
        let summed: f64 = m.pairs.iter().map(|&(r, c)| cost.at(r, c)).sum();
        prop_assert!((summed - m.total_cost).abs() < 1e-9);
        prop_assert!((m.total_cost - oracle::assignment_cost(&cost)).abs() < 1e-9);
    }

    #[test]
    fn tensor_bytes_round_trip(dims in prop::collection::vec(1usize..5, 1..4), fill in -1e3..1e3f32) {
        let t = Tensor::<f32>::from_fn(&dims, |i| fill * i as f32);
        let back = decode_tensor(&encode_tensor(&t), Path::new("t.bin")).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn annotations_round_trip(frames in prop::collection::vec(prop::collection::vec((inside_box(), 0usize..2), 0..3), 1..5)) {
        let anns: Vec<GroundTruth> = frames
            .iter()
            .map(|f| GroundTruth::new(f.iter().map(|p| p.0).collect(), f.iter().map(|p| p.1).collect()).unwrap())
            .collect();
        let text = format_annotations(&anns);
        let back = parse_annotations(&text, anns.len(), Path::new("a.txt")).unwrap();
        prop_assert_eq!(back.len(), anns.len());
        for (b, a) in back.iter().zip(&anns) {
            prop_assert_eq!(&b.labels, &a.labels);
            for (x, y) in b.boxes.iter().flatten().zip(a.boxes.iter().flatten()) {
                prop_assert!((x - y).abs() <= 5e-6 * y.abs());
            }
        }
    }
}
