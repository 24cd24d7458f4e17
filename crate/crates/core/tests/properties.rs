use lficam::attention::AttentionMap;
use lficam::data::{decode_packed, encode_packed, generate_synthetic_blobs};
use lficam::stability::{iou, threshold_cam, BinaryMask};
use lficam::tensor::softmax_rows;
use lficam::Tensor;
use proptest::prelude::*;

fn mask(bits: Vec<bool>) -> BinaryMask {
    BinaryMask::new(4, 4, bits).unwrap()
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(row in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let p = softmax_rows(&row, row.len());
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in prop::collection::vec(any::<bool>(), 16), b in prop::collection::vec(any::<bool>(), 16)) {
        let (a, b) = (mask(a), mask(b));
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn higher_threshold_never_grows_the_mask(vals in prop::collection::vec(0.0f32..1.0, 4), lo in 0u8..255, step in 1u8..=255) {
        let t = Tensor::new(&[1, 2, 2], vals).unwrap();
        let cam = AttentionMap { raw: t.clone(), normalized: t };
        let hi = lo.saturating_add(step);
        let a = threshold_cam(&cam, lo, 8, 8);
        let b = threshold_cam(&cam, hi, 8, 8);
        prop_assert!(a.bits().iter().zip(b.bits()).all(|(&x, &y)| x || !y));
    }
}

#[test]
fn packed_dataset_round_trips_byte_exactly() {
    let data = generate_synthetic_blobs(12, 16, 16, 3).unwrap();
    let bytes = encode_packed(&data).unwrap();
    let back = decode_packed(&bytes).unwrap();
    assert_eq!(encode_packed(&back).unwrap(), bytes);
    for (a, b) in back.items.iter().zip(&data.items) {
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.label, b.label);
    }
}
