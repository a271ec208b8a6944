use proptest::prelude::*;
use tensor_core::Tensor;

proptest! {
    #[test]
    fn sspt_roundtrip_preserves_shape_and_bits(
        shape in prop::collection::vec(1usize..5, 0..4),
        seed in any::<u64>(),
    ) {
        let n: usize = shape.iter().product();
        let mut state = seed;
        let data: Vec<f64> = (0..n).map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            // mix of magnitudes, incl. negatives and exact zero
            match state % 5 {
                0 => 0.0,
                1 => (state >> 12) as f64 * 1e-9,
                2 => -((state >> 40) as f64),
                3 => f64::from_bits(0x3ff0_0000_0000_0000 | (state >> 14)),
                _ => (state as i64) as f64 / 1e6,
            }
        }).collect();
        let t = Tensor::new(shape, data).unwrap();
        let mut buf = Vec::new();
        t.write_sspt(&mut buf).unwrap();
        let back = Tensor::read_sspt(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        let same_bits = back
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same_bits);
    }
}
