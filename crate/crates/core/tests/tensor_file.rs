use halo::io::{decode, encode_tensor, StoredTensor};
use halo::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn ten_thousand_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for i in 0..10_000 {
        let (r, c) = (rng.random_range(0..6), rng.random_range(0..6));
        let std = 10f64.powi(rng.random_range(-6..6));
        if i % 2 == 0 {
            let t = Tensor::<f32>::randn(r, c, std, &mut rng);
            match decode(&encode_tensor(&t)).unwrap() {
                StoredTensor::F32(back) => assert!(back.bitwise_eq(&t)),
                other => panic!("{other:?}"),
            }
        } else {
            let t = Tensor::<f64>::randn(r, c, std, &mut rng);
            match decode(&encode_tensor(&t)).unwrap() {
                StoredTensor::F64(back) => assert!(back.bitwise_eq(&t)),
                other => panic!("{other:?}"),
            }
        }
    }
}

proptest! {
    #[test]
    fn arbitrary_bit_patterns_round_trip(values in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 0..64), cols in 1usize..8) {
        let rows = values.len() / cols;
        let t = Tensor::<f32>::new(rows, cols, values[..rows * cols].to_vec()).unwrap();
        match decode(&encode_tensor(&t)).unwrap() {
            StoredTensor::F32(back) => prop_assert!(back.bitwise_eq(&t)),
            other => prop_assert!(false, "{:?}", other),
        }
    }

    #[test]
    fn garbage_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..80)) {
        let _ = decode(&bytes);
        let mut framed = b"HALT\x01\0\0\0".to_vec();
        framed.extend(&bytes);
        let _ = decode(&framed);
    }
}
