use dfpt::format::{decode, encode};
use dfpt::loaders::{parse_cifar, parse_idx_images, parse_idx_labels, CifarLayout};
use dfpt_core::models::{Blob, Checkpoint, CHECKPOINT_VERSION};
use dfpt_core::tensor::{DType, Tensor};
use proptest::prelude::*;

fn blob() -> impl Strategy<Value = Blob> {
    ("[a-z][a-z0-9_.]{0,12}", prop::collection::vec(1usize..4, 0..4), any::<bool>()).prop_flat_map(|(name, shape, wide)| {
        let n: usize = shape.iter().product();
        prop::collection::vec(-1e6..1e6f64, n).prop_map(move |v| {
            if wide {
                Blob::encode(&name, &Tensor::new(&shape, v).unwrap())
            } else {
                let v: Vec<f32> = v.iter().map(|&x| x as f32).collect();
                Blob::encode(&name, &Tensor::new(&shape, v).unwrap())
            }
        })
    })
}

fn checkpoint() -> impl Strategy<Value = Checkpoint> {
    (
        "[ -~]{0,20}",
        any::<u64>(),
        prop::collection::vec(("[a-z_]{1,8}", any::<f64>()), 0..4),
        prop::collection::vec(blob(), 0..4),
    )
        .prop_map(|(arch, seed, metrics, blobs)| Checkpoint {
            version: CHECKPOINT_VERSION,
            arch,
            seed,
            metrics,
            blobs,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn checkpoint_bytes_round_trip(ck in checkpoint()) {
        let bytes = encode(&ck);
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(encode(&back), bytes);
        for (a, b) in back.metrics.iter().zip(&ck.metrics) {
            prop_assert_eq!(a.1.to_bits(), b.1.to_bits());
        }
        for b in &back.blobs {
            prop_assert!(matches!(b.dtype, DType::F32 | DType::F64));
        }
    }

    #[test]
    fn every_strict_prefix_is_rejected(ck in checkpoint(), frac in 0.0..1.0f64) {
        let bytes = encode(&ck);
        let cut = (frac * bytes.len() as f64) as usize;
        prop_assert!(decode(&bytes[..cut]).is_err());
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode(&bytes);
        let _ = parse_idx_images(&bytes);
        let _ = parse_idx_labels(&bytes);
        let (mut im, mut lb) = (Vec::new(), Vec::new());
        let _ = parse_cifar(&bytes, CifarLayout::Cifar10, &mut im, &mut lb);
    }

    #[test]
    fn idx_pixels_stay_in_unit_range(px in prop::collection::vec(any::<u8>(), 1..64)) {
        let mut b = 0x0803u32.to_be_bytes().to_vec();
        for d in [1u32, 1, px.len() as u32] {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(&px);
        let (_, _, _, v) = parse_idx_images(&b).unwrap();
        prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        prop_assert!(v.iter().zip(&px).all(|(x, &p)| (*x * 255.0).round() as u8 == p));
    }
}
