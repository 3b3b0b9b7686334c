use dkm::autodiff::softmax_rows;
use dkm::compression::{
    empirical_entropy, pack_indices, reshape_to_subvectors, serialized_size, unpack_indices, CompressedLayer,
    HEADER_SIZE,
};
use dkm::matrix::{DMatrix, Matrix};
use dkm::{DkmError, FormatError};
use proptest::prelude::*;

fn layer_strategy() -> impl Strategy<Value = CompressedLayer> {
    (1u8..=8, 1u16..=16, 1u64..=1000).prop_flat_map(|(bits, dim, n)| {
        let k = 1usize << bits;
        let count = (n as usize).div_ceil(dim as usize);
        (prop::collection::vec(-1e3f32..1e3, k * dim as usize), prop::collection::vec(0u32..(1u32 << bits), count))
            .prop_map(move |(codebook, indices)| CompressedLayer {
                bits,
                dim,
                original_length: n,
                pad_count: (count * dim as usize - n as usize) as u16,
                codebook: Matrix::from_vec(k, dim as usize, codebook).unwrap(),
                indices,
            })
    })
}

proptest! {
    #[test]
    fn reshape_round_trip(flat in prop::collection::vec(-10.0f64..10.0, 1..300), d in 1usize..20) {
        let w = reshape_to_subvectors(&flat, d).unwrap();
        prop_assert_eq!(w.count(), flat.len().div_ceil(d));
        prop_assert!(w.pad_count() < d);
        prop_assert_eq!(w.flatten(), flat);
    }

    #[test]
    fn serialize_round_trip_is_bit_exact(layer in layer_strategy()) {
        let bytes = layer.to_bytes().unwrap();
        let expected = HEADER_SIZE
            + 4 * (1usize << layer.bits) * layer.dim as usize
            + (layer.indices.len() * layer.bits as usize).div_ceil(8);
        prop_assert_eq!(bytes.len(), expected);
        prop_assert_eq!(bytes.len(), serialized_size(layer.bits as u32, layer.dim as usize, layer.original_length as usize));
        let back = CompressedLayer::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back, layer);
    }

    #[test]
    fn every_strict_prefix_is_rejected(layer in layer_strategy(), cut in 0.0f64..1.0) {
        let bytes = layer.to_bytes().unwrap();
        let len = (bytes.len() as f64 * cut) as usize;
        prop_assert!(CompressedLayer::from_bytes(&bytes[..len]).is_err());
    }

    #[test]
    fn pack_unpack_inverse(bits in 1u32..=16, raw in prop::collection::vec(any::<u32>(), 0..200)) {
        let idx: Vec<u32> = raw.iter().map(|v| v & ((1u32 << bits) - 1)).collect();
        let packed = pack_indices(&idx, bits);
        prop_assert_eq!(packed.len(), (idx.len() * bits as usize).div_ceil(8));
        prop_assert_eq!(unpack_indices(&packed, bits, idx.len()), idx);
    }

    #[test]
    fn entropy_never_exceeds_bits(bits in 1u32..=8, raw in prop::collection::vec(any::<usize>(), 1..500)) {
        let idx: Vec<usize> = raw.iter().map(|v| v % (1usize << bits)).collect();
        let h = empirical_entropy(&idx, bits).unwrap();
        prop_assert!((0.0..=bits as f64).contains(&h));
    }

    #[test]
    fn softmax_rows_are_distributions(
        vals in prop::collection::vec(-50.0f64..50.0, 12),
        tau in 0.01f64..10.0,
        shift in -100.0f64..100.0,
    ) {
        let x = DMatrix::from_vec(3, 4, vals).unwrap();
        let s = softmax_rows(&x, tau);
        for row in s.row_iter() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let shifted = softmax_rows(&x.map(|v| v + shift), tau);
        prop_assert!(s.max_abs_diff(&shifted).unwrap() < 1e-12);
    }
}

#[test]
fn uniform_assignments_have_full_entropy() {
    for bits in 1..=10u32 {
        let k = 1usize << bits;
        let idx: Vec<usize> = (0..k * 3).map(|i| i % k).collect();
        assert_eq!(empirical_entropy(&idx, bits).unwrap(), bits as f64);
    }
}

#[test]
fn format_errors_are_distinguished() {
    let layer = CompressedLayer {
        bits: 2,
        dim: 1,
        original_length: 5,
        pad_count: 0,
        codebook: Matrix::from_vec(4, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap(),
        indices: vec![0, 1, 2, 3, 0],
    };
    let bytes = layer.to_bytes().unwrap();
    assert_eq!(bytes.len(), 18 + 16 + 2);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(CompressedLayer::from_bytes(&bad), Err(FormatError::BadMagic(_))));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(CompressedLayer::from_bytes(&bad), Err(FormatError::UnsupportedVersion(9))));
    assert!(matches!(CompressedLayer::from_bytes(&bytes[..20]), Err(FormatError::Truncated { .. })));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(CompressedLayer::from_bytes(&long), Err(FormatError::TrailingBytes { extra: 1 })));

    let err: DkmError = CompressedLayer::from_bytes(&bytes[..3]).unwrap_err().into();
    assert_eq!(err.class(), "format-truncated");
}
