//! Property tests for the wire codec: round-trip identity under randomized
//! messages, and decode never panics on arbitrary or corrupted bytes.

use proptest::prelude::*;

use splitfed::protocol::{decode, encode, Message, SyncDirection};
use splitfed::sparse::SparseCutTensor;
use splitfed::tensor::Tensor;

fn arb_dense() -> impl Strategy<Value = Tensor> {
    (1usize..=4)
        .prop_flat_map(|rank| prop::collection::vec(1usize..5, rank))
        .prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            prop::collection::vec(-100.0f32..100.0, n)
                .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
        })
}

fn arb_sparse() -> impl Strategy<Value = SparseCutTensor> {
    (1usize..=3)
        .prop_flat_map(|rank| prop::collection::vec(1usize..6, rank))
        .prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            // random subset of flat indices, kept sorted and unique
            (prop::collection::btree_set(0..n as u32, 0..=n), Just(shape))
        })
        .prop_flat_map(|(indices, shape)| {
            let indices: Vec<u32> = indices.into_iter().collect();
            let count = indices.len();
            prop::collection::vec(-10.0f32..10.0, count).prop_map(move |values| SparseCutTensor {
                shape: shape.clone(),
                indices: indices.clone(),
                values,
            })
        })
}

fn arb_message() -> impl Strategy<Value = Message> {
    let header = (any::<u32>(), any::<u32>());
    prop_oneof![
        (header, arb_sparse()).prop_map(|((round, client_id), tensor)| {
            Message::ForwardActivation { round, client_id, tensor }
        }),
        (header, arb_sparse()).prop_map(|((round, client_id), tensor)| {
            Message::ActivationGradient { round, client_id, tensor }
        }),
        (header, arb_dense()).prop_map(|((round, client_id), tensor)| {
            Message::DenseActivation { round, client_id, tensor }
        }),
        (header, arb_dense()).prop_map(|((round, client_id), tensor)| {
            Message::DenseGradient { round, client_id, tensor }
        }),
        (header, any::<bool>(), prop::collection::vec(arb_dense(), 0..4)).prop_map(
            |((round, client_id), up, tensors)| Message::ModelSync {
                direction: if up { SyncDirection::Up } else { SyncDirection::Down },
                round,
                client_id,
                tensors,
            }
        ),
        any::<u8>().prop_map(|code| Message::Control { code }),
    ]
}

proptest! {
    #[test]
    fn round_trip_identity(msg in arb_message()) {
        let bytes = encode(&msg).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(msg, back);
    }

    #[test]
    fn decode_never_panics_on_arbitrary_bytes(bytes in prop::collection::vec(any::<u8>(), 0..512)) {
        let _ = decode(&bytes);
    }

    #[test]
    fn decode_never_panics_on_corrupted_frames(
        msg in arb_message(),
        cut in any::<prop::sample::Index>(),
        flip in any::<prop::sample::Index>(),
        patch in any::<u8>(),
    ) {
        let good = encode(&msg).unwrap();

        // truncation at any point must error, not panic
        let cut_at = cut.index(good.len());
        if cut_at < good.len() {
            prop_assert!(decode(&good[..cut_at]).is_err());
        }

        // a single mutated byte must decode cleanly or error, never panic
        let mut bad = good.clone();
        let at = flip.index(bad.len());
        bad[at] = patch;
        let _ = decode(&bad);
    }
}
