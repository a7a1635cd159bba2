use proptest::prelude::*;
use rnn2ds::checkpoint::{decode_raw, encode_raw, RawCheckpoint};
use rnn2ds::tensor::{
    bicubic_resize, conv2d, log_softmax, max_pool_spatial, mean_pool_spatial, softmax, subregion_mean_pool, Region,
    Tensor,
};
use rnn2ds::training::{bleu4, rouge_l};

fn tensor3() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(c, h, w)| {
        prop::collection::vec(-5.0f64..5.0, c * h * w).prop_map(move |d| Tensor::new(&[c, h, w], d).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let n = v.len();
        let p = softmax(&Tensor::new(&[n], v.clone()).unwrap()).unwrap();
        prop_assert!((p.sum() - 1.0).abs() < 1e-9);
        prop_assert!(p.data().iter().all(|&x| x >= 0.0));
        let lp = log_softmax(&Tensor::new(&[n], v).unwrap()).unwrap();
        for (a, b) in p.data().iter().zip(lp.data()) {
            prop_assert!((a.ln() - b).abs() < 1e-9 || *a == 0.0);
        }
    }

    #[test]
    fn pools_are_bounded_by_extremes(t in tensor3()) {
        let mean = mean_pool_spatial(&t).unwrap();
        let max = max_pool_spatial(&t).unwrap();
        for (m, x) in mean.data().iter().zip(max.data()) {
            prop_assert!(m <= &(x + 1e-12));
        }
    }

    #[test]
    fn subregion_pool_of_single_cell_is_that_cell(t in tensor3(), sy in 0usize..6, sx in 0usize..6) {
        let (c, h, w) = t.dims3().unwrap();
        let (y, x) = (sy % h + 1, sx % w + 1);
        let p = subregion_mean_pool(&t, Region::new(x, y, x, y)).unwrap();
        for ch in 0..c {
            prop_assert_eq!(p.data()[ch], t.get(&[ch, y - 1, x - 1]).unwrap());
        }
    }

    #[test]
    fn identity_kernel_conv_is_identity(t in tensor3()) {
        let c = t.shape()[0];
        let mut k = Tensor::zeros(&[c, c, 3, 3]);
        for i in 0..c {
            k.set(&[i, i, 1, 1], 1.0).unwrap();
        }
        let y = conv2d(&t, &k, &Tensor::zeros(&[c]), 1).unwrap();
        prop_assert_eq!(y, t);
    }

    #[test]
    fn same_size_bicubic_is_identity(t in tensor3()) {
        let (_, h, w) = t.dims3().unwrap();
        let plane = t.channel(0).unwrap();
        let r = bicubic_resize(&plane, (h, w)).unwrap();
        for (a, b) in r.data().iter().zip(plane.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_are_unit_interval_and_perfect_on_self(
        sents in prop::collection::vec(prop::collection::vec(0u8..6, 1..10), 1..6)
    ) {
        let refs: Vec<Vec<Vec<u8>>> = sents.iter().map(|s| vec![s.clone()]).collect();
        let r = rouge_l(&sents, &refs).unwrap();
        prop_assert!((r - 1.0).abs() < 1e-12);
        let b = bleu4(&sents, &refs).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
        if sents.iter().all(|s| s.len() >= 4) {
            prop_assert!((b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn raw_checkpoints_round_trip(
        tensors in prop::collection::btree_map("[a-z.]{1,12}", prop::collection::vec(-1e3f32..1e3, 1..20), 0..5),
        metadata in ".{0,40}"
    ) {
        let raw = RawCheckpoint {
            tensors: tensors.into_iter().map(|(n, d)| (n, Tensor::new(&[d.len()], d).unwrap())).collect(),
            metadata,
        };
        prop_assert_eq!(decode_raw(&encode_raw(&raw)).unwrap(), raw);
    }
}
