use amar::autodiff::Graph;
use amar::csi::{split_dataset, split_sizes, write_csit, CsiSample, CsitReader};
use amar::matching::{build_cost_matrix, hungarian, matching_loss, pad_targets};
use amar::metrics::{count_confusion, evaluate, label_counts, standardize};
use amar::rvq::{
    deserialize_indices, frame_len, parse_frame_header, rvq_decode, rvq_encode, serialize_indices,
};
use amar::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn probs(n_q: usize, classes: usize, raw: &[f64]) -> Vec<f64> {
    raw.chunks(classes)
        .take(n_q)
        .flat_map(|row| {
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            row.iter().map(move |x| x.exp() / z).collect::<Vec<_>>()
        })
        .collect()
}

fn instance() -> impl Strategy<Value = (Vec<u8>, usize, usize, Vec<f64>)> {
    (2usize..7, 1usize..9).prop_flat_map(|(n_q, n_act)| {
        (
            prop::collection::vec(1..=n_act as u8, 0..=n_q),
            Just(n_q),
            Just(n_act),
            prop::collection::vec(-4.0f64..4.0, n_q * (n_act + 1)),
        )
    })
}

fn counts(n_act: usize) -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..4, n_act)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn assignment_is_a_permutation_no_worse_than_identity(
        n in 1usize..9,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::<f64>::uniform(&[n, n], 1.0, &mut rng);
        let cost: Vec<Vec<f64>> = (0..n).map(|i| t.row(i).to_vec()).collect();
        let a = hungarian(&cost).unwrap();
        let mut seen = a.perm.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let identity: f64 = (0..n).map(|i| cost[i][i]).sum();
        prop_assert!(a.cost <= identity + 1e-12);
    }

    #[test]
    fn matching_loss_ignores_label_order((labels, n_q, n_act, raw) in instance()) {
        let p = probs(n_q, n_act + 1, &raw);
        let t = pad_targets(&labels, n_q, n_act).unwrap();
        let mut rev = labels.clone();
        rev.reverse();
        let r = pad_targets(&rev, n_q, n_act).unwrap();
        let (a, _) = matching_loss(&t, &p, n_act + 1).unwrap();
        let (b, _) = matching_loss(&r, &p, n_act + 1).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn matching_loss_is_the_assigned_cost((labels, n_q, n_act, raw) in instance()) {
        let p = probs(n_q, n_act + 1, &raw);
        let t = pad_targets(&labels, n_q, n_act).unwrap();
        let (loss, a) = matching_loss(&t, &p, n_act + 1).unwrap();
        let cost = build_cost_matrix(&t, &p, n_act + 1).unwrap();
        let direct: f64 = a.perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        prop_assert!((loss - direct).abs() <= 1e-9 * direct.max(1.0));
    }

    #[test]
    fn standardized_counts_total_the_non_empty_queries(
        n_act in 1usize..10,
        seed in any::<u64>(),
        n_q in 1usize..10,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<Option<u8>> = (0..n_q)
            .map(|_| rng.gen_bool(0.6).then(|| rng.gen_range(1..=n_act as u8)))
            .collect();
        let c = standardize(&q, n_act).unwrap();
        prop_assert_eq!(c.iter().sum::<u32>() as usize, q.iter().flatten().count());
        let labels: Vec<u8> = q.iter().flatten().copied().collect();
        prop_assert_eq!(label_counts(&labels, n_act).unwrap(), c);
    }

    #[test]
    fn confusion_accounts_for_every_person(y in counts(9), shift in counts(9)) {
        let p: Vec<u32> = y.iter().zip(&shift).map(|(a, b)| (a + b) % 4).collect();
        for (a, c) in count_confusion(&y, &p).iter().enumerate() {
            prop_assert_eq!(c.tp + c.fn_, y[a]);
            prop_assert_eq!(c.tp + c.fp, p[a]);
        }
    }

    #[test]
    fn metrics_stay_in_range(
        truth in prop::collection::vec(counts(4), 1..20),
        noise in prop::collection::vec(counts(4), 20),
    ) {
        let pred: Vec<Vec<u32>> = truth.iter().zip(&noise).map(|(y, n)| {
            y.iter().zip(n).map(|(a, b)| (a + b) % 3).collect()
        }).collect();
        let r = evaluate(&truth, &pred, false).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.pps));
        prop_assert!(r.oce >= 0.0);
        for v in r.precision.iter().chain(&r.recall).chain(&r.f1) {
            prop_assert!((0.0..=1.0).contains(v));
        }
        let same = evaluate(&truth, &truth, false).unwrap();
        prop_assert_eq!(same.pps, 1.0);
        prop_assert_eq!(same.oce, 0.0);
    }

    #[test]
    fn token_frames_round_trip(
        log2k in 1u8..=8,
        layers in 1usize..6,
        len in 1usize..64,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx: Vec<Vec<u16>> = (0..layers)
            .map(|_| (0..len).map(|_| rng.gen_range(0..1u16 << log2k)).collect())
            .collect();
        let bytes = serialize_indices(&idx, log2k).unwrap();
        prop_assert_eq!(bytes.len(), frame_len(len, layers, log2k));
        let h = parse_frame_header(&bytes).unwrap();
        prop_assert_eq!(h.frame_len(), bytes.len());
        let f = deserialize_indices(&bytes).unwrap();
        prop_assert_eq!(f.indices, idx);
        let mut bad = bytes.clone();
        let i = rng.gen_range(12..bad.len());
        bad[i] ^= 1 << rng.gen_range(0..8);
        prop_assert!(deserialize_indices(&bad).is_err());
    }

    #[test]
    fn quantized_plus_residual_is_the_input(
        layers in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let books: Vec<Tensor<f64>> = (0..layers).map(|_| Tensor::randn(&[8, 5], 1.0, &mut rng)).collect();
        let z = Tensor::<f64>::randn(&[11, 5], 1.0, &mut rng);
        let e = rvq_encode(&z, &books, |_, _| false).unwrap();
        for ((a, q), r) in z.data().iter().zip(e.quantized.data()).zip(e.residual.data()) {
            prop_assert!((a - q - r).abs() < 1e-12);
        }
        let d = rvq_decode(&e.dense_indices().unwrap(), &books).unwrap();
        prop_assert_eq!(d.data(), e.quantized.data());
    }

    #[test]
    fn splits_partition_the_dataset(n in 0usize..300, a in 0.0f64..1.0, b in 0.0f64..1.0, seed in any::<u64>()) {
        let train = a;
        let val = (1.0 - a) * b;
        let fr = [train, val, 1.0 - train - val];
        let sizes = split_sizes(n, fr).unwrap();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        let (x, y, z) = split_dataset((0..n).collect::<Vec<_>>(), fr, seed).unwrap();
        prop_assert_eq!([x.len(), y.len(), z.len()], sizes);
        let mut all: Vec<usize> = x.into_iter().chain(y).chain(z).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn csit_files_round_trip(
        shapes in prop::collection::vec((1usize..6, 1usize..4, prop::collection::vec(1u8..=9, 0..=5)), 0..6),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<CsiSample> = shapes
            .into_iter()
            .map(|(t, c, labels)| CsiSample { amplitude: Tensor::<f32>::uniform(&[t, c], 1.0, &mut rng).map(f32::abs), labels })
            .collect();
        let mut buf = Vec::new();
        write_csit(&mut buf, &samples, 9, 5).unwrap();
        let back: Vec<CsiSample> = CsitReader::new(&buf[..]).unwrap().collect::<Result<_, _>>().unwrap();
        prop_assert_eq!(back, samples);
        let cut = &buf[..buf.len() - 1];
        let truncated = CsitReader::new(cut).and_then(|r| r.collect::<Result<Vec<_>, _>>());
        prop_assert!(truncated.is_err());
    }

    #[test]
    fn reshape_keeps_data_and_softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::<f64>::randn(&[rows, cols], 3.0, &mut rng);
        let flat = t.reshape(&[rows * cols]).unwrap();
        prop_assert_eq!(flat.data(), t.data());
        prop_assert!(t.reshape(&[rows * cols + 1]).is_err());
        let mut g = Graph::new();
        let v = g.constant(t);
        let s = g.softmax_last(v).unwrap();
        for r in 0..rows {
            let sum: f64 = g.value(s).row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
