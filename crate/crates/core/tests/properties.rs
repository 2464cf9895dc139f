use metaocc::model::{DeepSetsNet, NetConfig, PairedInstance};
use metaocc::numerics::{Matrix, Pooling};
use metaocc::train::predict_task;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn pooling() -> impl Strategy<Value = Pooling> {
    prop_oneof![Just(Pooling::Mean), Just(Pooling::Sum), Just(Pooling::Max)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn output_ignores_support_order(
        (n, k) in (1usize..6, 1usize..12),
        seed in any::<u64>(),
        pool in pooling(),
        shuffle in any::<u64>(),
    ) {
        let mut cfg = NetConfig::new(n, 8, 4, seed);
        cfg.pooling = pool;
        let net = DeepSetsNet::build(cfg).unwrap();
        let support = Matrix::from_vec(k, n, (0..k * n).map(|i| ((i as u64 ^ seed) % 97) as f64 / 20.0 - 2.4).collect()).unwrap();
        let query: Vec<f64> = (0..n).map(|i| i as f64 * 0.3 - 0.5).collect();
        let inst = PairedInstance::new(&support, &query, None, 0).unwrap();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by_key(|&i| (i as u64).wrapping_mul(shuffle | 1).rotate_left(17));
        let a = net.forward(&inst).unwrap();
        let b = net.forward(&inst.permuted(&order)).unwrap();
        prop_assert!((a.positive - b.positive).abs() < 1e-9);
        prop_assert!((a.positive + a.negative - 1.0).abs() < 1e-12);
    }

    #[test]
    fn predictions_are_per_query(
        support in matrix(5, 3),
        queries in matrix(7, 3),
        seed in any::<u64>(),
    ) {
        let net = DeepSetsNet::build(NetConfig::new(3, 8, 3, seed)).unwrap();
        let all = predict_task(&net, &support, &queries).unwrap();
        prop_assert_eq!(all.len(), 7);
        for (i, p) in all.iter().enumerate() {
            let one = Matrix::from_rows(&[queries.row(i).to_vec()]).unwrap();
            let alone = predict_task(&net, &support, &one).unwrap()[0];
            prop_assert!((alone.positive - p.positive).abs() < 1e-12);
        }
    }
}
