use proptest::prelude::*;
use seqhtr_tensor::{clip_by_global_norm, Graph, Tensor};

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        vals in prop::collection::vec(-30.0f64..30.0, 1..40),
    ) {
        let cols = vals.len().div_ceil(rows).max(1);
        let mut data = vals.clone();
        data.resize(rows * cols, 0.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let s = g.softmax(x, None).unwrap();
        for row in g.value(s).data().chunks(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn clipped_norm_never_exceeds_threshold(
        a in prop::collection::vec(-100.0f64..100.0, 0..20),
        b in prop::collection::vec(-100.0f64..100.0, 0..20),
    ) {
        let (mut a, mut b) = (a, b);
        let before = clip_by_global_norm([a.as_mut_slice(), b.as_mut_slice()], 4.0);
        let after = a.iter().chain(&b).map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(after <= 4.0 + 1e-6);
        if before <= 4.0 {
            prop_assert!((after - before).abs() < 1e-12);
        }
    }
}
