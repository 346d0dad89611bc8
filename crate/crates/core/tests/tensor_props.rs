use add_core::{Conv2dSpec, Graph, PoolKind, Tensor};
use proptest::prelude::*;

fn tensor(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_f64(shape, &data[..n]).unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..12, data in values(72), shift in -50.0f64..50.0) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(tensor(&[rows, cols], &data));
        let p = g.softmax(x, 1).unwrap();
        let shifted: Vec<f64> = data[..rows * cols].iter().map(|v| v + shift).collect();
        let xs = g.constant(tensor(&[rows, cols], &shifted));
        let ps = g.softmax(xs, 1).unwrap();
        for (r, row) in g.value(p).data().chunks(cols).enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            for (a, b) in row.iter().zip(&g.value(ps).data()[r * cols..(r + 1) * cols]) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_is_linear_in_its_input(
        data in values(2 * 2 * 6 * 6),
        other in values(2 * 2 * 6 * 6),
        w in values(3 * 2 * 9),
        a in -2.0f64..2.0,
        stride in 1usize..3,
        dilation in 1usize..3,
    ) {
        let spec = Conv2dSpec::default().stride(stride).padding(dilation).dilation(dilation);
        let mut g = Graph::<f64>::new();
        let x = g.constant(tensor(&[2, 2, 6, 6], &data));
        let y = g.constant(tensor(&[2, 2, 6, 6], &other));
        let k = g.constant(tensor(&[3, 2, 3, 3], &w));
        let ax = g.scale(x, a).unwrap();
        let mix = g.add(ax, y).unwrap();
        let lhs = g.conv2d(mix, k, spec).unwrap();
        let cx = g.conv2d(x, k, spec).unwrap();
        let cy = g.conv2d(y, k, spec).unwrap();
        let acx = g.scale(cx, a).unwrap();
        let rhs = g.add(acx, cy).unwrap();
        for (l, r) in g.value(lhs).data().iter().zip(g.value(rhs).data()) {
            prop_assert!((l - r).abs() < 1e-10);
        }
    }

    #[test]
    fn pooling_respects_bounds(data in values(2 * 5 * 5), stride in 1usize..3) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(tensor(&[1, 2, 5, 5], &data));
        let mx = g.pool2d(x, PoolKind::Max, 3, stride, 1).unwrap();
        let av = g.pool2d(x, PoolKind::Avg, 3, stride, 1).unwrap();
        let (lo, hi) = data[..50].iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        for (&m, &a) in g.value(mx).data().iter().zip(g.value(av).data()) {
            prop_assert!(a <= m + 1e-12);
            prop_assert!(lo - 1e-12 <= a && m <= hi);
        }
    }

    #[test]
    fn bilinear_upsampling_keeps_corners_and_range(h in 1usize..5, w in 1usize..5, oh in 1usize..12, ow in 1usize..12, data in values(25)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(tensor(&[1, 1, h, w], &data));
        let y = g.bilinear_upsample(x, oh, ow).unwrap();
        let (xv, yv) = (g.value(x), g.value(y));
        let (lo, hi) = xv.data().iter().fold((f64::MAX, f64::MIN), |(l, u), &v| (l.min(v), u.max(v)));
        prop_assert!(yv.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        if oh > 1 && ow > 1 {
            prop_assert!((yv.at(&[0, 0, 0, 0]) - xv.at(&[0, 0, 0, 0])).abs() < 1e-12);
            prop_assert!((yv.at(&[0, 0, oh - 1, ow - 1]) - xv.at(&[0, 0, h - 1, w - 1])).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_of_sums_accumulate(data in values(12), reps in 1usize..4) {
        // d/dx of (x + x + ...)·c summed is reps·c everywhere.
        let mut g = Graph::<f64>::new();
        let x = g.leaf(tensor(&[3, 4], &data).with_requires_grad(true));
        let parts = vec![x; reps];
        let s = g.add_n(&parts).unwrap();
        let s = g.scale(s, 0.5).unwrap();
        let l = g.sum(s).unwrap();
        g.backward(l).unwrap();
        prop_assert!(g.grad(x).unwrap().iter().all(|&v| (v - 0.5 * reps as f64).abs() < 1e-12));
    }
}
