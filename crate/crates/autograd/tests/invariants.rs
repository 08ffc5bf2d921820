use cris_autograd::{Graph, Tensor};
use proptest::prelude::*;

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
    let (n, c, h, wd) = x.dims4();
    let (co, _, k, _) = w.dims4();
    let r = (k / 2) as isize;
    let mut out = vec![0.0; n * co * h * wd];
    for img in 0..n {
        for o in 0..co {
            for y in 0..h as isize {
                for xx in 0..wd as isize {
                    let mut s = b[o];
                    for i in 0..c {
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let (sy, sx) = (y + dy, xx + dx);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((img * c + i) * h + sy as usize) * wd + sx as usize];
                                let wv = w.data()[((o * c + i) * k + (dy + r) as usize) * k + (dx + r) as usize];
                                s += xv * wv;
                            }
                        }
                    }
                    out[((img * co + o) * h + y as usize) * wd + xx as usize] = s;
                }
            }
        }
    }
    out
}

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, len)
}

proptest! {
    #[test]
    fn conv_matches_direct_sum(
        (n, c, co, h, w, k) in (1usize..3, 1usize..4, 1usize..4, 1usize..7, 1usize..7, prop::sample::select(vec![1usize, 3, 5])),
        seed in any::<u64>(),
    ) {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let x = Tensor::from_vec(&[n, c, h, w], (0..n * c * h * w).map(|_| next()).collect());
        let wt = Tensor::from_vec(&[co, c, k, k], (0..co * c * k * k).map(|_| next()).collect());
        let b = Tensor::from_vec(&[co], (0..co).map(|_| next()).collect());
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.leaf(x.clone(), false), g.leaf(wt.clone(), false), g.leaf(b.clone(), false));
        let y = g.conv2d(xv, wv, Some(bv));
        let got = g.value(y);
        for (a, e) in got.data().iter().zip(naive_conv(&x, &wt, b.data())) {
            prop_assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn unpool_of_pool_keeps_one_max_per_window(data in values(2 * 4 * 6)) {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[1, 2, 4, 6], data.clone()), false);
        let (p, idx) = g.max_pool2x2(x);
        let u = g.max_unpool2x2(p, &idx);
        let out = g.value(u).data().to_vec();
        for plane in 0..2 {
            for i in 0..2 {
                for j in 0..3 {
                    let cells: Vec<usize> = [0, 1, 6, 7].iter().map(|o| plane * 24 + 12 * i + 2 * j + o).collect();
                    let max = cells.iter().map(|&q| data[q]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(cells.iter().filter(|&&q| out[q] != 0.0).all(|&q| out[q] == data[q] && data[q] == max));
                    prop_assert!(cells.iter().filter(|&&q| out[q] != 0.0).count() <= 1);
                    prop_assert_eq!(g.value(p).data()[(plane * 2 + i) * 3 + j], max);
                }
            }
        }
    }

    #[test]
    fn sum_of_scaled_input_has_constant_gradient(data in values(12), factor in -3.0f64..3.0) {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[1, 1, 3, 4], data), true);
        let y = g.scale(x, factor);
        let s = g.sum(y);
        let grads = g.backward(s);
        prop_assert!(grads.get(x).unwrap().data().iter().all(|&v| v == factor));
    }
}
