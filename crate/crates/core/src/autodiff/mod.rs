//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.

mod graph;
mod ops;

pub mod gradcheck;

pub use graph::{Ctx, GradSink, Gradients, Graph, Var};
pub use ops::{sigmoid, softplus, Activation};

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_inputs, GradCheck};
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn assert_ok(report: GradCheck) {
        assert!(
            report.max_rel_error < 1e-6,
            "gradient mismatch: {report:?}"
        );
    }

    /// Contract the output with a fixed random weighting so every output
    /// element contributes to the scalar being differentiated.
    fn contract(g: &mut Graph<'_, f64>, y: Var) -> Var {
        let n = g.value(y).len();
        let w = Tensor::from_fn([n], |i| ((i as f64) * 0.731).sin() + 0.3);
        let wv = g.constant(w);
        let flat = g.reshape(y, [n]);
        let p = g.mul(flat, wv);
        g.sum(p)
    }

    #[test]
    fn matmul_all_transpose_flags() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = rand_tensor(&mut rng, if ta { &[4, 3] } else { &[3, 4] });
            let b = rand_tensor(&mut rng, if tb { &[5, 4] } else { &[4, 5] });
            assert_ok(check_inputs(vec![a, b], 1e-5, |g, v| {
                let y = g.matmul_t(v[0], ta, v[1], tb);
                contract(g, y)
            }));
        }
    }

    #[test]
    fn elementwise_and_bias_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let y = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4]);
        let c = rand_tensor(&mut rng, &[3]);
        assert_ok(check_inputs(vec![x, y, b, c], 1e-5, |g, v| {
            let s = g.add(v[0], v[1]);
            let d = g.sub(s, v[1]);
            let m = g.mul(d, v[1]);
            let rb = g.add_row_bias(m, v[2]);
            let cb = g.add_channel_bias(rb, v[3]);
            let sc = g.scale(cb, 0.7);
            let sh = g.add_scalar(sc, 0.2);
            contract(g, sh)
        }));
    }

    #[test]
    fn activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for act in [
            Activation::Gelu,
            Activation::Silu,
            Activation::Sigmoid,
            Activation::Tanh,
            Activation::Softplus,
            Activation::Exp,
            Activation::Square,
        ] {
            let x = rand_tensor(&mut rng, &[10]);
            assert_ok(check_inputs(vec![x], 1e-5, |g, v| {
                let y = g.activation(v[0], act);
                contract(g, y)
            }));
        }
        let x = Tensor::from_fn([6], |i| 0.2 + i as f64);
        assert_ok(check_inputs(vec![x], 1e-6, |g, v| {
            let y = g.activation(v[0], Activation::Sqrt);
            contract(g, y)
        }));
    }

    #[test]
    fn shape_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[3, 6]);
        let y = rand_tensor(&mut rng, &[3, 2]);
        assert_ok(check_inputs(vec![x, y], 1e-5, |g, v| {
            let t = g.transpose(v[0]);
            let t = g.transpose(t);
            let a = g.slice_cols(t, 1, 3);
            let cat = g.concat_cols(&[a, v[1], a]);
            let r = g.reshape(cat, [8, 3]);
            let s = g.slice_leading(r, 2, 4);
            let gathered = g.gather(s, vec![0, 5, 5, 11]);
            let m = g.mean(gathered);
            let sq = g.activation(s, Activation::Square);
            let tot = g.sum(sq);
            g.add(m, tot)
        }));
    }

    #[test]
    fn mean_std_and_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[7]);
        assert_ok(check_inputs(vec![x], 1e-5, |g, v| {
            let ms = g.mean_std(v[0]);
            contract(g, ms)
        }));
        let x = rand_tensor(&mut rng, &[4, 5]);
        assert_ok(check_inputs(vec![x], 1e-5, |g, v| {
            let p = g.softmax_rows(v[0]);
            contract(g, p)
        }));
    }

    #[test]
    fn mean_std_of_constant_has_zero_std_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full([3], 0.5));
        let ms = g.mean_std(x);
        assert_eq!(g.value(ms).data()[1], 0.0);
        let s = g.sum(ms);
        let grads = g.backward(s);
        let gx = grads.wrt(x).unwrap();
        assert!(gx.data().iter().all(|v| v.is_finite()));
        for &v in gx.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[3, 6]);
        let gm = rand_tensor(&mut rng, &[6]);
        let bt = rand_tensor(&mut rng, &[6]);
        assert_ok(check_inputs(vec![x, gm, bt], 1e-5, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
            contract(g, y)
        }));
        let x = rand_tensor(&mut rng, &[4, 3, 3]);
        let gm = rand_tensor(&mut rng, &[4]);
        let bt = rand_tensor(&mut rng, &[4]);
        assert_ok(check_inputs(vec![x, gm, bt], 1e-5, |g, v| {
            let y = g.group_norm(v[0], 2, v[1], v[2], 1e-5);
            contract(g, y)
        }));
    }

    #[test]
    fn convolutions_and_upsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[2, 4, 5]);
        let w = rand_tensor(&mut rng, &[3, 18]);
        let b = rand_tensor(&mut rng, &[3]);
        let w1 = rand_tensor(&mut rng, &[2, 3]);
        let b1 = rand_tensor(&mut rng, &[2]);
        assert_ok(check_inputs(vec![x, w, b, w1, b1], 1e-5, |g, v| {
            let y = g.conv3x3(v[0], v[1], v[2]);
            let u = g.upsample2x(y);
            let z = g.conv1x1(u, v[3], v[4]);
            contract(g, z)
        }));
    }

    #[test]
    fn conv3x3_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (cin, cout, h, w) = (2, 3, 4, 5);
        let x = rand_tensor(&mut rng, &[cin, h, w]);
        let wt = rand_tensor(&mut rng, &[cout, cin * 9]);
        let b = rand_tensor(&mut rng, &[cout]);
        let mut g = Graph::<f64>::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(b.clone()));
        let y = g.conv3x3(xv, wv, bv);
        let out = g.value(y);
        for co in 0..cout {
            for oy in 0..h {
                for ox in 0..w {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = oy as isize + ky as isize - 1;
                                let ix = ox as isize + kx as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += wt.data()[co * cin * 9 + ci * 9 + ky * 3 + kx]
                                    * x.data()[ci * h * w + iy as usize * w + ix as usize];
                            }
                        }
                    }
                    let got = out.data()[co * h * w + oy * w + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn reused_nodes_accumulate() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new([1], vec![3.0]));
        let y = g.mul(x, x);
        let z = g.add(y, x);
        let grads = g.backward(z);
        assert_eq!(grads.wrt(x).unwrap().item(), 7.0);
    }
}
