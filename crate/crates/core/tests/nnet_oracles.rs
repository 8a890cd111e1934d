mod common;

use ndarray::Array2;
use proptest::prelude::*;
use semcom_lab::nnet::{Activation, DenseNet};
use semcom_lab::stochastic::Rng64;

#[test]
fn backprop_matches_central_differences_on_random_nets() {
    let mut rng = Rng64::from_seed(31);
    let mut seen = [false; 5];
    for i in 0..25 {
        let net = common::random_net(i, &mut rng);
        for l in net.layers() {
            seen[common::ACTIVATIONS.iter().position(|a| *a == l.activation).unwrap()] = true;
        }
        let err = common::max_gradient_error(&net, &mut rng, 1e-5);
        assert!(err <= 1e-4, "net {i}: relative error {err}");
    }
    assert!(seen.iter().all(|s| *s), "every activation exercised");
}

/// Reference forward pass written with explicit loops.
fn loop_forward(net: &DenseNet, x: &Array2<f64>) -> Array2<f64> {
    let mut cur = x.clone();
    for layer in net.layers() {
        let (out, inp) = layer.weights.dim();
        let mut z = Array2::<f64>::zeros((cur.nrows(), out));
        for r in 0..cur.nrows() {
            for o in 0..out {
                let mut acc = layer.biases[o];
                for k in 0..inp {
                    acc += layer.weights[[o, k]] * cur[[r, k]];
                }
                z[[r, o]] = acc;
            }
        }
        cur = match layer.activation {
            Activation::Linear => z,
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Tanh => z.mapv(f64::tanh),
            Activation::Sigmoid => z.mapv(|v| 1.0 / (1.0 + (-v).exp())),
            Activation::Softmax => {
                let mut s = z.clone();
                for mut row in s.rows_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    row.mapv_inplace(|v| (v - m).exp());
                    let t = row.sum();
                    row.mapv_inplace(|v| v / t);
                }
                s
            }
        };
    }
    cur
}

#[test]
fn forward_matches_loop_reference() {
    let mut rng = Rng64::from_seed(32);
    for i in 0..20 {
        let net = common::random_net(i, &mut rng);
        let x = rng.normal_matrix(7, net.input_dim());
        let fast = net.predict(&x).unwrap();
        let slow = loop_forward(&net, &x);
        let diff = (&fast - &slow).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-12, "net {i}: {diff}");
        assert_eq!(net.forward(&x).unwrap().output(), &fast);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_outputs_are_distributions(seed in any::<u64>(), scale in 0.1f64..200.0) {
        let mut rng = Rng64::from_seed(seed);
        let net = DenseNet::init(&[3, 6], &[Activation::Softmax], &mut rng).unwrap();
        let x = rng.normal_matrix(5, 3) * scale;
        let y = net.predict(&x).unwrap();
        for row in y.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn batch_rows_are_independent(seed in any::<u64>()) {
        let mut rng = Rng64::from_seed(seed);
        let net = common::random_net(seed as usize % 5, &mut rng);
        let x = rng.normal_matrix(6, net.input_dim());
        let all = net.predict(&x).unwrap();
        for r in 0..6 {
            let one = net.predict(&x.slice(ndarray::s![r..r + 1, ..]).to_owned()).unwrap();
            for (a, b) in one.row(0).iter().zip(all.row(r)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
