#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use semcom_lab::nnet::{Activation, DenseNet};
use semcom_lab::semsource::{IMAGE_MAGIC, LABEL_MAGIC};
use semcom_lab::stochastic::Rng64;

pub const ACTIVATIONS: [Activation; 5] = [
    Activation::Linear,
    Activation::Relu,
    Activation::Tanh,
    Activation::Sigmoid,
    Activation::Softmax,
];

/// Dense net with 1 to 3 layers of at most 32 units. Activation `i` of the
/// cycle is forced onto some layer so every kind shows up across a batch
/// of nets; softmax only ever lands on the output layer.
pub fn random_net(i: usize, rng: &mut Rng64) -> DenseNet {
    let depth = 1 + rng.below(3) as usize;
    let forced = ACTIVATIONS[i % ACTIVATIONS.len()];
    let forced_at = if forced == Activation::Softmax { depth - 1 } else { i % depth };
    let mut sizes = vec![1 + rng.below(32) as usize];
    let mut acts = Vec::new();
    for l in 0..depth {
        sizes.push(1 + rng.below(32) as usize);
        let choices = if l + 1 == depth { ACTIVATIONS.len() } else { ACTIVATIONS.len() - 1 };
        acts.push(if l == forced_at {
            forced
        } else {
            ACTIVATIONS[rng.below(choices as u64) as usize]
        });
    }
    DenseNet::init(&sizes, &acts, rng).unwrap()
}

fn param_mut(net: &mut DenseNet, mut k: usize) -> &mut f64 {
    for layer in net.layers_mut() {
        if k < layer.weights.len() {
            return layer.weights.iter_mut().nth(k).unwrap();
        }
        k -= layer.weights.len();
        if k < layer.biases.len() {
            return &mut layer.biases[k];
        }
        k -= layer.biases.len();
    }
    panic!("parameter index out of range")
}

/// Scalar probe `sum(w * net(x))` used to turn vector outputs into a loss.
fn probe(net: &DenseNet, x: &Array2<f64>, w: &Array2<f64>) -> f64 {
    (&net.predict(x).unwrap() * w).sum()
}

/// Largest relative difference between backprop and central differences
/// (step `h`) over every parameter and every input of a random batch.
pub fn max_gradient_error(net: &DenseNet, rng: &mut Rng64, h: f64) -> f64 {
    let x = rng.normal_matrix(4, net.input_dim());
    let w = rng.normal_matrix(4, net.output_dim());
    let cache = net.forward(&x).unwrap();
    let (grads, dx) = net.backward(&cache, &w).unwrap();
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    for (k, &g) in grads.values().enumerate() {
        let mut up = net.clone();
        *param_mut(&mut up, k) += h;
        let mut dn = net.clone();
        *param_mut(&mut dn, k) -= h;
        let fd = (probe(&up, &x, &w) - probe(&dn, &x, &w)) / (2.0 * h);
        worst = worst.max(rel(g, fd));
    }
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let mut up = x.clone();
            up[[i, j]] += h;
            let mut dn = x.clone();
            dn[[i, j]] -= h;
            let fd = (probe(net, &up, &w) - probe(net, &dn, &w)) / (2.0 * h);
            worst = worst.max(rel(dx[[i, j]], fd));
        }
    }
    worst
}

pub fn idx_images(pixels: &[u8], count: usize) -> Vec<u8> {
    let mut b = IMAGE_MAGIC.to_be_bytes().to_vec();
    for v in [count as u32, 28, 28] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

pub fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = LABEL_MAGIC.to_be_bytes().to_vec();
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

pub fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap()
}

/// Synthetic digits: each class lights a different horizontal band, with
/// some pixel noise, so tiny models can learn both tasks quickly.
pub fn synthetic_digits(count: usize, rng: &mut Rng64) -> (Vec<u8>, Vec<u8>) {
    let mut pixels = vec![0u8; count * 784];
    let mut labels = Vec::with_capacity(count);
    for n in 0..count {
        let digit = (n % 10) as u8;
        labels.push(digit);
        let img = &mut pixels[n * 784..(n + 1) * 784];
        for r in 0..28 {
            for c in 0..28 {
                let band = r / 3 == usize::from(digit) || (r >= 27 && c < 3 * usize::from(digit));
                let base = if band { 200.0 } else { 10.0 };
                img[r * 28 + c] = (base + 40.0 * rng.normal()).clamp(0.0, 255.0) as u8;
            }
        }
    }
    (pixels, labels)
}

/// Writes a small MNIST-shaped dataset in IDX format under `dir`.
pub fn write_synthetic_mnist(dir: &Path, train: usize, test: usize, seed: u64) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = Rng64::from_seed(seed);
    for (prefix, count) in [("train", train), ("t10k", test)] {
        let (px, lb) = synthetic_digits(count, &mut rng);
        std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), idx_images(&px, count)).unwrap();
        std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), idx_labels(&lb)).unwrap();
    }
    dir.to_path_buf()
}

/// MNIST location for tests that need the real data.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("SEMCOM_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}
