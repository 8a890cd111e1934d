//! Dense feed-forward networks with reverse-mode gradients.

mod checkpoint;
pub mod loss;
mod optim;

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, Axis, Zip};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{sgd_step, AdamConfig, AdamState};

use crate::error::{Error, Result};
use crate::stochastic::Rng64;

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
}

impl Activation {
    pub const ALL: [Activation; 5] = [
        Activation::Linear,
        Activation::Relu,
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::Softmax,
    ];

    pub fn tag(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
            Activation::Sigmoid => 3,
            Activation::Softmax => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.tag() == tag)
    }

    fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Linear => z.clone(),
            Activation::Relu => z.mapv(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Tanh => z.mapv(f64::tanh),
            Activation::Sigmoid => z.mapv(sigmoid),
            Activation::Softmax => softmax_rows(z),
        }
    }

    /// Maps dL/dy to dL/dz given pre-activation `z` and output `y`.
    fn backprop(self, z: &Array2<f64>, y: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Linear => grad.clone(),
            // subgradient 0 at z == 0
            Activation::Relu => {
                let mut g = grad.clone();
                Zip::from(&mut g).and(z).for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
                g
            }
            Activation::Tanh => {
                let mut g = grad.clone();
                Zip::from(&mut g).and(y).for_each(|g, &y| *g *= 1.0 - y * y);
                g
            }
            Activation::Sigmoid => {
                let mut g = grad.clone();
                Zip::from(&mut g).and(y).for_each(|g, &y| *g *= y * (1.0 - y));
                g
            }
            Activation::Softmax => {
                let mut g = grad.clone();
                for (mut g_row, y_row) in g.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = g_row.iter().zip(y_row.iter()).map(|(a, b)| a * b).sum();
                    Zip::from(&mut g_row)
                        .and(&y_row)
                        .for_each(|g, &y| *g = y * (*g - dot));
                }
                g
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(v))` without overflow.
pub fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// out x in
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, biases: Array1<f64>, activation: Activation) -> Result<Self> {
        if biases.len() != weights.nrows() {
            return Err(Error::shape("layer bias length", weights.nrows(), biases.len()));
        }
        Ok(Self {
            weights,
            biases,
            activation,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut Rng64) -> Self {
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((outputs, inputs), || a * (2.0 * rng.uniform() - 1.0));
        Self {
            weights,
            biases: Array1::zeros(outputs),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

/// Ordered chain of dense layers.
#[derive(Debug)]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
    id: u64,
    version: u64,
}

impl Clone for DenseNet {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Intermediates recorded by [`DenseNet::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    net_id: u64,
    net_version: u64,
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    /// Pre-activation of the final layer (logits for decoder heads).
    pub fn logits(&self) -> &Array2<f64> {
        self.pre.last().expect("non-empty net")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

/// One gradient tensor per parameter tensor of a [`DenseNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    biases: Array1::zeros(l.biases.len()),
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
    }

    pub fn max_abs(&self) -> f64 {
        self.values().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.biases += &b.biases;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights *= factor;
            l.biases *= factor;
        }
    }

    fn congruent_with(&self, net: &DenseNet) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.weights.dim() == l.weights.dim() && g.biases.len() == l.biases.len())
    }
}

impl DenseNet {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].inputs() != pair[0].outputs() {
                return Err(Error::shape(
                    format!("input width of layer {}", i + 1),
                    pair[0].outputs(),
                    pair[1].inputs(),
                ));
            }
        }
        if layers[..layers.len() - 1]
            .iter()
            .any(|l| l.activation == Activation::Softmax)
        {
            return Err(Error::InvalidArgument(
                "softmax is only allowed on the final layer".into(),
            ));
        }
        Ok(Self {
            layers,
            id: fresh_id(),
            version: 0,
        })
    }

    /// Builds a randomly initialized chain `sizes[0] -> sizes[1] -> ...`.
    pub fn init(sizes: &[usize], activations: &[Activation], rng: &mut Rng64) -> Result<Self> {
        if sizes.len() != activations.len() + 1 {
            return Err(Error::shape("activation count", sizes.len().saturating_sub(1), activations.len()));
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &a)| DenseLayer::init(w[0], w[1], a, rng))
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Mutable access; invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Output only; no cache.
    pub fn predict(&self, batch: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers {
            let z = affine(layer, &x);
            x = layer.activation.apply(&z);
        }
        Ok(x)
    }

    pub fn forward(&self, batch: &Array2<f64>) -> Result<ForwardCache> {
        self.check_input(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &self.layers {
            let z = affine(layer, &x);
            let y = layer.activation.apply(&z);
            inputs.push(x);
            pre.push(z);
            x = y;
        }
        Ok(ForwardCache {
            net_id: self.id,
            net_version: self.version,
            inputs,
            pre,
            output: x,
        })
    }

    /// Gradients given dL/d(output). Returns parameter gradients and dL/d(input).
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Array2<f64>) -> Result<(GradientSet, Array2<f64>)> {
        self.check_cache(cache, grad_output)?;
        let last = self.layers.len() - 1;
        let dz = self.layers[last]
            .activation
            .backprop(&cache.pre[last], &cache.output, grad_output);
        Ok(self.backward_from(cache, dz))
    }

    /// Like [`backward`](Self::backward) but starting from dL/d(final
    /// pre-activation), for losses fused with the output nonlinearity.
    pub fn backward_from_logits(
        &self,
        cache: &ForwardCache,
        grad_logits: &Array2<f64>,
    ) -> Result<(GradientSet, Array2<f64>)> {
        self.check_cache(cache, grad_logits)?;
        Ok(self.backward_from(cache, grad_logits.clone()))
    }

    fn backward_from(&self, cache: &ForwardCache, mut dz: Array2<f64>) -> (GradientSet, Array2<f64>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[i];
            let weights = dz.t().dot(x);
            let biases = dz.sum_axis(Axis(0));
            let dx = dz.dot(&layer.weights);
            grads.push(LayerGrad { weights, biases });
            if i > 0 {
                let prev = &self.layers[i - 1];
                dz = prev.activation.backprop(&cache.pre[i - 1], &cache.inputs[i], &dx);
            } else {
                dz = dx;
            }
        }
        grads.reverse();
        (GradientSet { layers: grads }, dz)
    }

    fn check_input(&self, batch: &Array2<f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::shape("network input columns", self.input_dim(), batch.ncols()));
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }

    fn check_cache(&self, cache: &ForwardCache, grad: &Array2<f64>) -> Result<()> {
        if cache.net_id != self.id || cache.net_version != self.version {
            return Err(Error::StaleCache);
        }
        if grad.dim() != cache.output.dim() {
            return Err(Error::shape("output gradient columns", cache.output.ncols(), grad.ncols()));
        }
        Ok(())
    }

    pub(crate) fn check_grads(&self, grads: &GradientSet) -> Result<()> {
        if !grads.congruent_with(self) {
            return Err(Error::InvalidArgument("gradient set does not match network shape".into()));
        }
        Ok(())
    }
}

fn affine(layer: &DenseLayer, x: &Array2<f64>) -> Array2<f64> {
    let mut z = x.dot(&layer.weights.t());
    z += &layer.biases;
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = DenseLayer::new(Array2::eye(3), Array1::zeros(3), Activation::Linear).unwrap();
        let net = DenseNet::new(vec![layer]).unwrap();
        let v = array![[0.5, -1.5, 2.0]];
        assert_eq!(net.forward(&v).unwrap().output(), &v);
    }

    #[test]
    fn softmax_of_zero_logits_is_uniform() {
        let layer = DenseLayer::new(Array2::zeros((10, 4)), Array1::zeros(10), Activation::Softmax).unwrap();
        let net = DenseNet::new(vec![layer]).unwrap();
        let out = net.predict(&Array2::ones((2, 4))).unwrap();
        assert!(out.iter().all(|&p| (p - 0.1).abs() < 1e-15));
    }

    #[test]
    fn shape_mismatch_names_dimension() {
        let net = DenseNet::init(&[4, 3], &[Activation::Relu], &mut Rng64::from_seed(0)).unwrap();
        let err = net.forward(&Array2::zeros((1, 5))).unwrap_err();
        assert!(err.to_string().contains("network input columns"), "{err}");
        assert!(DenseNet::init(&[4, 3, 2], &[Activation::Softmax, Activation::Linear], &mut Rng64::from_seed(0)).is_err());
        let l1 = DenseLayer::init(4, 3, Activation::Relu, &mut Rng64::from_seed(0));
        let l2 = DenseLayer::init(2, 1, Activation::Relu, &mut Rng64::from_seed(0));
        assert!(DenseNet::new(vec![l1, l2]).is_err());
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let net = DenseNet::init(&[5, 4, 3], &[Activation::Tanh, Activation::Sigmoid], &mut Rng64::from_seed(2)).unwrap();
        let x = Rng64::from_seed(3).normal_matrix(6, 5);
        let cache = net.forward(&x).unwrap();
        let (g, dx) = net.backward(&cache, &Array2::zeros((6, 3))).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert_eq!(dx.iter().fold(0.0f64, |m, v| m.max(v.abs())), 0.0);
    }

    #[test]
    fn linear_squared_error_gradient_closed_form() {
        let mut rng = Rng64::from_seed(8);
        let net = DenseNet::init(&[3, 2], &[Activation::Linear], &mut rng).unwrap();
        let x = rng.normal_matrix(1, 3);
        let y = rng.normal_matrix(1, 2);
        let cache = net.forward(&x).unwrap();
        let resid = cache.output() - &y;
        let (g, _) = net.backward(&cache, &(2.0 * &resid)).unwrap();
        let expected = 2.0 * resid.t().dot(&x);
        for (a, b) in g.layers[0].weights.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in g.layers[0].biases.iter().zip(resid.iter()) {
            assert!((a - 2.0 * b).abs() < 1e-14);
        }
    }

    #[test]
    fn mutation_invalidates_cache() {
        let mut net = DenseNet::init(&[2, 2], &[Activation::Linear], &mut Rng64::from_seed(0)).unwrap();
        let cache = net.forward(&Array2::ones((1, 2))).unwrap();
        net.layers_mut()[0].biases[0] = 1.0;
        assert!(matches!(net.backward(&cache, &Array2::ones((1, 2))), Err(Error::StaleCache)));
        let other = net.clone();
        let cache = net.forward(&Array2::ones((1, 2))).unwrap();
        assert!(matches!(other.backward(&cache, &Array2::ones((1, 2))), Err(Error::StaleCache)));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = Rng64::from_seed(17);
        let net = DenseNet::init(&[8, 16, 10], &[Activation::Relu, Activation::Softmax], &mut rng).unwrap();
        let x = rng.normal_matrix(5, 8);
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert!(a.output().iter().zip(b.output().iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn log_softmax_is_stable_for_large_logits() {
        let z = array![[1000.0, 0.0, -1000.0]];
        let l = log_softmax_rows(&z);
        assert!(l.iter().all(|v| v.is_finite()));
        assert!(l[[0, 0]].abs() < 1e-12);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }
}
