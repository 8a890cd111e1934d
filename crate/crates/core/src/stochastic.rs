//! Seeded randomness, reparameterized Gaussian sampling and the AWGN channel.
//!
//! Every consumer of randomness draws from its own [`Rng64`] stream derived
//! from one 64-bit run seed plus a `(label, index)` pair, so adding or
//! removing a consumer never shifts the numbers another consumer sees.

use ndarray::{Array1, Array2, ArrayView2, Zip};
use rand_xoshiro::rand_core::{Rng as _, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Root of the seed tree for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child seed tree, e.g. one per study cell.
    pub fn child(&self, label: &str, index: u64) -> SeedStream {
        SeedStream {
            seed: self.derive(label, index),
        }
    }

    /// Independent generator for the consumer `(label, index)`.
    pub fn rng(&self, label: &str, index: u64) -> Rng64 {
        Rng64::from_seed(self.derive(label, index))
    }

    fn derive(&self, label: &str, index: u64) -> u64 {
        splitmix64(self.seed ^ splitmix64(fnv1a(label) ^ splitmix64(index)))
    }
}

/// xoshiro256++ with a polar-method normal sampler on top.
#[derive(Debug, Clone)]
pub struct Rng64 {
    inner: Xoshiro256PlusPlus,
    spare: Option<f64>,
}

impl Rng64 {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` by rejection, so no modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Standard normal variate (Marsaglia polar method, pairs cached).
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                self.spare = Some(v * f);
                return u * f;
            }
        }
    }

    /// Row-major matrix of i.i.d. standard normals.
    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || self.normal())
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Batch of diagonal Gaussians, one per row: `N(mu[i], diag(sigma[i]^2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLatent {
    pub mu: Array2<f64>,
    pub sigma: Array2<f64>,
}

impl GaussianLatent {
    pub fn new(mu: Array2<f64>, sigma: Array2<f64>) -> Result<Self> {
        if mu.dim() != sigma.dim() {
            return Err(Error::shape("latent sigma columns", mu.ncols(), sigma.ncols()));
        }
        if mu.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian latent parameters".into()));
        }
        Ok(Self { mu, sigma })
    }

    pub fn batch(&self) -> usize {
        self.mu.nrows()
    }

    pub fn dim(&self) -> usize {
        self.mu.ncols()
    }

    /// `mu + sigma * eps` for a caller-supplied `eps`.
    pub fn sample_with(&self, eps: &Array2<f64>) -> Result<Array2<f64>> {
        if eps.dim() != self.mu.dim() {
            return Err(Error::shape("reparameterization noise columns", self.dim(), eps.ncols()));
        }
        let mut out = self.mu.clone();
        Zip::from(&mut out)
            .and(&self.sigma)
            .and(eps)
            .for_each(|o, &s, &e| *o += s * e);
        Ok(out)
    }
}

/// Draws `mu + sigma * eps` with `eps ~ N(0, I)`, returning the sample and
/// the noise so callers can backpropagate with `eps` held fixed.
pub fn reparam_sample(lat: &GaussianLatent, rng: &mut Rng64) -> (Array2<f64>, Array2<f64>) {
    let eps = rng.normal_matrix(lat.batch(), lat.dim());
    let x = lat
        .sample_with(&eps)
        .expect("noise drawn with latent shape");
    (x, eps)
}

/// AWGN channel with `dim` real channel uses per transmission.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelSpec {
    pub dim: usize,
    pub noise_std: f64,
}

impl ChannelSpec {
    pub fn new(dim: usize, noise_std: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("channel dimension must be >= 1".into()));
        }
        if !(noise_std >= 0.0) || !noise_std.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "channel noise std must be finite and >= 0, got {noise_std}"
            )));
        }
        Ok(Self { dim, noise_std })
    }

    /// Noise level giving `snr_db` per dimension for signals of mean power
    /// `signal_power` per component.
    pub fn from_snr_db(dim: usize, snr_db: f64, signal_power: f64) -> Result<Self> {
        if !snr_db.is_finite() || !(signal_power >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cannot calibrate channel from snr {snr_db} dB and power {signal_power}"
            )));
        }
        Self::new(dim, (signal_power / 10f64.powf(snr_db / 10.0)).sqrt())
    }
}

/// Passes each row of `x` through the channel: `x + n`, `n ~ N(0, noise_std^2 I)`.
pub fn awgn(x: ArrayView2<f64>, ch: &ChannelSpec, rng: &mut Rng64) -> Result<Array2<f64>> {
    if x.ncols() != ch.dim {
        return Err(Error::shape("channel input length", ch.dim, x.ncols()));
    }
    let mut out = x.to_owned();
    if ch.noise_std > 0.0 {
        out.iter_mut()
            .for_each(|v| *v += ch.noise_std * rng.normal());
    } else {
        // keep the stream position independent of the noise level
        out.iter().for_each(|_| {
            rng.normal();
        });
    }
    Ok(out)
}

/// Per-component z-scores of the Monte Carlo score means.
#[derive(Debug, Clone)]
pub struct ScoreCheck {
    pub z_mu: Array1<f64>,
    pub z_sigma: Array1<f64>,
}

impl ScoreCheck {
    pub fn max_abs_z(&self) -> f64 {
        self.z_mu
            .iter()
            .chain(self.z_sigma.iter())
            .fold(0.0f64, |m, z| m.max(z.abs()))
    }
}

/// Monte Carlo check that `E_p[grad log p] = 0` for a diagonal Gaussian.
///
/// Samples `x ~ N(mu, sigma^2)` and averages the scores
/// `(x - mu) / sigma^2` and `((x - mu)^2 - sigma^2) / sigma^3`, reporting
/// each mean divided by its standard error.
pub fn score_zero_check(
    mu: &[f64],
    sigma: &[f64],
    n_samples: usize,
    rng: &mut Rng64,
) -> Result<ScoreCheck> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument(format!(
            "score check needs at least 2 samples, got {n_samples}"
        )));
    }
    if mu.len() != sigma.len() {
        return Err(Error::shape("score check sigma length", mu.len(), sigma.len()));
    }
    if sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument("score check needs sigma > 0".into()));
    }
    let d = mu.len();
    let n = n_samples as f64;
    let mut sum = [vec![0.0; d], vec![0.0; d]];
    let mut sum_sq = [vec![0.0; d], vec![0.0; d]];
    for _ in 0..n_samples {
        for i in 0..d {
            let (m, s) = (mu[i], sigma[i]);
            let x = m + s * rng.normal();
            let g_mu = (x - m) / (s * s);
            let g_sigma = ((x - m).powi(2) - s * s) / (s * s * s);
            sum[0][i] += g_mu;
            sum_sq[0][i] += g_mu * g_mu;
            sum[1][i] += g_sigma;
            sum_sq[1][i] += g_sigma * g_sigma;
        }
    }
    let z = |k: usize| {
        Array1::from_shape_fn(d, |i| {
            let mean = sum[k][i] / n;
            let var = (sum_sq[k][i] / n - mean * mean) * n / (n - 1.0);
            mean / (var / n).sqrt()
        })
    };
    Ok(ScoreCheck {
        z_mu: z(0),
        z_sigma: z(1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_sigma_sample_is_mean() {
        let lat = GaussianLatent::new(array![[1.0, -2.0, 0.5]], Array2::zeros((1, 3))).unwrap();
        let (x, _) = reparam_sample(&lat, &mut Rng64::from_seed(3));
        assert_eq!(x, lat.mu);
    }

    #[test]
    fn reparam_mean_concentrates() {
        let n = 1_000_000;
        let lat = GaussianLatent::new(Array2::zeros((n, 1)), Array2::ones((n, 1))).unwrap();
        let (x, _) = reparam_sample(&lat, &mut Rng64::from_seed(11));
        let mean = x.sum() / n as f64;
        assert!(mean.abs() <= 4.0 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let root = SeedStream::new(42);
        let a: Vec<u64> = (0..8).map(|_| root.rng("a", 0).next_u64()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        let mut r1 = root.rng("train", 0);
        let mut r2 = root.rng("train", 0);
        let mut r3 = root.rng("train", 1);
        let s1: Vec<f64> = (0..16).map(|_| r1.normal()).collect();
        let s2: Vec<f64> = (0..16).map(|_| r2.normal()).collect();
        let s3: Vec<f64> = (0..16).map(|_| r3.normal()).collect();
        assert_eq!(s1, s2);
        assert_ne!(s1, s3);
    }

    #[test]
    fn negated_sigma_matches_in_distribution() {
        let n = 200_000;
        let mu = Array2::from_elem((n, 1), 0.7);
        let pos = GaussianLatent::new(mu.clone(), Array2::from_elem((n, 1), 1.3)).unwrap();
        let neg = GaussianLatent::new(mu, Array2::from_elem((n, 1), -1.3)).unwrap();
        let (a, _) = reparam_sample(&pos, &mut Rng64::from_seed(1));
        let (b, _) = reparam_sample(&neg, &mut Rng64::from_seed(2));
        let moments = |x: &Array2<f64>| {
            let m = x.sum() / n as f64;
            let v = x.mapv(|v| (v - m).powi(2)).sum() / n as f64;
            (m, v)
        };
        let (ma, va) = moments(&a);
        let (mb, vb) = moments(&b);
        let se_mean = (2.0 * 1.69 / n as f64).sqrt();
        let se_var = (2.0 * 2.0 * 1.69f64.powi(2) / n as f64).sqrt();
        assert!((ma - mb).abs() < 4.0 * se_mean, "{ma} vs {mb}");
        assert!((va - vb).abs() < 4.0 * se_var, "{va} vs {vb}");
    }

    #[test]
    fn noiseless_channel_is_identity() {
        let x = array![[0.3, -1.0], [2.0, 0.0]];
        let ch = ChannelSpec::new(2, 0.0).unwrap();
        let y = awgn(x.view(), &ch, &mut Rng64::from_seed(0)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn channel_rejects_length_mismatch() {
        let ch = ChannelSpec::new(3, 1.0).unwrap();
        let err = awgn(Array2::zeros((1, 2)).view(), &ch, &mut Rng64::from_seed(0)).unwrap_err();
        assert!(matches!(err, Error::Shape { expected: 3, found: 2, .. }));
    }

    #[test]
    fn channel_noise_variance() {
        let n = 1_000_000;
        let ch = ChannelSpec::new(1, 1.0).unwrap();
        let y = awgn(Array2::zeros((n, 1)).view(), &ch, &mut Rng64::from_seed(5)).unwrap();
        let mean = y.sum() / n as f64;
        let var = y.mapv(|v| (v - mean).powi(2)).sum() / n as f64;
        assert!((var - 1.0).abs() < 0.01, "variance {var}");
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn empirical_snr_matches_configuration() {
        let mut rng = Rng64::from_seed(9);
        let (n, d) = (100_000, 8);
        let x = rng.normal_matrix(n, d).mapv(|v| 0.5 * v + 0.2);
        let power = x.mapv(|v| v * v).sum() / (n * d) as f64;
        let ch = ChannelSpec::from_snr_db(d, 10.0, power).unwrap();
        let y = awgn(x.view(), &ch, &mut rng).unwrap();
        let noise = &y - &x;
        let snr = 10.0 * (x.mapv(|v| v * v).sum() / noise.mapv(|v| v * v).sum()).log10();
        assert!((snr - 10.0).abs() < 0.2, "snr {snr}");
    }

    #[test]
    fn score_check_rejects_empty() {
        assert!(score_zero_check(&[0.0], &[1.0], 0, &mut Rng64::from_seed(0)).is_err());
    }

    #[test]
    fn score_means_vanish() {
        let mut rng = Rng64::from_seed(21);
        let std = score_zero_check(&[0.0; 4], &[1.0; 4], 100_000, &mut rng).unwrap();
        assert!(std.max_abs_z() <= 4.0, "{std:?}");
        let shifted = score_zero_check(&[3.0; 4], &[0.5; 4], 100_000, &mut rng).unwrap();
        assert!(shifted.max_abs_z() <= 4.0, "{shifted:?}");
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut v: Vec<usize> = (0..100).collect();
        Rng64::from_seed(4).shuffle(&mut v);
        let mut s = v.clone();
        s.sort_unstable();
        assert_eq!(s, (0..100).collect::<Vec<_>>());
        assert_ne!(v, s);
    }
}
