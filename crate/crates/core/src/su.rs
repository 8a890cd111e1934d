//! Specific units (SU): one encoder/decoder pair per task, trained with an
//! information-bottleneck loss over an AWGN channel.
//!
//! The encoder maps a CU latent `c` to a Gaussian over `d` channel symbols,
//! a reparameterized sample is sent through the channel, and the decoder
//! predicts the task variable. The rate penalty is a KL term against a
//! fixed prior, optionally corrected by a fitted density ratio.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Zip};
use serde::Serialize;

use crate::cu::CuModel;
use crate::dre::{self, DreConfig, DreModel};
use crate::error::{Error, Result};
use crate::nnet::{sgd_step, sigmoid, Activation, Checkpoint, DenseNet, GradientSet};
use crate::semsource::{minibatches, Dataset, Task};
use crate::stochastic::{awgn, ChannelSpec, GaussianLatent, Rng64, SeedStream};

pub const LOGUNIFORM_K1: f64 = 0.63576;
pub const LOGUNIFORM_K2: f64 = 1.87320;
pub const LOGUNIFORM_K3: f64 = 1.48695;
pub const ALPHA_MIN: f64 = 1e-8;
pub const ALPHA_MAX: f64 = 1e8;
/// Magnitude range of the log-uniform prior used to draw reference samples.
pub const LOGUNIFORM_RANGE: (f64, f64) = (1e-3, 3.0);

/// Which prior the rate term uses and whether a density ratio corrects it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PriorMode {
    #[default]
    EpGaussian,
    EpLogUniform,
    IopmGaussian,
    IopmLogUniform,
}

/// Closed-form family used for the KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorFamily {
    Gaussian,
    LogUniform,
}

impl PriorMode {
    pub const ALL: [PriorMode; 4] = [
        PriorMode::EpGaussian,
        PriorMode::EpLogUniform,
        PriorMode::IopmGaussian,
        PriorMode::IopmLogUniform,
    ];

    pub fn family(self) -> PriorFamily {
        match self {
            PriorMode::EpGaussian | PriorMode::IopmGaussian => PriorFamily::Gaussian,
            PriorMode::EpLogUniform | PriorMode::IopmLogUniform => PriorFamily::LogUniform,
        }
    }

    pub fn uses_ratio(self) -> bool {
        matches!(self, PriorMode::IopmGaussian | PriorMode::IopmLogUniform)
    }
}

impl FromStr for PriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ep_gaussian" => PriorMode::EpGaussian,
            "ep_loguniform" => PriorMode::EpLogUniform,
            "iopm_gaussian" => PriorMode::IopmGaussian,
            "iopm_loguniform" => PriorMode::IopmLogUniform,
            _ => {
                return Err(Error::Config(format!(
                    "prior.mode must be one of ep_gaussian|ep_loguniform|iopm_gaussian|iopm_loguniform, got '{s}'"
                )))
            }
        })
    }
}

impl fmt::Display for PriorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PriorMode::EpGaussian => "ep_gaussian",
            PriorMode::EpLogUniform => "ep_loguniform",
            PriorMode::IopmGaussian => "iopm_gaussian",
            PriorMode::IopmLogUniform => "iopm_loguniform",
        })
    }
}

impl PriorFamily {
    /// Reference samples: `N(0, I)`, or magnitudes log-uniform on
    /// [`LOGUNIFORM_RANGE`] with a random sign.
    pub fn sample(self, n: usize, d: usize, rng: &mut Rng64) -> Array2<f64> {
        match self {
            PriorFamily::Gaussian => rng.normal_matrix(n, d),
            PriorFamily::LogUniform => {
                let (lo, hi) = (LOGUNIFORM_RANGE.0.ln(), LOGUNIFORM_RANGE.1.ln());
                Array2::from_shape_simple_fn((n, d), || {
                    let mag = (lo + (hi - lo) * rng.uniform()).exp();
                    if rng.below(2) == 0 {
                        mag
                    } else {
                        -mag
                    }
                })
            }
        }
    }
}

/// Row-wise KL values with derivatives of each row's value.
#[derive(Debug, Clone, PartialEq)]
pub struct KlTerms {
    pub per_row: Array1<f64>,
    pub d_mu: Array2<f64>,
    pub d_sigma: Array2<f64>,
    /// Entries whose `alpha` hit the clamp range.
    pub clamped: usize,
}

fn check_sigma(sigma: &Array2<f64>) -> Result<()> {
    if sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument("KL requires strictly positive sigma".into()));
    }
    Ok(())
}

/// `sum_i 0.5 (log(1/sigma_i^2) + sigma_i^2 + mu_i^2 - 1)` per row.
pub fn kl_gaussian_terms(lat: &GaussianLatent) -> Result<KlTerms> {
    check_sigma(&lat.sigma)?;
    let mut per_row = Array1::zeros(lat.batch());
    let mut d_sigma = Array2::zeros(lat.sigma.raw_dim());
    for (i, (mu, sigma)) in lat.mu.rows().into_iter().zip(lat.sigma.rows()).enumerate() {
        per_row[i] = mu
            .iter()
            .zip(sigma)
            .map(|(&m, &s)| 0.5 * (-(s * s).ln() + s * s + m * m - 1.0))
            .sum();
    }
    Zip::from(&mut d_sigma).and(&lat.sigma).for_each(|d, &s| *d = s - 1.0 / s);
    Ok(KlTerms {
        per_row,
        d_mu: lat.mu.clone(),
        d_sigma,
        clamped: 0,
    })
}

/// Per-dimension value of the log-uniform expression at `ln alpha`.
pub fn loguniform_term(ln_alpha: f64) -> f64 {
    let alpha = ln_alpha.exp();
    LOGUNIFORM_K1 * sigmoid(LOGUNIFORM_K2 + LOGUNIFORM_K3 * ln_alpha) - 0.5 * (1.0 / alpha).ln_1p()
}

/// `sum_i k1 sigmoid(k2 + k3 ln a_i) - 0.5 ln(1 + 1/a_i)` per row with
/// `a_i = sigma_i^2 / mu_i^2` clamped to `[ALPHA_MIN, ALPHA_MAX]`.
pub fn kl_loguniform_terms(lat: &GaussianLatent) -> Result<KlTerms> {
    check_sigma(&lat.sigma)?;
    let (lo, hi) = (ALPHA_MIN.ln(), ALPHA_MAX.ln());
    let mut per_row = Array1::zeros(lat.batch());
    let mut d_mu = Array2::zeros(lat.mu.raw_dim());
    let mut d_sigma = Array2::zeros(lat.mu.raw_dim());
    let mut clamped = 0;
    for i in 0..lat.batch() {
        let mut row_sum = 0.0;
        for j in 0..lat.dim() {
            let (m, s) = (lat.mu[[i, j]], lat.sigma[[i, j]]);
            let raw = 2.0 * s.ln() - 2.0 * m.abs().ln();
            if !(lo..=hi).contains(&raw) {
                clamped += 1;
                row_sum += loguniform_term(raw.clamp(lo, hi));
                continue;
            }
            row_sum += loguniform_term(raw);
            let sg = sigmoid(LOGUNIFORM_K2 + LOGUNIFORM_K3 * raw);
            let d_ln_alpha = LOGUNIFORM_K1 * LOGUNIFORM_K3 * sg * (1.0 - sg) + 0.5 / (1.0 + raw.exp());
            d_sigma[[i, j]] = d_ln_alpha * 2.0 / s;
            d_mu[[i, j]] = d_ln_alpha * -2.0 / m;
        }
        per_row[i] = row_sum;
    }
    Ok(KlTerms {
        per_row,
        d_mu,
        d_sigma,
        clamped,
    })
}

/// KL of one diagonal Gaussian to `N(0, I)`.
pub fn kl_gaussian(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    Ok(kl_gaussian_terms(&row_latent(mu, sigma)?)?.per_row[0])
}

/// Log-uniform expression for one diagonal Gaussian; also returns the
/// number of clamped dimensions.
pub fn kl_loguniform(mu: &[f64], sigma: &[f64]) -> Result<(f64, usize)> {
    let t = kl_loguniform_terms(&row_latent(mu, sigma)?)?;
    Ok((t.per_row[0], t.clamped))
}

fn row_latent(mu: &[f64], sigma: &[f64]) -> Result<GaussianLatent> {
    if mu.len() != sigma.len() {
        return Err(Error::shape("KL sigma length", mu.len(), sigma.len()));
    }
    GaussianLatent::new(
        Array2::from_shape_vec((1, mu.len()), mu.to_vec()).expect("row"),
        Array2::from_shape_vec((1, sigma.len()), sigma.to_vec()).expect("row"),
    )
}

/// Divergence to the log-uniform prior, `sum_i k1 - term_i`, built from
/// [`kl_loguniform_terms`]. The closed-form expression approximates the
/// negative divergence up to the constant `-k1`; this flips it back so the
/// value is non-negative and vanishes as `alpha -> inf`.
pub fn loguniform_divergence_terms(lat: &GaussianLatent) -> Result<KlTerms> {
    let mut t = kl_loguniform_terms(lat)?;
    let offset = LOGUNIFORM_K1 * lat.dim() as f64;
    t.per_row.mapv_inplace(|v| offset - v);
    t.d_mu.mapv_inplace(|g| -g);
    t.d_sigma.mapv_inplace(|g| -g);
    Ok(t)
}

/// Rate term used by the SU loss for each prior family.
pub fn kl_terms(family: PriorFamily, lat: &GaussianLatent) -> Result<KlTerms> {
    match family {
        PriorFamily::Gaussian => kl_gaussian_terms(lat),
        PriorFamily::LogUniform => loguniform_divergence_terms(lat),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuArch {
    pub input_dim: usize,
    pub hidden: usize,
    pub d: usize,
    pub decoder_hidden: usize,
}

impl SuArch {
    /// Encoder on top of a CU latent of width `input_dim`.
    pub fn new(input_dim: usize, d: usize) -> Self {
        Self {
            input_dim,
            hidden: 64,
            d,
            decoder_hidden: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuModel {
    pub task: Task,
    pub trunk: DenseNet,
    /// `tanh` mean head.
    pub mu_head: DenseNet,
    /// `sigmoid` scale head, so every sigma lies in (0, 1).
    pub sigma_head: DenseNet,
    pub decoder: DenseNet,
    pub channel: ChannelSpec,
}

pub fn su_role(task: Task) -> String {
    format!("SU{}", task.id())
}

impl SuModel {
    pub fn new(task: Task, arch: SuArch, rng: &mut Rng64) -> Result<Self> {
        use Activation::*;
        if arch.d == 0 {
            return Err(Error::InvalidArgument("channel dimension d must be >= 1".into()));
        }
        Ok(Self {
            task,
            trunk: DenseNet::init(&[arch.input_dim, arch.hidden, arch.hidden], &[Relu, Relu], rng)?,
            mu_head: DenseNet::init(&[arch.hidden, arch.d], &[Tanh], rng)?,
            sigma_head: DenseNet::init(&[arch.hidden, arch.d], &[Sigmoid], rng)?,
            decoder: DenseNet::init(
                &[arch.d, arch.decoder_hidden, task.head_dim()],
                &[Relu, task.head_activation()],
                rng,
            )?,
            channel: ChannelSpec::new(arch.d, 0.0)?,
        })
    }

    pub fn d(&self) -> usize {
        self.mu_head.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn encode(&self, c: &Array2<f64>) -> Result<GaussianLatent> {
        let h = self.trunk.predict(c)?;
        GaussianLatent::new(self.mu_head.predict(&h)?, self.sigma_head.predict(&h)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(su_role(self.task))
            .with_meta("task", self.task.id())
            .with_meta("d", self.d())
            .with_meta("noise_std", format!("{:e}", self.channel.noise_std))
            .with_net("trunk", &self.trunk)
            .with_net("mu", &self.mu_head)
            .with_net("sigma", &self.sigma_head)
            .with_net("decoder", &self.decoder)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let task = Task::from_id(ckpt.meta_value("task")?)?;
        ckpt.expect_role(&su_role(task))?;
        let model = Self {
            task,
            trunk: ckpt.net("trunk")?.clone(),
            mu_head: ckpt.net("mu")?.clone(),
            sigma_head: ckpt.net("sigma")?.clone(),
            decoder: ckpt.net("decoder")?.clone(),
            channel: ChannelSpec::new(ckpt.meta_value("d")?, ckpt.meta_value("noise_std")?)?,
        };
        let d = model.d();
        if model.sigma_head.output_dim() != d
            || model.decoder.input_dim() != d
            || model.channel.dim != d
            || model.decoder.output_dim() != task.head_dim()
        {
            return Err(Error::Checkpoint("SU networks do not chain".into()));
        }
        Ok(model)
    }
}

/// Encoder inputs for every sample: a CU posterior to sample from, or fixed
/// feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceFeatures {
    pub mu: Array2<f64>,
    pub sigma: Option<Array2<f64>>,
}

impl SourceFeatures {
    /// Precomputes the frozen CU posterior of every observation.
    pub fn from_cu(cu: &CuModel, data: &Dataset, force: bool) -> Result<Self> {
        if !cu.is_trained() && !force {
            return Err(Error::Untrained);
        }
        let lat = cu.encode_all(data.images())?;
        Ok(Self {
            mu: lat.mu,
            sigma: Some(lat.sigma),
        })
    }

    /// Observations fed straight to the SU encoder.
    pub fn raw(data: &Dataset) -> Self {
        Self {
            mu: data.images().clone(),
            sigma: None,
        }
    }

    pub fn len(&self) -> usize {
        self.mu.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.mu.ncols()
    }

    /// Rows `idx`, sampled as `mu + sigma * eps` when a posterior is held.
    /// Draws from `rng` only in that case.
    pub fn draw(&self, idx: &[usize], rng: &mut Rng64) -> Array2<f64> {
        let mu = self.mu.select(ndarray::Axis(0), idx);
        match &self.sigma {
            Some(sigma) => {
                let eps = rng.normal_matrix(idx.len(), self.dim());
                mu + &(sigma.select(ndarray::Axis(0), idx) * eps)
            }
            None => mu,
        }
    }

    pub fn means(&self, idx: &[usize]) -> Array2<f64> {
        self.mu.select(ndarray::Axis(0), idx)
    }
}

/// Prior mode plus the current ratio fit, if any.
#[derive(Debug, Clone, Default)]
pub struct PriorState {
    pub mode: PriorMode,
    pub ratio: Option<DreModel>,
}

impl PriorState {
    pub fn new(mode: PriorMode) -> Self {
        Self { mode, ratio: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    /// Mean decoder log-likelihood.
    pub llh: f64,
    pub kl: f64,
    /// Mean `log r(x)`; zero without a ratio fit.
    pub ratio_term: f64,
    pub total: f64,
    pub lambda: f64,
    pub kl_clamped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuGrads {
    pub trunk: GradientSet,
    pub mu_head: GradientSet,
    pub sigma_head: GradientSet,
    pub decoder: GradientSet,
}

impl SuGrads {
    pub fn sets(&self) -> [&GradientSet; 4] {
        [&self.trunk, &self.mu_head, &self.sigma_head, &self.decoder]
    }

    pub fn is_finite(&self) -> bool {
        self.sets().iter().all(|g| g.is_finite())
    }
}

/// Reparameterization and channel noise for one minibatch, one matrix per
/// Monte Carlo sample. `channel` holds the additive noise itself.
#[derive(Debug, Clone)]
pub struct SuNoise {
    pub eps: Vec<Array2<f64>>,
    pub channel: Vec<Array2<f64>>,
}

impl SuNoise {
    pub fn draw(m: usize, ch: &ChannelSpec, samples: usize, rng: &mut Rng64) -> Self {
        let mut eps = Vec::with_capacity(samples);
        let mut channel = Vec::with_capacity(samples);
        for _ in 0..samples {
            eps.push(rng.normal_matrix(m, ch.dim));
            channel.push(rng.normal_matrix(m, ch.dim) * ch.noise_std);
        }
        Self { eps, channel }
    }
}

/// Information-bottleneck loss `-llh + lambda (kl - ratio_term)` and its
/// gradient. The ratio term is reported but treated as a constant.
pub fn su_loss_with_noise(
    model: &SuModel,
    c: &Array2<f64>,
    targets: &[usize],
    prior: &PriorState,
    lambda: f64,
    noise: &SuNoise,
) -> Result<(LossBreakdown, SuGrads)> {
    let m = c.nrows();
    if m == 0 || noise.eps.is_empty() || noise.eps.len() != noise.channel.len() {
        return Err(Error::InvalidArgument("SU loss needs a non-empty batch and matched noise".into()));
    }
    let trunk = model.trunk.forward(c)?;
    let mu_c = model.mu_head.forward(trunk.output())?;
    let sigma_c = model.sigma_head.forward(trunk.output())?;
    let lat = GaussianLatent::new(mu_c.output().clone(), sigma_c.output().clone())?;

    let kl = kl_terms(prior.mode.family(), &lat)?;
    let kl_mean = kl.per_row.sum() / m as f64;
    let mut d_mu = kl.d_mu * (lambda / m as f64);
    let mut d_sigma = kl.d_sigma * (lambda / m as f64);

    let samples = noise.eps.len();
    let scale = 1.0 / (m * samples) as f64;
    let mut llh = 0.0;
    let mut ratio_term = 0.0;
    let mut g_dec = GradientSet::zeros_like(&model.decoder);
    for (eps, n) in noise.eps.iter().zip(&noise.channel) {
        let x = lat.sample_with(eps)?;
        if n.dim() != x.dim() {
            return Err(Error::shape("channel noise columns", x.ncols(), n.ncols()));
        }
        let received = &x + n;
        let cache = model.decoder.forward(&received)?;
        let (nll, d_logits) = model.task.nll(cache.logits(), targets)?;
        llh -= nll.sum() * scale;
        if prior.mode.uses_ratio() {
            if let Some(ratio) = &prior.ratio {
                ratio_term += ratio.log_ratio(x.view())?.sum() * scale;
            }
        }
        let (g, d_x) = model.decoder.backward_from_logits(&cache, &(d_logits * scale))?;
        g_dec.add_assign(&g);
        d_mu += &d_x;
        Zip::from(&mut d_sigma).and(&d_x).and(eps).for_each(|s, &g, &e| *s += g * e);
    }
    let (g_mu, dh_mu) = model.mu_head.backward(&mu_c, &d_mu)?;
    let (g_sigma, dh_sigma) = model.sigma_head.backward(&sigma_c, &d_sigma)?;
    let (g_trunk, _) = model.trunk.backward(&trunk, &(dh_mu + dh_sigma))?;

    let total = -llh + lambda * (kl_mean - ratio_term);
    let breakdown = LossBreakdown {
        llh,
        kl: kl_mean,
        ratio_term,
        total,
        lambda,
        kl_clamped: kl.clamped,
    };
    if ![llh, kl_mean, ratio_term, total].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("SU loss {breakdown:?}")));
    }
    Ok((
        breakdown,
        SuGrads {
            trunk: g_trunk,
            mu_head: g_mu,
            sigma_head: g_sigma,
            decoder: g_dec,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lambda: f64,
    pub samples: usize,
    pub snr_db: f64,
    pub prior: PriorMode,
    pub dre: DreConfig,
    /// Samples per class for each ratio refit.
    pub dre_samples: usize,
    /// Rows used to measure signal power for the SNR calibration.
    pub calibration_rows: usize,
    pub eval_draws: usize,
}

impl Default for SuConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 30,
            batch: 128,
            lambda: 0.01,
            samples: 1,
            snr_db: 10.0,
            prior: PriorMode::EpGaussian,
            dre: DreConfig::default(),
            dre_samples: 2000,
            calibration_rows: 1024,
            eval_draws: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuEpochMetrics {
    pub epoch: usize,
    pub llh: f64,
    pub kl: f64,
    pub ratio_term: f64,
    pub total: f64,
    pub test_error: Option<f64>,
}

/// Labelled evaluation data for per-epoch test error.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub features: &'a SourceFeatures,
    pub labels: &'a [usize],
}

fn random_rows(n: usize, k: usize, rng: &mut Rng64) -> Vec<usize> {
    (0..k).map(|_| rng.below(n as u64) as usize).collect()
}

/// Sets the channel noise so that `snr_db` holds against the mean power of
/// encoder outputs on a random calibration batch.
pub fn calibrate_channel(
    model: &mut SuModel,
    features: &SourceFeatures,
    snr_db: f64,
    rows: usize,
    rng: &mut Rng64,
) -> Result<()> {
    let idx = random_rows(features.len(), rows.max(1), rng);
    let c = features.draw(&idx, rng);
    let lat = model.encode(&c)?;
    let eps = rng.normal_matrix(lat.batch(), lat.dim());
    let x = lat.sample_with(&eps)?;
    let power = x.mapv(|v| v * v).mean().expect("non-empty");
    model.channel = ChannelSpec::from_snr_db(model.d(), snr_db, power)?;
    Ok(())
}

/// Fits `r(x) = p(x) / q(x)` between current encoder outputs and reference
/// samples from the prior family.
pub fn refit_ratio(
    model: &SuModel,
    features: &SourceFeatures,
    family: PriorFamily,
    cfg: &DreConfig,
    samples: usize,
    rng: &mut Rng64,
) -> Result<(DreModel, dre::RatioFitReport)> {
    let idx = random_rows(features.len(), samples, rng);
    let c = features.draw(&idx, rng);
    let lat = model.encode(&c)?;
    let eps = rng.normal_matrix(lat.batch(), lat.dim());
    let x = lat.sample_with(&eps)?;
    let q = family.sample(samples, model.d(), rng);
    dre::fit(x.view(), q.view(), cfg)
}

fn apply_sgd(model: &mut SuModel, g: &SuGrads, lr: f64) -> Result<()> {
    sgd_step(&mut model.trunk, &g.trunk, lr)?;
    sgd_step(&mut model.mu_head, &g.mu_head, lr)?;
    sgd_step(&mut model.sigma_head, &g.sigma_head, lr)?;
    sgd_step(&mut model.decoder, &g.decoder, lr)
}

/// Trains one SU with plain SGD. Each epoch recalibrates the channel, and
/// in ratio modes refits the density ratio from the second epoch on.
///
/// Random streams: `su-order` (minibatch order), `su-noise` (per minibatch:
/// CU sample, encoder noise, channel noise), `su-calib`, `su-dre`,
/// `su-eval`.
pub fn train_su(
    model: &mut SuModel,
    train: &SourceFeatures,
    labels: &[usize],
    test: Option<EvalSet<'_>>,
    cfg: &SuConfig,
    seeds: &SeedStream,
) -> Result<Vec<SuEpochMetrics>> {
    if cfg.epochs == 0 || cfg.samples == 0 {
        return Err(Error::InvalidArgument("SU epochs and samples must be >= 1".into()));
    }
    if train.dim() != model.input_dim() {
        return Err(Error::shape("SU input", model.input_dim(), train.dim()));
    }
    if labels.len() != train.len() {
        return Err(Error::shape("SU labels", train.len(), labels.len()));
    }
    let mut order_rng = seeds.rng("su-order", 0);
    let mut noise_rng = seeds.rng("su-noise", 0);
    let mut calib_rng = seeds.rng("su-calib", 0);
    let mut dre_rng = seeds.rng("su-dre", 0);
    let mut prior = PriorState::new(cfg.prior);
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let snapshot = model.clone();
        let outcome = (|| -> Result<SuEpochMetrics> {
            calibrate_channel(model, train, cfg.snr_db, cfg.calibration_rows, &mut calib_rng)?;
            if cfg.prior.uses_ratio() && epoch > 1 {
                let (ratio, report) =
                    refit_ratio(model, train, cfg.prior.family(), &cfg.dre, cfg.dre_samples, &mut dre_rng)?;
                log::debug!("epoch {epoch} ratio fit: {report:?}");
                prior.ratio = Some(ratio);
            }
            let (mut sums, mut steps) = ([0.0; 4], 0usize);
            for idx in minibatches(train.len(), cfg.batch, &mut order_rng)? {
                let c = train.draw(&idx, &mut noise_rng);
                let noise = SuNoise::draw(idx.len(), &model.channel, cfg.samples, &mut noise_rng);
                let targets: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let (loss, grads) = su_loss_with_noise(model, &c, &targets, &prior, cfg.lambda, &noise)?;
                if !grads.is_finite() {
                    return Err(Error::NonFinite("SU gradient".into()));
                }
                apply_sgd(model, &grads, cfg.lr)?;
                for (s, v) in sums.iter_mut().zip([loss.llh, loss.kl, loss.ratio_term, loss.total]) {
                    *s += v;
                }
                steps += 1;
            }
            let test_error = match test {
                Some(t) => Some(evaluate_task(
                    model,
                    t.features,
                    t.labels,
                    cfg.eval_draws,
                    &mut seeds.rng("su-eval", epoch as u64),
                    false,
                )?),
                None => None,
            };
            let n = steps as f64;
            Ok(SuEpochMetrics {
                epoch,
                llh: sums[0] / n,
                kl: sums[1] / n,
                ratio_term: sums[2] / n,
                total: sums[3] / n,
                test_error,
            })
        })();
        match outcome {
            Ok(row) => {
                log::info!(
                    "su{} epoch {epoch}: total {:.4} llh {:.4} kl {:.3} err {:?}",
                    model.task.id(),
                    row.total,
                    row.llh,
                    row.kl,
                    row.test_error
                );
                metrics.push(row);
            }
            Err(e @ Error::NonFinite(_)) => {
                *model = snapshot;
                return Err(Error::Diverged {
                    epoch,
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(metrics)
}

/// Fraction of wrong hard decisions after sending encoder samples through
/// the channel, averaged over `draws` independent noise realizations. With
/// `deterministic` the CU and SU means are transmitted instead of samples.
pub fn evaluate_task(
    model: &SuModel,
    features: &SourceFeatures,
    labels: &[usize],
    draws: usize,
    rng: &mut Rng64,
    deterministic: bool,
) -> Result<f64> {
    const CHUNK: usize = 2048;
    if draws == 0 || features.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs samples and at least one draw".into()));
    }
    if labels.len() != features.len() {
        return Err(Error::shape("evaluation labels", features.len(), labels.len()));
    }
    let mut wrong = 0usize;
    for _ in 0..draws {
        for start in (0..features.len()).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(features.len())).collect();
            let c = if deterministic {
                features.means(&idx)
            } else {
                features.draw(&idx, rng)
            };
            let lat = model.encode(&c)?;
            let x = if deterministic {
                lat.mu.clone()
            } else {
                let eps = rng.normal_matrix(lat.batch(), lat.dim());
                lat.sample_with(&eps)?
            };
            let received = awgn(x.view(), &model.channel, rng)?;
            let out = model.decoder.predict(&received)?;
            wrong += model
                .task
                .decide(&out)
                .iter()
                .zip(&labels[start..])
                .filter(|(a, b)| a != b)
                .count();
        }
    }
    Ok(wrong as f64 / (features.len() * draws) as f64)
}

/// Convenience wrapper: features from a frozen CU and the given datasets.
pub fn train_su_with_cu(
    model: &mut SuModel,
    cu: &CuModel,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &SuConfig,
    seeds: &SeedStream,
) -> Result<Vec<SuEpochMetrics>> {
    let train_f = SourceFeatures::from_cu(cu, train, false)?;
    let labels = train.labels(model.task);
    let test_f = test.map(|t| SourceFeatures::from_cu(cu, t, false)).transpose()?;
    let test_labels = test.map(|t| t.labels(model.task));
    let eval = match (&test_f, &test_labels) {
        (Some(f), Some(l)) => Some(EvalSet { features: f, labels: l }),
        _ => None,
    };
    train_su(model, &train_f, &labels, eval, cfg, seeds)
}

/// First `n` rows of a feature set, for quick checks.
pub fn head_rows(features: &SourceFeatures, n: usize) -> SourceFeatures {
    let n = n.min(features.len());
    SourceFeatures {
        mu: features.mu.slice(s![..n, ..]).to_owned(),
        sigma: features.sigma.as_ref().map(|s| s.slice(s![..n, ..]).to_owned()),
    }
}

#[cfg(test)]
mod tests;
