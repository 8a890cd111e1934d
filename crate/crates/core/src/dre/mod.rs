//! Kernel logistic-regression density-ratio estimation.
//!
//! Samples from `p` get label `+1`, samples from `q` get `-1`, and a
//! Gaussian-kernel logistic model without intercept is fitted over all of
//! them. Because the two classes are balanced, `exp` of the fitted logit
//! estimates `p(x) / q(x)`. The model keeps every training sample as a
//! kernel centre.

pub mod lbfgs;

use std::str::FromStr;
use std::time::Instant;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nnet::{sigmoid, softplus};
use crate::stochastic::Rng64;
pub use lbfgs::{LbfgsConfig, LbfgsResult, Objective};

/// Gram matrix `K[i, j] = exp(-|a_i - b_j|^2 / (2 bw^2))`.
pub fn gaussian_kernel(a: ArrayView2<f64>, b: ArrayView2<f64>, bandwidth: f64) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::shape("gaussian_kernel columns", a.ncols(), b.ncols()));
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::InvalidArgument(format!("kernel bandwidth must be > 0, got {bandwidth}")));
    }
    let an: Array1<f64> = a.map_axis(Axis(1), |r| r.dot(&r));
    let bn: Array1<f64> = b.map_axis(Axis(1), |r| r.dot(&r));
    let mut k = Array2::zeros((a.nrows(), b.nrows()));
    general_mat_mul(1.0, &a, &b.t(), 0.0, &mut k);
    let inv = -1.0 / (2.0 * bandwidth * bandwidth);
    Zip::indexed(&mut k).for_each(|(i, j), v| {
        let d2 = (an[i] + bn[j] - 2.0 * *v).max(0.0);
        *v = (d2 * inv).exp();
    });
    Ok(k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DreConfig {
    pub bandwidth: f64,
    pub gamma: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for DreConfig {
    fn default() -> Self {
        Self {
            bandwidth: 1.9,
            gamma: 1.5,
            max_iters: 500,
            grad_tol: 1e-6,
        }
    }
}

impl DreConfig {
    fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0) || !(self.gamma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bandwidth and gamma must be positive, got {} and {}",
                self.bandwidth, self.gamma
            )));
        }
        Ok(())
    }
}

/// A fitted ratio model: support points, weights and kernel settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DreModel {
    support: Array2<f64>,
    omega: Array1<f64>,
    bandwidth: f64,
    gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioFitReport {
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_inf_norm: f64,
    pub n_p: usize,
    pub n_q: usize,
}

impl DreModel {
    pub fn from_parts(support: Array2<f64>, omega: Array1<f64>, bandwidth: f64, gamma: f64) -> Result<Self> {
        if omega.len() != support.nrows() {
            return Err(Error::shape("ratio weights", support.nrows(), omega.len()));
        }
        DreConfig {
            bandwidth,
            gamma,
            ..Default::default()
        }
        .validate()?;
        Ok(Self {
            support,
            omega,
            bandwidth,
            gamma,
        })
    }

    pub fn support(&self) -> &Array2<f64> {
        &self.support
    }

    pub fn omega(&self) -> &Array1<f64> {
        &self.omega
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn dim(&self) -> usize {
        self.support.ncols()
    }

    /// `log r(x) = K(x, support) . omega` for each row of `x`.
    pub fn log_ratio(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::shape("ratio estimate input", self.dim(), x.ncols()));
        }
        Ok(gaussian_kernel(x, self.support.view(), self.bandwidth)?.dot(&self.omega))
    }

    pub fn estimate(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.log_ratio(x)?.mapv(f64::exp))
    }
}

fn check_finite(m: ArrayView2<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Penalized objective `sum log(1 + exp(-y K w)) + gamma |w|^2`.
///
/// Keeps `K w` for the current iterate and `K d` for the search ray so a
/// backtracking step costs O(n) instead of a matrix-vector product.
struct LogisticObjective<'a> {
    k: &'a Array2<f64>,
    y: &'a Array1<f64>,
    gamma: f64,
    w: Array1<f64>,
    kw: Array1<f64>,
    d: Array1<f64>,
    kd: Array1<f64>,
}

impl<'a> LogisticObjective<'a> {
    fn new(k: &'a Array2<f64>, y: &'a Array1<f64>, gamma: f64) -> Self {
        Self {
            k,
            y,
            gamma,
            w: Array1::zeros(0),
            kw: Array1::zeros(0),
            d: Array1::zeros(0),
            kd: Array1::zeros(0),
        }
    }

    fn loss(&self, f: &Array1<f64>, w: &Array1<f64>) -> f64 {
        let data: f64 = f.iter().zip(self.y).map(|(&fi, &yi)| softplus(-yi * fi)).sum();
        data + self.gamma * w.dot(w)
    }

    fn value_grad(&self, f: &Array1<f64>, w: &Array1<f64>) -> (f64, Array1<f64>) {
        let resid = Array1::from_iter(f.iter().zip(self.y).map(|(&fi, &yi)| -yi * sigmoid(-yi * fi)));
        // The Gram matrix is symmetric, so K^T r = K r with row-major access.
        let mut g = self.k.dot(&resid);
        g.scaled_add(2.0 * self.gamma, w);
        (self.loss(f, w), g)
    }
}

impl Objective for LogisticObjective<'_> {
    fn eval(&mut self, w: &Array1<f64>) -> (f64, Array1<f64>) {
        let f = self.k.dot(w);
        self.value_grad(&f, w)
    }

    fn begin_ray(&mut self, w: &Array1<f64>, d: &Array1<f64>) {
        if self.w.len() != w.len() || self.w != *w {
            self.kw = self.k.dot(w);
            self.w = w.clone();
        }
        self.kd = self.k.dot(d);
        self.d = d.clone();
    }

    fn value_on_ray(&mut self, t: f64) -> f64 {
        let f = &self.kw + &(t * &self.kd);
        let w = &self.w + &(t * &self.d);
        self.loss(&f, &w)
    }

    fn slope_on_ray(&mut self, t: f64) -> f64 {
        let data: f64 = self
            .kw
            .iter()
            .zip(&self.kd)
            .zip(self.y)
            .map(|((&f, &kd), &yi)| -yi * sigmoid(-yi * (f + t * kd)) * kd)
            .sum();
        let w = &self.w + &(t * &self.d);
        data + 2.0 * self.gamma * w.dot(&self.d)
    }

    fn finish_ray(&mut self, t: f64) -> (f64, Array1<f64>) {
        let f = &self.kw + &(t * &self.kd);
        let w = &self.w + &(t * &self.d);
        let out = self.value_grad(&f, &w);
        self.kw = f;
        self.w = w;
        out
    }
}

/// Fits the ratio `p / q` from equally many samples of each.
pub fn fit(samples_p: ArrayView2<f64>, samples_q: ArrayView2<f64>, cfg: &DreConfig) -> Result<(DreModel, RatioFitReport)> {
    fit_from(samples_p, samples_q, cfg, None)
}

/// [`fit`] with an explicit starting point for the weights.
pub fn fit_from(
    samples_p: ArrayView2<f64>,
    samples_q: ArrayView2<f64>,
    cfg: &DreConfig,
    init: Option<&Array1<f64>>,
) -> Result<(DreModel, RatioFitReport)> {
    cfg.validate()?;
    let (m, n) = (samples_p.nrows(), samples_q.nrows());
    if m != n {
        return Err(Error::InvalidArgument(format!("unbalanced samples: {m} from p vs {n} from q")));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("no samples to fit".into()));
    }
    if samples_p.ncols() != samples_q.ncols() {
        return Err(Error::shape("ratio sample dimension", samples_p.ncols(), samples_q.ncols()));
    }
    check_finite(samples_p, "samples from p")?;
    check_finite(samples_q, "samples from q")?;

    let mut support = Array2::zeros((2 * m, samples_p.ncols()));
    support.slice_mut(s![..m, ..]).assign(&samples_p);
    support.slice_mut(s![m.., ..]).assign(&samples_q);
    let y = Array1::from_iter((0..2 * m).map(|i| if i < m { 1.0 } else { -1.0 }));
    let k = gaussian_kernel(support.view(), support.view(), cfg.bandwidth)?;

    let x0 = match init {
        Some(w) if w.len() != 2 * m => return Err(Error::shape("initial ratio weights", 2 * m, w.len())),
        Some(w) => w.clone(),
        None => Array1::zeros(2 * m),
    };
    let solver = LbfgsConfig {
        max_iters: cfg.max_iters,
        grad_tol: cfg.grad_tol,
        ..Default::default()
    };
    let res = lbfgs::minimize_objective(&mut LogisticObjective::new(&k, &y, cfg.gamma), x0, &solver);
    if !res.converged && cfg.grad_tol > 0.0 {
        log::debug!(
            "ratio fit stopped after {} iterations with |g|_inf = {:.3e}",
            res.iterations,
            res.grad_inf_norm
        );
    }
    let report = RatioFitReport {
        objective: res.value,
        iterations: res.iterations,
        converged: res.converged,
        grad_inf_norm: res.grad_inf_norm,
        n_p: m,
        n_q: n,
    };
    let model = DreModel {
        support,
        omega: res.x,
        bandwidth: cfg.bandwidth,
        gamma: cfg.gamma,
    };
    Ok((model, report))
}

fn gaussian_log_pdf(x: &[f64], mu: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mu)
        .zip(var)
        .map(|((&xi, &m), &v)| -0.5 * ((xi - m).powi(2) / v + (2.0 * std::f64::consts::PI * v).ln()))
        .sum()
}

/// Exact `N(x; mu1, diag var1) / N(x; mu2, diag var2)`.
pub fn analytic_gaussian_ratio(x: &[f64], mu1: &[f64], var1: &[f64], mu2: &[f64], var2: &[f64]) -> Result<f64> {
    let d = x.len();
    for (name, v) in [("mu1", mu1), ("var1", var1), ("mu2", mu2), ("var2", var2)] {
        if v.len() != d {
            return Err(Error::shape(format!("analytic ratio {name}"), d, v.len()));
        }
    }
    if var1.iter().chain(var2).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("covariance diagonal must be positive".into()));
    }
    Ok((gaussian_log_pdf(x, mu1, var1) - gaussian_log_pdf(x, mu2, var2)).exp())
}

/// How to read the second parameter of the one-dimensional `N(1, 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SecondParam {
    #[default]
    Variance,
    Std,
}

impl FromStr for SecondParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variance" | "var" => Ok(Self::Variance),
            "std" => Ok(Self::Std),
            _ => Err(Error::InvalidArgument(format!("second parameter must be variance|std, got '{s}'"))),
        }
    }
}

/// Diagonal Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGaussian {
    pub fn sample(&self, n: usize, rng: &mut Rng64) -> Array2<f64> {
        let mut out = rng.normal_matrix(n, self.mean.len());
        for mut row in out.rows_mut() {
            for ((v, m), s2) in row.iter_mut().zip(&self.mean).zip(&self.var) {
                *v = m + s2.sqrt() * *v;
            }
        }
        out
    }
}

/// Benchmark pair `(p, q)` for dimension `dim`: `N(0,1)` vs `N(1,2)` in one
/// dimension, `N(1, I)` vs `N(0, 4I)` above.
pub fn benchmark_pair(dim: usize, second: SecondParam) -> (DiagGaussian, DiagGaussian) {
    if dim == 1 {
        let v2 = match second {
            SecondParam::Variance => 2.0,
            SecondParam::Std => 4.0,
        };
        (
            DiagGaussian { mean: vec![0.0], var: vec![1.0] },
            DiagGaussian { mean: vec![1.0], var: vec![v2] },
        )
    } else {
        (
            DiagGaussian {
                mean: vec![1.0; dim],
                var: vec![1.0; dim],
            },
            DiagGaussian {
                mean: vec![0.0; dim],
                var: vec![4.0; dim],
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DreBenchSpec {
    pub dims: Vec<usize>,
    pub sample_sizes: Vec<usize>,
    pub bandwidth: f64,
    pub gamma: f64,
    pub max_iters: usize,
    pub replicates: usize,
    /// Evaluation points per fit, drawn half from each distribution.
    pub eval_points: usize,
    pub second_param: SecondParam,
}

impl Default for DreBenchSpec {
    fn default() -> Self {
        Self {
            dims: vec![1, 2, 4],
            sample_sizes: vec![500, 1000, 2000],
            bandwidth: 1.9,
            gamma: 1.5,
            max_iters: 500,
            replicates: 1,
            eval_points: 1000,
            second_param: SecondParam::Variance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DreBenchRow {
    pub dim: usize,
    pub n_samples: usize,
    pub bandwidth: f64,
    pub gamma: f64,
    pub mae: f64,
    pub rmse: f64,
    pub fit_seconds: f64,
    pub converged: bool,
}

/// Absolute errors of `model` against the exact ratio at each row of `x`.
pub fn ratio_errors(model: &DreModel, x: ArrayView2<f64>, p: &DiagGaussian, q: &DiagGaussian) -> Result<(f64, f64)> {
    let est = model.estimate(x)?;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (row, e) in x.rows().into_iter().zip(&est) {
        let exact = analytic_gaussian_ratio(row.as_slice().expect("row-major"), &p.mean, &p.var, &q.mean, &q.var)?;
        abs += (e - exact).abs();
        sq += (e - exact).powi(2);
    }
    let n = x.nrows() as f64;
    Ok((abs / n, (sq / n).sqrt()))
}

/// Runs every `(dim, n_samples)` cell of `spec`; each row averages
/// `replicates` independent fits.
pub fn dre_benchmark(spec: &DreBenchSpec, rng: &mut Rng64) -> Result<Vec<DreBenchRow>> {
    if spec.dims.is_empty() || spec.sample_sizes.is_empty() || spec.replicates == 0 || spec.eval_points < 2 {
        return Err(Error::InvalidArgument("benchmark grid is empty".into()));
    }
    if spec.dims.contains(&0) || spec.sample_sizes.contains(&0) {
        return Err(Error::InvalidArgument("dimensions and sample sizes must be positive".into()));
    }
    let cfg = DreConfig {
        bandwidth: spec.bandwidth,
        gamma: spec.gamma,
        max_iters: spec.max_iters,
        ..Default::default()
    };
    let mut rows = Vec::new();
    for &dim in &spec.dims {
        let (p, q) = benchmark_pair(dim, spec.second_param);
        for &n in &spec.sample_sizes {
            let (mut mae, mut rmse, mut secs, mut converged) = (0.0, 0.0, 0.0, true);
            for _ in 0..spec.replicates {
                let xp = p.sample(n, rng);
                let xq = q.sample(n, rng);
                let started = Instant::now();
                let (model, report) = fit(xp.view(), xq.view(), &cfg)?;
                secs += started.elapsed().as_secs_f64();
                converged &= report.converged;
                let half = spec.eval_points / 2;
                let eval = ndarray::concatenate(
                    Axis(0),
                    &[p.sample(half, rng).view(), q.sample(spec.eval_points - half, rng).view()],
                )
                .expect("equal widths");
                let (a, r) = ratio_errors(&model, eval.view(), &p, &q)?;
                mae += a;
                rmse += r;
            }
            let reps = spec.replicates as f64;
            rows.push(DreBenchRow {
                dim,
                n_samples: n,
                bandwidth: spec.bandwidth,
                gamma: spec.gamma,
                mae: mae / reps,
                rmse: rmse / reps,
                fit_seconds: secs / reps,
                converged,
            });
        }
    }
    Ok(rows)
}
