//! Common unit (CU): a shared Gaussian encoder `p(c | S)` trained to keep
//! the information every task needs, using one auxiliary decoder per task.

use ndarray::{s, Array2, Axis, Zip};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nnet::{Activation, AdamConfig, AdamState, Checkpoint, DenseNet, ForwardCache, GradientSet};
use crate::semsource::{minibatches, Dataset, Task, OBSERVATION_DIM};
use crate::stochastic::{GaussianLatent, Rng64, SeedStream};

pub const CU_ROLE: &str = "CU";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CuArch {
    pub input_dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub aux_hidden: usize,
}

impl Default for CuArch {
    fn default() -> Self {
        Self {
            input_dim: OBSERVATION_DIM,
            hidden: 256,
            latent_dim: 128,
            aux_hidden: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CuModel {
    pub trunk: DenseNet,
    pub mu_head: DenseNet,
    pub sigma_head: DenseNet,
    /// Auxiliary decoders, indexed like [`Task::ALL`].
    pub aux: [DenseNet; 2],
    trained: bool,
}

fn aux_index(task: Task) -> usize {
    match task {
        Task::Binary => 0,
        Task::Digit => 1,
    }
}

impl CuModel {
    pub fn new(arch: CuArch, rng: &mut Rng64) -> Result<Self> {
        use Activation::*;
        let trunk = DenseNet::init(&[arch.input_dim, arch.hidden, arch.hidden], &[Relu, Relu], rng)?;
        let mu_head = DenseNet::init(&[arch.hidden, arch.latent_dim], &[Linear], rng)?;
        let sigma_head = DenseNet::init(&[arch.hidden, arch.latent_dim], &[Linear], rng)?;
        let [a, b] = Task::ALL.map(|t| {
            DenseNet::init(
                &[arch.latent_dim, arch.aux_hidden, t.head_dim()],
                &[Relu, t.head_activation()],
                rng,
            )
        });
        let aux = [a?, b?];
        Ok(Self {
            trunk,
            mu_head,
            sigma_head,
            aux,
            trained: false,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.mu_head.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn aux(&self, task: Task) -> &DenseNet {
        &self.aux[aux_index(task)]
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// Per-row `(mu, sigma)` of `p(c | S)`. The sigma head is linear, so
    /// entries may be negative; only `sigma^2` matters for the sample law.
    pub fn encode(&self, batch: &Array2<f64>) -> Result<GaussianLatent> {
        let h = self.trunk.predict(batch)?;
        GaussianLatent::new(self.mu_head.predict(&h)?, self.sigma_head.predict(&h)?)
    }

    /// [`encode`](Self::encode) over a large matrix in row chunks.
    pub fn encode_all(&self, rows: &Array2<f64>) -> Result<GaussianLatent> {
        const CHUNK: usize = 2048;
        let k = self.latent_dim();
        let mut mu = Array2::zeros((rows.nrows(), k));
        let mut sigma = Array2::zeros((rows.nrows(), k));
        for start in (0..rows.nrows()).step_by(CHUNK) {
            let end = (start + CHUNK).min(rows.nrows());
            let lat = self.encode(&rows.slice(s![start..end, ..]).to_owned())?;
            mu.slice_mut(s![start..end, ..]).assign(&lat.mu);
            sigma.slice_mut(s![start..end, ..]).assign(&lat.sigma);
        }
        GaussianLatent::new(mu, sigma)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(CU_ROLE)
            .with_meta("trained", self.trained)
            .with_meta("latent_dim", self.latent_dim())
            .with_net("trunk", &self.trunk)
            .with_net("mu", &self.mu_head)
            .with_net("sigma", &self.sigma_head)
            .with_net("aux1", &self.aux[0])
            .with_net("aux2", &self.aux[1])
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_role(CU_ROLE)?;
        let model = Self {
            trunk: ckpt.net("trunk")?.clone(),
            mu_head: ckpt.net("mu")?.clone(),
            sigma_head: ckpt.net("sigma")?.clone(),
            aux: [ckpt.net("aux1")?.clone(), ckpt.net("aux2")?.clone()],
            trained: ckpt.meta_value("trained")?,
        };
        let k = model.latent_dim();
        if model.trunk.output_dim() != model.mu_head.input_dim()
            || model.sigma_head.input_dim() != model.trunk.output_dim()
            || model.sigma_head.output_dim() != k
            || model.aux.iter().any(|a| a.input_dim() != k)
        {
            return Err(Error::Checkpoint("CU networks do not chain".into()));
        }
        Ok(model)
    }
}

/// One task's minibatch with its reparameterization noise, one matrix per
/// Monte Carlo sample.
#[derive(Debug, Clone)]
pub struct CuTaskBatch {
    pub task: Task,
    pub inputs: Array2<f64>,
    pub targets: Vec<usize>,
    pub eps: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CuLoss {
    pub total: f64,
    pub per_task: Vec<(Task, f64)>,
    /// Correct hard decisions of each aux decoder on the first sample.
    pub correct: Vec<(Task, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CuGrads {
    pub trunk: GradientSet,
    pub mu_head: GradientSet,
    pub sigma_head: GradientSet,
    pub aux: [GradientSet; 2],
}

impl CuGrads {
    pub fn zeros_like(m: &CuModel) -> Self {
        Self {
            trunk: GradientSet::zeros_like(&m.trunk),
            mu_head: GradientSet::zeros_like(&m.mu_head),
            sigma_head: GradientSet::zeros_like(&m.sigma_head),
            aux: [GradientSet::zeros_like(&m.aux[0]), GradientSet::zeros_like(&m.aux[1])],
        }
    }

    fn sets(&self) -> [&GradientSet; 5] {
        [&self.trunk, &self.mu_head, &self.sigma_head, &self.aux[0], &self.aux[1]]
    }

    pub fn is_finite(&self) -> bool {
        self.sets().iter().all(|g| g.is_finite())
    }

    pub fn add_assign(&mut self, other: &CuGrads) {
        self.trunk.add_assign(&other.trunk);
        self.mu_head.add_assign(&other.mu_head);
        self.sigma_head.add_assign(&other.sigma_head);
        self.aux[0].add_assign(&other.aux[0]);
        self.aux[1].add_assign(&other.aux[1]);
    }
}

struct EncoderPass {
    trunk: ForwardCache,
    mu: ForwardCache,
    sigma: ForwardCache,
}

/// Negative Infomax estimate `-sum_n mean_m mean_l log q(z_n | c)` with
/// `c = mu + sigma * eps` and the noise supplied by the caller.
pub fn cu_loss_with_noise(model: &CuModel, batches: &[CuTaskBatch]) -> Result<(CuLoss, CuGrads)> {
    let mut grads = CuGrads::zeros_like(model);
    let mut loss = CuLoss {
        total: 0.0,
        per_task: Vec::new(),
        correct: Vec::new(),
    };
    for b in batches {
        let (task_loss, correct) = task_term(model, b, &mut grads)?;
        loss.total += task_loss;
        loss.per_task.push((b.task, task_loss));
        loss.correct.push((b.task, correct, b.targets.len()));
    }
    if !loss.total.is_finite() {
        return Err(Error::NonFinite(format!("CU loss ({:?})", loss.per_task)));
    }
    Ok((loss, grads))
}

fn task_term(model: &CuModel, b: &CuTaskBatch, grads: &mut CuGrads) -> Result<(f64, usize)> {
    if b.eps.is_empty() {
        return Err(Error::InvalidArgument("at least one Monte Carlo sample is required".into()));
    }
    let m = b.inputs.nrows();
    if m == 0 {
        return Err(Error::InvalidArgument("empty CU minibatch".into()));
    }
    let trunk = model.trunk.forward(&b.inputs)?;
    let pass = EncoderPass {
        mu: model.mu_head.forward(trunk.output())?,
        sigma: model.sigma_head.forward(trunk.output())?,
        trunk,
    };
    let lat = GaussianLatent::new(pass.mu.output().clone(), pass.sigma.output().clone())?;
    let aux = model.aux(b.task);
    let scale = 1.0 / (m * b.eps.len()) as f64;
    let mut d_mu = Array2::zeros(lat.mu.raw_dim());
    let mut d_sigma = Array2::zeros(lat.mu.raw_dim());
    let mut total = 0.0;
    let mut correct = 0;
    for (l, eps) in b.eps.iter().enumerate() {
        let c = lat.sample_with(eps)?;
        let cache = aux.forward(&c)?;
        let (nll, mut d_logits) = b.task.nll(cache.logits(), &b.targets)?;
        total += nll.sum() * scale;
        if l == 0 {
            correct = b
                .task
                .decide(cache.output())
                .iter()
                .zip(&b.targets)
                .filter(|(a, b)| a == b)
                .count();
        }
        d_logits *= scale;
        let (g_aux, d_c) = aux.backward_from_logits(&cache, &d_logits)?;
        grads.aux[aux_index(b.task)].add_assign(&g_aux);
        d_mu += &d_c;
        Zip::from(&mut d_sigma).and(&d_c).and(eps).for_each(|s, &g, &e| *s += g * e);
    }
    let (g_mu, dh_mu) = model.mu_head.backward(&pass.mu, &d_mu)?;
    let (g_sigma, dh_sigma) = model.sigma_head.backward(&pass.sigma, &d_sigma)?;
    let (g_trunk, _) = model.trunk.backward(&pass.trunk, &(dh_mu + dh_sigma))?;
    grads.mu_head.add_assign(&g_mu);
    grads.sigma_head.add_assign(&g_sigma);
    grads.trunk.add_assign(&g_trunk);
    Ok((total, correct))
}

/// Draws the reparameterization noise for each batch and evaluates the loss.
pub fn cu_loss(
    model: &CuModel,
    tasks: &[(Task, Array2<f64>, Vec<usize>)],
    samples: usize,
    rng: &mut Rng64,
) -> Result<(CuLoss, CuGrads)> {
    let k = model.latent_dim();
    let batches: Vec<CuTaskBatch> = tasks
        .iter()
        .map(|(task, inputs, targets)| CuTaskBatch {
            task: *task,
            eps: (0..samples).map(|_| rng.normal_matrix(inputs.nrows(), k)).collect(),
            inputs: inputs.clone(),
            targets: targets.clone(),
        })
        .collect();
    cu_loss_with_noise(model, &batches)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CuConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Monte Carlo samples of `c` per observation.
    pub samples: usize,
}

impl Default for CuConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 20,
            batch: 128,
            samples: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CuEpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub acc_task1: f64,
    pub acc_task2: f64,
}

struct CuOptim {
    cfg: AdamConfig,
    states: [AdamState; 5],
}

impl CuOptim {
    fn new(m: &CuModel, lr: f64) -> Self {
        Self {
            cfg: AdamConfig { lr, ..Default::default() },
            states: [
                AdamState::new(&m.trunk),
                AdamState::new(&m.mu_head),
                AdamState::new(&m.sigma_head),
                AdamState::new(&m.aux[0]),
                AdamState::new(&m.aux[1]),
            ],
        }
    }

    fn step(&mut self, m: &mut CuModel, g: &CuGrads) -> Result<()> {
        let [s0, s1, s2, s3, s4] = &mut self.states;
        let [a0, a1] = &mut m.aux;
        s0.step(&mut m.trunk, &g.trunk, &self.cfg)?;
        s1.step(&mut m.mu_head, &g.mu_head, &self.cfg)?;
        s2.step(&mut m.sigma_head, &g.sigma_head, &self.cfg)?;
        s3.step(a0, &g.aux[0], &self.cfg)?;
        s4.step(a1, &g.aux[1], &self.cfg)
    }
}

/// Trains the encoder and both aux decoders with Adam. Every step draws
/// one minibatch per task, sums the task gradients, then updates once.
///
/// On a non-finite loss or gradient the model is rolled back to the end of
/// the last completed epoch and [`Error::Diverged`] is returned.
pub fn train_cu(model: &mut CuModel, data: &Dataset, cfg: &CuConfig, seeds: &SeedStream) -> Result<Vec<CuEpochMetrics>> {
    if cfg.epochs == 0 || cfg.samples == 0 {
        return Err(Error::InvalidArgument("CU epochs and samples must be >= 1".into()));
    }
    if data.observation_dim() != model.input_dim() {
        return Err(Error::shape("CU input", model.input_dim(), data.observation_dim()));
    }
    let labels: Vec<Vec<usize>> = Task::ALL.iter().map(|&t| data.labels(t)).collect();
    let mut order_rng = seeds.rng("cu-order", 0);
    let mut noise_rng = seeds.rng("cu-noise", 0);
    let mut optim = CuOptim::new(model, cfg.lr);
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let snapshot = model.clone();
        let per_task: Vec<Vec<Vec<usize>>> = Task::ALL
            .iter()
            .map(|_| minibatches(data.len(), cfg.batch, &mut order_rng).map(|it| it.collect()))
            .collect::<Result<_>>()?;
        let steps = per_task[0].len();
        let (mut loss_sum, mut hits, mut seen) = (0.0, [0usize; 2], [0usize; 2]);
        for step in 0..steps {
            let tasks: Vec<(Task, Array2<f64>, Vec<usize>)> = Task::ALL
                .iter()
                .enumerate()
                .map(|(n, &t)| {
                    let idx = &per_task[n][step];
                    (t, data.rows(idx), idx.iter().map(|&i| labels[n][i]).collect())
                })
                .collect();
            let outcome = cu_loss(model, &tasks, cfg.samples, &mut noise_rng).and_then(|(loss, grads)| {
                if !grads.is_finite() {
                    return Err(Error::NonFinite("CU gradient".into()));
                }
                optim.step(model, &grads)?;
                Ok(loss)
            });
            let loss = match outcome {
                Ok(loss) => loss,
                Err(e @ Error::NonFinite(_)) => {
                    *model = snapshot;
                    return Err(Error::Diverged {
                        epoch,
                        reason: e.to_string(),
                    });
                }
                Err(e) => return Err(e),
            };
            loss_sum += loss.total;
            for (n, &(_, c, m)) in loss.correct.iter().enumerate() {
                hits[n] += c;
                seen[n] += m;
            }
        }
        let row = CuEpochMetrics {
            epoch,
            loss: loss_sum / steps as f64,
            acc_task1: hits[0] as f64 / seen[0] as f64,
            acc_task2: hits[1] as f64 / seen[1] as f64,
        };
        log::info!(
            "cu epoch {epoch}: loss {:.4} acc {:.4} / {:.4}",
            row.loss,
            row.acc_task1,
            row.acc_task2
        );
        metrics.push(row);
    }
    model.trained = true;
    Ok(metrics)
}

/// Latent samples paired with both task labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSamples {
    pub c: Array2<f64>,
    pub z1: Vec<usize>,
    pub z2: Vec<usize>,
}

/// One draw of `c ~ p(c | S)` per observation.
pub fn cu_sample_latents(model: &CuModel, data: &Dataset, rng: &mut Rng64, force: bool) -> Result<LatentSamples> {
    if !model.trained && !force {
        return Err(Error::Untrained);
    }
    let lat = model.encode_all(data.images())?;
    let eps = rng.normal_matrix(lat.batch(), lat.dim());
    Ok(LatentSamples {
        c: lat.sample_with(&eps)?,
        z1: data.labels(Task::Binary),
        z2: data.labels(Task::Digit),
    })
}

/// Mean of each latent coordinate over the rows.
pub fn latent_mean(c: &Array2<f64>) -> ndarray::Array1<f64> {
    c.mean_axis(Axis(0)).expect("non-empty")
}
