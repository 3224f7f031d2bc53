//! Monte Carlo training of the reweighted masked objective.
//!
//! `mc_loss` is the unbiased single-sample estimator of the continuous-time
//! objective: draw `t ~ U(0,1)` and `z_t ~ q(z_t|x)` per batch element,
//! weight each masked position's cross-entropy by the total CE weight, and
//! average over the batch. `simple_batch_loss` is the mask-count
//! normalization used by masked image models (sum over the batch divided by
//! the total number of masks); in the large-batch limit the two differ by the
//! constant `E[N_masks] = L * integral of (1 - alpha_t)`.

use std::path::PathBuf;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserKind, Gradient};
use crate::exact_engine::{self, Budget, EmpiricalDataset, EngineError, TimeGrid};
use crate::masked_process::{sample_zt, TokenSeq};
use crate::quadrature;
use crate::rng as rngs;
use crate::schedules::{Schedule, ScheduleRegistry};
use crate::weightings::{self, WeightingSpec};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Weighting(#[from] crate::weightings::WeightingError),
    #[error(transparent)]
    Schedule(#[from] crate::schedules::ScheduleError),
    #[error(transparent)]
    Denoiser(#[from] crate::denoiser::DenoiserError),
    #[error("invalid config: {0}")]
    Config(String),
}

/// Optimizer selection; Adam defaults mirror the reference training setup at
/// toy scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.99
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Full training recipe; serializable as the CLI config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub spec: WeightingSpec,
    pub schedule: String,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub dataset: PathBuf,
    pub denoiser: DenoiserKind,
    /// Record exact metrics every this many steps.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Step count of the time grid used for exact evaluation.
    #[serde(default = "default_eval_steps")]
    pub eval_steps: usize,
    /// Stratify `t` across the batch instead of drawing i.i.d. uniforms.
    #[serde(default)]
    pub stratified_t: bool,
}

fn default_eval_every() -> usize {
    500
}
fn default_eval_steps() -> usize {
    32
}

impl TrainConfig {
    /// Shape and integrability checks; divergent CE-weight pairings are
    /// rejected here rather than mid-run.
    pub fn validate(&self, schedule: &Schedule) -> Result<(), TrainError> {
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning rate must be > 0".into()));
        }
        if self.eval_every < 1 {
            return Err(TrainError::Config("eval cadence must be >= 1".into()));
        }
        if !self.spec.ce_weight_integrable(schedule) {
            return Err(TrainError::Config(format!(
                "{} has a non-integrable CE weight on {}",
                self.spec.label(),
                schedule.name()
            )));
        }
        Ok(())
    }
}

/// One exact-evaluation record along the trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub step: usize,
    pub mc_loss: f64,
    pub exact_kl: f64,
    pub exact_elbo: f64,
}

/// The recorded training trajectory.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,mc_loss,exact_kl,exact_elbo\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.step, r.mc_loss, r.exact_kl, r.exact_elbo
            ));
        }
        out
    }

    pub fn final_kl(&self) -> Option<f64> {
        self.records.last().map(|r| r.exact_kl)
    }

    pub fn initial_kl(&self) -> Option<f64> {
        self.records.first().map(|r| r.exact_kl)
    }
}

/// Result of a training run; `diverged` carries the aborting step when the
/// loss went non-finite.
#[derive(Debug)]
pub struct TrainOutcome {
    pub trace: TrainTrace,
    pub denoiser: Denoiser,
    pub diverged: Option<usize>,
}

/// One Monte Carlo draw: a time and the correspondingly masked sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct McDraw {
    pub t: f64,
    pub z: TokenSeq,
}

/// Draw `(t_i, z_i)` for a batch. Default: i.i.d. `t ~ U(0,1)`; stratified
/// mode places one `t` per equal stratum with a shared uniform offset.
pub fn mc_draws(
    batch: &[TokenSeq],
    schedule: &Schedule,
    stratified: bool,
    rng: &mut impl Rng,
) -> Result<Vec<McDraw>, TrainError> {
    let mut draws = Vec::with_capacity(batch.len());
    let offset: f64 = if stratified { rng.gen() } else { 0.0 };
    for (i, x) in batch.iter().enumerate() {
        let t = if stratified {
            (i as f64 + offset) / batch.len() as f64
        } else {
            rng.gen()
        };
        let z = sample_zt(schedule, t, x, rng).map_err(EngineError::from)?;
        draws.push(McDraw { t, z });
    }
    Ok(draws)
}

/// The reweighted loss and gradient for fixed draws: each masked position's
/// cross-entropy is scaled by `ce_weight(spec, t_i)` and the batch is
/// averaged (divided by `|B|`).
pub fn mc_loss_from_draws(
    batch: &[TokenSeq],
    draws: &[McDraw],
    denoiser: &Denoiser,
    spec: &WeightingSpec,
    schedule: &Schedule,
) -> Result<(f64, Gradient), TrainError> {
    assert_eq!(batch.len(), draws.len());
    assert!(!batch.is_empty(), "batch must be nonempty");
    let mut total_loss = 0.0;
    let mut grad = Gradient::zeros(denoiser.param_count());
    let scale = 1.0 / batch.len() as f64;
    let mut weights = vec![0.0; batch[0].len()];
    for (x, draw) in batch.iter().zip(draws) {
        if !draw.z.has_mask() {
            continue; // zero contribution, and ce_weight may be infinite at t=0
        }
        let w = spec.ce_weight(schedule, draw.t)?;
        weights.fill(0.0);
        for (p, &tok) in draw.z.tokens().iter().enumerate() {
            if tok.is_mask() {
                weights[p] = w;
            }
        }
        let (loss, g) = denoiser.loss_and_grad(&draw.z, x, &weights);
        total_loss += scale * loss;
        grad.add_scaled(&g, scale);
    }
    Ok((total_loss, grad))
}

/// Unbiased estimator of the continuous-time reweighted objective.
pub fn mc_loss(
    batch: &[TokenSeq],
    denoiser: &Denoiser,
    spec: &WeightingSpec,
    schedule: &Schedule,
    rng: &mut impl Rng,
) -> Result<(f64, Gradient), TrainError> {
    let draws = mc_draws(batch, schedule, false, rng)?;
    mc_loss_from_draws(batch, &draws, denoiser, spec, schedule)
}

/// Mask-count normalization for fixed draws: per-mask cross-entropies summed
/// over the batch, divided by the total mask count; a zero-mask batch yields
/// zero loss and gradient.
pub fn simple_batch_loss_from_draws(
    batch: &[TokenSeq],
    draws: &[McDraw],
    denoiser: &Denoiser,
) -> (f64, Gradient) {
    assert_eq!(batch.len(), draws.len());
    assert!(!batch.is_empty(), "batch must be nonempty");
    let total_masks: usize = draws.iter().map(|d| d.z.mask_count()).sum();
    let mut grad = Gradient::zeros(denoiser.param_count());
    if total_masks == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / total_masks as f64;
    let mut total_loss = 0.0;
    let mut weights = vec![0.0; batch[0].len()];
    for (x, draw) in batch.iter().zip(draws) {
        if !draw.z.has_mask() {
            continue;
        }
        weights.fill(0.0);
        for (p, &tok) in draw.z.tokens().iter().enumerate() {
            if tok.is_mask() {
                weights[p] = 1.0;
            }
        }
        let (loss, g) = denoiser.loss_and_grad(&draw.z, x, &weights);
        total_loss += scale * loss;
        grad.add_scaled(&g, scale);
    }
    (total_loss, grad)
}

/// Mask-count-normalized batch loss with fresh draws.
pub fn simple_batch_loss(
    batch: &[TokenSeq],
    denoiser: &Denoiser,
    schedule: &Schedule,
    rng: &mut impl Rng,
) -> Result<(f64, Gradient), TrainError> {
    let draws = mc_draws(batch, schedule, false, rng)?;
    Ok(simple_batch_loss_from_draws(batch, &draws, denoiser))
}

/// `E[N_masks] = L * integral of (1 - alpha_t) dt`, by quadrature.
pub fn expected_mask_count(schedule: &Schedule, len: usize) -> Result<f64, TrainError> {
    let mut bad = None;
    let mut f = |t: f64| match schedule.alpha(t) {
        Ok(a) => 1.0 - a,
        Err(e) => {
            bad = Some(e);
            0.0
        }
    };
    let q = quadrature::integrate_adaptive(&mut f, 0.0, 1.0, 8, 1 << 14, 1e-12);
    match bad {
        Some(e) => Err(e.into()),
        None => Ok(len as f64 * q.value),
    }
}

/// Run the optimizer per `config`, resolving the dataset and schedule from
/// the config file fields.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let registry = ScheduleRegistry::new();
    let schedule = Schedule::from_name(&config.schedule, &registry)?;
    let dataset = EmpiricalDataset::load(&config.dataset)?;
    train_prepared(config, &dataset, &schedule)
}

/// The training loop on an already-loaded dataset. Deterministic per seed:
/// every random choice flows through named substreams of `config.seed`.
pub fn train_prepared(
    config: &TrainConfig,
    dataset: &EmpiricalDataset,
    schedule: &Schedule,
) -> Result<TrainOutcome, TrainError> {
    config.validate(schedule)?;
    let dims = crate::denoiser::DenoiserDims {
        len: dataset.seq_len(),
        vocab: dataset.vocab_size(),
    };
    let mut denoiser = Denoiser::init(config.denoiser, dims, config.seed)?;
    let eval_grid = TimeGrid::new(config.eval_steps);
    let budget = Budget::default();

    let picker = WeightedIndex::new(dataset.probs())
        .map_err(|e| TrainError::Config(format!("dataset probabilities: {e}")))?;
    let mut optimizer = Optimizer::new(config.optimizer, denoiser.param_count());
    let mut trace = TrainTrace::default();
    let mut batch: Vec<TokenSeq> = Vec::with_capacity(config.batch_size);
    // The step-0 record predates any batch; its loss slot is zero.
    let mut last_loss = 0.0;

    for step in 0..=config.steps {
        let record_now = step % config.eval_every == 0 || step == config.steps;
        if record_now {
            let exact_kl =
                exact_engine::exact_data_model_kl(dataset, &denoiser, schedule, &eval_grid, &budget)?;
            let exact_elbo = dataset.expect(|x| {
                exact_engine::elbo_discrete(x, &denoiser, schedule, &eval_grid)
                    .map(|b| b.total)
                    .unwrap_or(f64::NEG_INFINITY)
            });
            trace.records.push(TraceRecord {
                step,
                mc_loss: last_loss,
                exact_kl,
                exact_elbo,
            });
        }
        if step == config.steps {
            break;
        }

        let mut r = rngs::indexed_stream(config.seed, "train-step", step as u64);
        batch.clear();
        for _ in 0..config.batch_size {
            batch.push(dataset.sequence(picker.sample(&mut r)).clone());
        }
        let draws = mc_draws(&batch, schedule, config.stratified_t, &mut r)?;
        let (loss, grad) = mc_loss_from_draws(&batch, &draws, &denoiser, &config.spec, schedule)?;
        last_loss = loss;
        if !loss.is_finite() || grad.0.iter().any(|g| !g.is_finite()) {
            return Ok(TrainOutcome {
                trace,
                denoiser,
                diverged: Some(step),
            });
        }
        optimizer.apply(denoiser.params_mut(), &grad, config.learning_rate);
        if denoiser.params().iter().any(|p| !p.is_finite()) {
            return Ok(TrainOutcome {
                trace,
                denoiser,
                diverged: Some(step),
            });
        }
    }

    Ok(TrainOutcome {
        trace,
        denoiser,
        diverged: None,
    })
}

struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    fn new(kind: OptimizerKind, params: usize) -> Self {
        let state = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam { .. } => params,
        };
        Optimizer {
            kind,
            step: 0,
            m: vec![0.0; state],
            v: vec![0.0; state],
        }
    }

    fn apply(&mut self, params: &mut [f64], grad: &Gradient, lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(&grad.0) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.step += 1;
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for (i, (p, g)) in params.iter_mut().zip(&grad.0).enumerate() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

/// One row of a weighting comparison: training result plus the monotonicity
/// verdict of the weighting itself.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub spec: String,
    pub final_exact_kl: f64,
    pub final_exact_elbo: f64,
    pub monotone: bool,
    /// Average per-step denoising KL of the trained model on the eval grid.
    pub kl_profile: Vec<f64>,
}

/// Train one model per config under its own seed/budget and tabulate exact
/// end-of-run metrics.
pub fn compare_weightings(
    configs: &[TrainConfig],
    dataset: &EmpiricalDataset,
    schedule: &Schedule,
) -> Result<Vec<ComparisonRow>, TrainError> {
    let mut rows = Vec::with_capacity(configs.len());
    for config in configs {
        let outcome = train_prepared(config, dataset, schedule)?;
        let grid = TimeGrid::new(config.eval_steps);
        let mut profile = vec![0.0; grid.steps()];
        for (k, x) in dataset.sequences().iter().enumerate() {
            let terms = exact_engine::l_kl_terms(x, &outcome.denoiser, schedule, &grid)?;
            for (slot, term) in profile.iter_mut().zip(terms) {
                *slot += dataset.prob(k) * term;
            }
        }
        let monotone =
            weightings::check_monotone(&config.spec, schedule, &weightings::certification_grid())?
                .monotone;
        let last = outcome
            .trace
            .records
            .last()
            .ok_or_else(|| TrainError::Config("empty trace".into()))?;
        rows.push(ComparisonRow {
            spec: config.spec.label(),
            final_exact_kl: last.exact_kl,
            final_exact_elbo: last.exact_elbo,
            monotone,
            kl_profile: profile,
        });
    }
    Ok(rows)
}
