//! Exact, enumeration-based evaluation of the masked-diffusion objectives.
//!
//! On small instances — `(V+1)^L` states, finite datasets — every
//! expectation can be summed instead of sampled. That turns the two central
//! identities into machine-checkable statements:
//!
//! - the improved-bound ladder: each additional exact reverse step raises the
//!   average bound by exactly the marginal-vs-model KL of that step, and
//! - the summation swap: any weighted sum of ladder bounds equals a
//!   cumulative-weighted sum of per-step denoising KL terms plus a constant.
//!
//! Both sides of each identity are evaluated through deliberately different
//! accumulation paths so agreement is evidence, not tautology.

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::masked_process::{Token, TokenSeq};
use crate::quadrature::{self, Quadrature};
use crate::schedules::{Schedule, ScheduleError};
use crate::weightings::{WeightingError, WeightingSpec};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Weighting(#[from] WeightingError),
    #[error(transparent)]
    Kernel(#[from] crate::masked_process::KernelError),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("dataset parse error at line {line}, column {column}: {message}")]
    DatasetParse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("evidence state has probability zero under the dataset")]
    ZeroEvidence,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("instance too large: {states} states, {steps} steps (budget {max_states}/{max_steps})")]
    ResourceBudget {
        states: usize,
        steps: usize,
        max_states: usize,
        max_steps: usize,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Uniform time grid `t(i) = i / T`, `s(i) = (i - 1) / T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    steps: usize,
}

impl TimeGrid {
    pub fn new(steps: usize) -> Self {
        assert!(steps >= 1, "need at least one step");
        TimeGrid { steps }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn t(&self, i: usize) -> f64 {
        i as f64 / self.steps as f64
    }

    pub fn s(&self, i: usize) -> f64 {
        debug_assert!(i >= 1);
        (i - 1) as f64 / self.steps as f64
    }
}

/// Enumeration caps for full-chain marginalization.
#[derive(Debug, Clone, Copy)]
pub struct Budget {
    pub max_states: usize,
    pub max_steps: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            max_states: 4096,
            max_steps: 64,
        }
    }
}

/// A finite data distribution: distinct MASK-free sequences with
/// probabilities summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDataset {
    sequences: Vec<TokenSeq>,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DatasetRecord {
    tokens: Vec<i64>,
    prob: f64,
}

impl EmpiricalDataset {
    pub fn new(sequences: Vec<TokenSeq>, probs: Vec<f64>) -> Result<Self, EngineError> {
        if sequences.is_empty() || sequences.len() != probs.len() {
            return Err(EngineError::Dataset(format!(
                "{} sequences with {} probabilities",
                sequences.len(),
                probs.len()
            )));
        }
        let len = sequences[0].len();
        let vocab = sequences[0].vocab_size();
        for seq in &sequences {
            if seq.len() != len || seq.vocab_size() != vocab {
                return Err(EngineError::Dataset(
                    "sequences must share length and vocabulary".into(),
                ));
            }
            if seq.has_mask() {
                return Err(EngineError::Dataset(
                    "dataset sequences must be MASK-free".into(),
                ));
            }
        }
        for i in 0..sequences.len() {
            for j in i + 1..sequences.len() {
                if sequences[i] == sequences[j] {
                    return Err(EngineError::Dataset(format!(
                        "duplicate sequence at indices {i} and {j}"
                    )));
                }
            }
        }
        if probs.iter().any(|&p| !(p > 0.0)) {
            return Err(EngineError::Dataset(
                "probabilities must be strictly positive".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(EngineError::Dataset(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(EmpiricalDataset { sequences, probs })
    }

    /// Parse the JSON dataset format: an array of `{"tokens": [...], "prob": p}`.
    pub fn from_json(json: &str) -> Result<Self, EngineError> {
        let records: Vec<DatasetRecord> =
            serde_json::from_str(json).map_err(|e| EngineError::DatasetParse {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?;
        if records.is_empty() {
            return Err(EngineError::Dataset("dataset is empty".into()));
        }
        let mut max_token = 1i64;
        for (idx, rec) in records.iter().enumerate() {
            for &tok in &rec.tokens {
                if tok < 0 {
                    return Err(EngineError::Dataset(format!(
                        "record {idx}: negative token {tok} (MASK is not a data value)"
                    )));
                }
                max_token = max_token.max(tok);
            }
        }
        if max_token >= u16::MAX as i64 {
            return Err(EngineError::Dataset(format!(
                "token {max_token} exceeds the supported vocabulary"
            )));
        }
        let vocab = (max_token + 1) as u16;
        let mut sequences = Vec::with_capacity(records.len());
        let mut probs = Vec::with_capacity(records.len());
        for rec in &records {
            let values: Vec<u16> = rec.tokens.iter().map(|&t| t as u16).collect();
            sequences.push(
                TokenSeq::from_values(&values, vocab)
                    .map_err(|e| EngineError::Dataset(e.to_string()))?,
            );
            probs.push(rec.prob);
        }
        Self::new(sequences, probs)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, EngineError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let records: Vec<DatasetRecord> = self
            .sequences
            .iter()
            .zip(&self.probs)
            .map(|(seq, &prob)| DatasetRecord {
                tokens: seq
                    .tokens()
                    .iter()
                    .map(|t| match t {
                        Token::Value(v) => *v as i64,
                        Token::Mask => unreachable!("datasets are MASK-free"),
                    })
                    .collect(),
                prob,
            })
            .collect();
        serde_json::to_string_pretty(&records).expect("dataset serializes")
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequence(&self, idx: usize) -> &TokenSeq {
        &self.sequences[idx]
    }

    pub fn prob(&self, idx: usize) -> f64 {
        self.probs[idx]
    }

    pub fn sequences(&self) -> &[TokenSeq] {
        &self.sequences
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn seq_len(&self) -> usize {
        self.sequences[0].len()
    }

    pub fn vocab_size(&self) -> u16 {
        self.sequences[0].vocab_size()
    }

    /// `q(x)` for an arbitrary clean sequence (0 off support).
    pub fn prob_of(&self, x: &TokenSeq) -> f64 {
        self.sequences
            .iter()
            .position(|s| s == x)
            .map(|i| self.probs[i])
            .unwrap_or(0.0)
    }

    /// Average of `f` under `q(x)`.
    pub fn expect(&self, mut f: impl FnMut(&TokenSeq) -> f64) -> f64 {
        self.sequences
            .iter()
            .zip(&self.probs)
            .map(|(seq, &p)| p * f(seq))
            .sum()
    }
}

/// Every term of the discrete-time bound, with `total` assembled from them.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboBreakdown {
    pub reconstruction: f64,
    pub prior_kl: f64,
    /// Per-step denoising KL terms, index `j - 1` for steps `j = 1..=T`.
    pub kl_terms: Vec<f64>,
    pub total: f64,
}

// ---------------------------------------------------------------------------
// Mask-pattern enumeration
// ---------------------------------------------------------------------------

/// Visit every `z ~ q(z_t | x)` pattern with its probability: each position
/// is either kept or masked, independently with probability `1 - alpha`.
/// Zero-probability patterns are skipped.
fn for_each_pattern(x: &TokenSeq, alpha: f64, mut visit: impl FnMut(&TokenSeq, f64, u32)) {
    let len = x.len();
    debug_assert!(len <= 31, "pattern enumeration is for toy lengths");
    let patterns = 1u32 << len;
    let mut z = x.clone();
    for bits in 0..patterns {
        let masked = bits.count_ones() as i32;
        let kept = len as i32 - masked;
        let prob = alpha.powi(kept) * (1.0 - alpha).powi(masked);
        if prob == 0.0 {
            continue;
        }
        for position in 0..len {
            if bits & (1 << position) != 0 {
                z.set(position, Token::Mask);
            } else {
                z.set(position, x.get(position));
            }
        }
        visit(&z, prob, bits);
    }
}

// ---------------------------------------------------------------------------
// Optimal decoder
// ---------------------------------------------------------------------------

/// Exact Bayes posterior `q(x | z_t = z)` over the dataset support.
///
/// Errors when `z` has zero evidence (no dataset sequence is consistent and
/// reachable at time `t`).
pub fn optimal_decoder(
    dataset: &EmpiricalDataset,
    schedule: &Schedule,
    t: f64,
    z: &TokenSeq,
) -> Result<Vec<f64>, EngineError> {
    if z.len() != dataset.seq_len() || z.vocab_size() != dataset.vocab_size() {
        return Err(EngineError::ShapeMismatch(
            "evidence shape differs from dataset".into(),
        ));
    }
    let alpha = schedule.alpha(t)?;
    let mut weights = vec![0.0; dataset.len()];
    let mut total = 0.0;
    for (k, x) in dataset.sequences().iter().enumerate() {
        let mut likelihood = dataset.prob(k);
        for (p, &z_tok) in z.tokens().iter().enumerate() {
            likelihood *= match z_tok {
                Token::Mask => 1.0 - alpha,
                tok if tok == x.get(p) => alpha,
                _ => 0.0,
            };
            if likelihood == 0.0 {
                break;
            }
        }
        weights[k] = likelihood;
        total += likelihood;
    }
    if total <= 0.0 {
        return Err(EngineError::ZeroEvidence);
    }
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

/// The exact per-position posterior denoiser `mu*(z)[p, v] = q(x_p = v | z)`,
/// materialized as a tabular model. States with zero evidence fall back to
/// uniform; the forward process never reaches them.
pub fn optimal_denoiser(dataset: &EmpiricalDataset) -> Result<Denoiser, EngineError> {
    let dims = crate::denoiser::DenoiserDims {
        len: dataset.seq_len(),
        vocab: dataset.vocab_size(),
    };
    let vocab = dims.vocab as usize;
    let table = crate::denoiser::TabularDenoiser::from_fn(dims, |z| {
        let mut rows = vec![vec![0.0; vocab]; dims.len];
        let mut evidence = 0.0;
        for (k, x) in dataset.sequences().iter().enumerate() {
            let consistent = z
                .tokens()
                .iter()
                .enumerate()
                .all(|(p, &tok)| tok.is_mask() || tok == x.get(p));
            if consistent {
                evidence += dataset.prob(k);
                for (p, row) in rows.iter_mut().enumerate() {
                    if let Token::Value(v) = x.get(p) {
                        row[v as usize] += dataset.prob(k);
                    }
                }
            }
        }
        if evidence > 0.0 {
            for row in &mut rows {
                for value in row.iter_mut() {
                    *value /= evidence;
                }
            }
        } else {
            for row in &mut rows {
                row.fill(1.0 / vocab as f64);
            }
        }
        rows
    })
    .map_err(|e| EngineError::Dataset(e.to_string()))?;
    Ok(Denoiser::Tabular(table))
}

// ---------------------------------------------------------------------------
// Discrete-time bound pieces
// ---------------------------------------------------------------------------

/// Exact per-step denoising KL terms `L_KL^(j)` for `j = 1..=T` (all >= 0):
/// `(alpha_s - alpha_t)/(1 - alpha_t) * E_{q(z_t|x)}[sum of -log mu over
/// masked positions]`.
pub fn l_kl_terms(
    x: &TokenSeq,
    denoiser: &Denoiser,
    schedule: &Schedule,
    grid: &TimeGrid,
) -> Result<Vec<f64>, EngineError> {
    let mut terms = Vec::with_capacity(grid.steps());
    for j in 1..=grid.steps() {
        let alpha_s = schedule.alpha(grid.s(j))?;
        let alpha_t = schedule.alpha(grid.t(j))?;
        if 1.0 - alpha_t <= 0.0 {
            terms.push(0.0); // q(z_t | x) has no masked tokens to decode
            continue;
        }
        let coef = (alpha_s - alpha_t) / (1.0 - alpha_t);
        let mut expectation = 0.0;
        for_each_pattern(x, alpha_t, |z, prob, bits| {
            if bits == 0 {
                return;
            }
            let mu = denoiser.predict(z);
            let mut ce = 0.0;
            for (p, &tok) in z.tokens().iter().enumerate() {
                if tok.is_mask() {
                    let Token::Value(v) = x.get(p) else { unreachable!() };
                    ce += -mu.row(p)[v as usize].ln();
                }
            }
            expectation += prob * ce;
        });
        terms.push(coef * expectation);
    }
    Ok(terms)
}

/// `E_{q(z_t|x)}[log p(x | z)]` under the decoder-at-zero convention:
/// unmasked tokens carry over, masked ones decode through `mu_theta(z)`.
fn model_reconstruction_term(
    x: &TokenSeq,
    denoiser: &Denoiser,
    schedule: &Schedule,
    t: f64,
) -> Result<f64, EngineError> {
    let alpha = schedule.alpha(t)?;
    let mut value = 0.0;
    for_each_pattern(x, alpha, |z, prob, bits| {
        if bits == 0 {
            return;
        }
        let mu = denoiser.predict(z);
        for (p, &tok) in z.tokens().iter().enumerate() {
            if tok.is_mask() {
                let Token::Value(v) = x.get(p) else { unreachable!() };
                value += prob * mu.row(p)[v as usize].ln();
            }
        }
    });
    Ok(value)
}

/// `E_{q(z_t|x)}[log q(x | z)]` with the exact Bayes decoder.
fn optimal_reconstruction_term(
    x: &TokenSeq,
    dataset: &EmpiricalDataset,
    schedule: &Schedule,
    t: f64,
) -> Result<f64, EngineError> {
    let idx = dataset
        .sequences()
        .iter()
        .position(|s| s == x)
        .ok_or_else(|| EngineError::ShapeMismatch("x outside dataset support".into()))?;
    let alpha = schedule.alpha(t)?;
    let mut value = 0.0;
    let mut err = None;
    for_each_pattern(x, alpha, |z, prob, _| {
        if err.is_some() {
            return;
        }
        match optimal_decoder(dataset, schedule, t, z) {
            Ok(posterior) => value += prob * posterior[idx].ln(),
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(value),
    }
}

/// `KL(q(z_{t(T)} | x) || p(z_{t(T)}))` with the all-MASK point prior:
/// zero when the forward marginal is degenerate at all-MASK, infinite
/// otherwise.
fn prior_kl(schedule: &Schedule, grid: &TimeGrid) -> Result<f64, EngineError> {
    let alpha_end = schedule.alpha(grid.t(grid.steps()))?;
    Ok(if alpha_end <= 0.0 { 0.0 } else { f64::INFINITY })
}

/// The discrete-time evidence lower bound and its parts, exactly.
pub fn elbo_discrete(
    x: &TokenSeq,
    denoiser: &Denoiser,
    schedule: &Schedule,
    grid: &TimeGrid,
) -> Result<ElboBreakdown, EngineError> {
    let reconstruction = model_reconstruction_term(x, denoiser, schedule, grid.t(0))?;
    let prior = prior_kl(schedule, grid)?;
    let kl_terms = l_kl_terms(x, denoiser, schedule, grid)?;
    let total = reconstruction - prior - kl_terms.iter().sum::<f64>();
    Ok(ElboBreakdown {
        reconstruction,
        prior_kl: prior,
        kl_terms,
        total,
    })
}

/// The bound with `optimal_steps = i` exact reverse transitions (`i = 0` is
/// the plain discrete bound with the Bayes decoder at `t(0)`; `i = T` is
/// `log q(x)` for built-in schedules).
pub fn improved_elbo(
    x: &TokenSeq,
    optimal_steps: usize,
    denoiser: &Denoiser,
    dataset: &EmpiricalDataset,
    schedule: &Schedule,
    grid: &TimeGrid,
) -> Result<f64, EngineError> {
    assert!(optimal_steps <= grid.steps());
    let first = optimal_reconstruction_term(x, dataset, schedule, grid.t(optimal_steps))?;
    let prior = prior_kl(schedule, grid)?;
    let kl_terms = l_kl_terms(x, denoiser, schedule, grid)?;
    let tail: f64 = kl_terms[optimal_steps..].iter().sum();
    Ok(first - prior - tail)
}

/// All ladder values `improved_elbo(x, i)` for `i = 0..=T`, sharing one pass
/// over the KL terms.
pub fn improved_elbo_ladder(
    x: &TokenSeq,
    denoiser: &Denoiser,
    dataset: &EmpiricalDataset,
    schedule: &Schedule,
    grid: &TimeGrid,
) -> Result<Vec<f64>, EngineError> {
    let steps = grid.steps();
    let prior = prior_kl(schedule, grid)?;
    let kl_terms = l_kl_terms(x, denoiser, schedule, grid)?;
    let mut suffix = vec![0.0; steps + 1];
    for j in (0..steps).rev() {
        suffix[j] = suffix[j + 1] + kl_terms[j];
    }
    let mut ladder = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let first = optimal_reconstruction_term(x, dataset, schedule, grid.t(i))?;
        ladder.push(first - prior - suffix[i]);
    }
    Ok(ladder)
}

/// Both sides of the ladder-gap identity at step `i` (`1 <= i <= T`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoremGap {
    /// `E_q[ improved_elbo(i) - improved_elbo(i-1) ]`.
    pub lhs: f64,
    /// `E_{q(z_t(i))}[ KL(q(z_t(i-1)} | z_t(i)) || p_theta(z_t(i-1) | z_t(i))) ]`,
    /// computed by full state-space marginalization.
    pub rhs: f64,
}

// Per-token probabilities used by the state-space route. Written out locally
// so this path does not share code with the pattern-enumeration route it is
// checked against.
fn token_forward_prob(z: Token, x: Token, alpha: f64) -> f64 {
    match z {
        Token::Mask => 1.0 - alpha,
        tok if tok == x => alpha,
        _ => 0.0,
    }
}

fn token_transition_prob(z_s: Token, z_t: Token, alpha_s: f64, alpha_t: f64) -> f64 {
    match (z_s, z_t) {
        (Token::Mask, Token::Mask) => 1.0,
        (Token::Mask, _) => 0.0,
        (Token::Value(v), Token::Value(w)) if v == w => alpha_t / alpha_s,
        (Token::Value(_), Token::Mask) => 1.0 - alpha_t / alpha_s,
        _ => 0.0,
    }
}

fn token_reverse_prob(z_t: Token, z_s: Token, mu_row: &[f64], alpha_s: f64, alpha_t: f64) -> f64 {
    match (z_t, z_s) {
        (Token::Value(v), Token::Value(w)) if v == w => 1.0,
        (Token::Value(_), _) => 0.0,
        (Token::Mask, Token::Mask) => (1.0 - alpha_s) / (1.0 - alpha_t),
        (Token::Mask, Token::Value(v)) => {
            (alpha_s - alpha_t) / (1.0 - alpha_t) * mu_row[v as usize]
        }
    }
}

fn enumeration_sizes(dataset: &EmpiricalDataset) -> (usize, usize, u16) {
    let len = dataset.seq_len();
    let vocab = dataset.vocab_size();
    let states = (vocab as usize + 1).pow(len as u32);
    (states, len, vocab)
}

/// Evaluate the ladder-gap identity at step `i`: average ladder difference
/// against the exact marginal-reverse KL.
pub fn theorem1_gap(
    i: usize,
    denoiser: &Denoiser,
    dataset: &EmpiricalDataset,
    schedule: &Schedule,
    grid: &TimeGrid,
) -> Result<TheoremGap, EngineError> {
    assert!(i >= 1 && i <= grid.steps());
    let lhs = {
        let mut value = 0.0;
        for (k, x) in dataset.sequences().iter().enumerate() {
            let ladder = improved_elbo_ladder(x, denoiser, dataset, schedule, grid)?;
            value += dataset.prob(k) * (ladder[i] - ladder[i - 1]);
        }
        value
    };

    let (states, len, vocab) = enumeration_sizes(dataset);
    let t = grid.t(i);
    let s = grid.s(i);
    let alpha_t = schedule.alpha(t)?;
    let alpha_s = schedule.alpha(s)?;

    // q(z_t) over the whole state space.
    let mut q_t = vec![0.0; states];
    for (k, x) in dataset.sequences().iter().enumerate() {
        let weight = dataset.prob(k);
        for idx in 0..states {
            let z = TokenSeq::from_state_index(idx, len, vocab);
            let mut p = weight;
            for (pos, &tok) in z.tokens().iter().enumerate() {
                p *= token_forward_prob(tok, x.get(pos), alpha_t);
                if p == 0.0 {
                    break;
                }
            }
            q_t[idx] += p;
        }
    }

    let mut rhs = 0.0;
    for idx_t in 0..states {
        if q_t[idx_t] <= 0.0 {
            continue;
        }
        let z_t = TokenSeq::from_state_index(idx_t, len, vocab);
        let mu = denoiser.predict(&z_t);

        // Joint q(z_s, z_t) marginalized over the dataset, then conditioned.
        let mut joint = vec![0.0; states];
        let mut joint_total = 0.0;
        for (k, x) in dataset.sequences().iter().enumerate() {
            let weight = dataset.prob(k);
            for (idx_s, slot) in joint.iter_mut().enumerate() {
                let z_s = TokenSeq::from_state_index(idx_s, len, vocab);
                let mut p = weight;
                for pos in 0..len {
                    p *= token_forward_prob(z_s.get(pos), x.get(pos), alpha_s)
                        * token_transition_prob(z_s.get(pos), z_t.get(pos), alpha_s, alpha_t);
                    if p == 0.0 {
                        break;
                    }
                }
                *slot += p;
                joint_total += p;
            }
        }

        let mut kl = 0.0;
        for (idx_s, &j) in joint.iter().enumerate() {
            if j <= 0.0 {
                continue;
            }
            let q_cond = j / joint_total;
            let z_s = TokenSeq::from_state_index(idx_s, len, vocab);
            let mut p_theta = 1.0;
            for pos in 0..len {
                p_theta *=
                    token_reverse_prob(z_t.get(pos), z_s.get(pos), mu.row(pos), alpha_s, alpha_t);
            }
            kl += q_cond * (q_cond / p_theta).ln();
        }
        rhs += q_t[idx_t] * kl;
    }

    Ok(TheoremGap { lhs, rhs })
}

/// Residual of the summation-swap identity for an arbitrary weight vector
/// `w_1..w_T` (negative entries allowed): the two sides are accumulated in
/// different orders and their absolute difference is averaged over the
/// dataset.
pub fn theorem2_residual(
    weights: &[f64],
    denoiser: &Denoiser,
    dataset: &EmpiricalDataset,
    schedule: &Schedule,
    grid: &TimeGrid,
) -> Result<f64, EngineError> {
    if weights.len() != grid.steps() {
        return Err(EngineError::ShapeMismatch(format!(
            "{} weights for {} steps",
            weights.len(),
            grid.steps()
        )));
    }
    let prior = prior_kl(schedule, grid)?;
    let mut residual = 0.0;
    for (k, x) in dataset.sequences().iter().enumerate() {
        // Left side: weighted sum of whole ladder values.
        let ladder = improved_elbo_ladder(x, denoiser, dataset, schedule, grid)?;
        let lhs: f64 = weights
            .iter()
            .enumerate()
            .map(|(idx, &w)| w * ladder[idx])
            .sum();

        // Right side: swapped order — cumulative weights against per-step KL
        // terms, plus the weighted constants c_i.
        let kl_terms = l_kl_terms(x, denoiser, schedule, grid)?;
        let mut cumulative = 0.0;
        let mut kl_side = 0.0;
        for (j, &term) in kl_terms.iter().enumerate() {
            cumulative += weights[j];
            kl_side += cumulative * term;
        }
        let mut constant = 0.0;
        for (idx, &w) in weights.iter().enumerate() {
            let c_i = optimal_reconstruction_term(x, dataset, schedule, grid.t(idx))? - prior;
            constant += w * c_i;
        }
        let rhs = -kl_side + constant;
        residual += dataset.prob(k) * (lhs - rhs).abs();
    }
    Ok(residual)
}

// ---------------------------------------------------------------------------
// Exact model marginal
// ---------------------------------------------------------------------------

/// Dense index of a MASK-free sequence in the `V^L` clean-state space.
pub fn clean_index(x: &TokenSeq) -> usize {
    let base = x.vocab_size() as usize;
    let mut idx = 0;
    for &tok in x.tokens() {
        let Token::Value(v) = tok else {
            panic!("clean_index needs a MASK-free sequence")
        };
        idx = idx * base + v as usize;
    }
    idx
}

/// Inverse of [`clean_index`].
pub fn clean_from_index(mut idx: usize, len: usize, vocab: u16) -> TokenSeq {
    let base = vocab as usize;
    let mut values = vec![0u16; len];
    for slot in values.iter_mut().rev() {
        *slot = (idx % base) as u16;
        idx /= base;
    }
    TokenSeq::from_values(&values, vocab).expect("valid clean sequence")
}

/// Exact `p_theta(x)` for every clean sequence, by chain-marginalizing the
/// reverse model from the all-MASK point mass down to `t(0)` and applying the
/// decoder-at-zero convention to any residual MASK.
pub fn exact_model_marginal(
    denoiser: &Denoiser,
    schedule: &Schedule,
    grid: &TimeGrid,
    budget: &Budget,
) -> Result<Vec<f64>, EngineError> {
    let dims = denoiser.dims();
    let len = dims.len;
    let vocab = dims.vocab;
    let states = (vocab as usize + 1).pow(len as u32);
    if states > budget.max_states || grid.steps() > budget.max_steps {
        return Err(EngineError::ResourceBudget {
            states,
            steps: grid.steps(),
            max_states: budget.max_states,
            max_steps: budget.max_steps,
        });
    }

    let mut dist = vec![0.0; states];
    dist[TokenSeq::all_mask(len, vocab).state_index()] = 1.0;

    for i in (1..=grid.steps()).rev() {
        let t = grid.t(i);
        let s = grid.s(i);
        let alpha_t = schedule.alpha(t)?;
        let alpha_s = schedule.alpha(s)?;
        let mut next = vec![0.0; states];
        for (idx_t, &mass) in dist.iter().enumerate() {
            if mass <= 0.0 {
                continue;
            }
            let z_t = TokenSeq::from_state_index(idx_t, len, vocab);
            let mu = denoiser.predict(&z_t);
            // Factorized reverse step: walk the product of per-token supports.
            let mut z_s = z_t.clone();
            distribute_reverse(
                &z_t, &mut z_s, 0, mass, &mu, alpha_s, alpha_t, &mut next,
            );
        }
        dist = next;
    }

    // Decode residual MASK positions from mu and land on clean indices.
    let clean_states = (vocab as usize).pow(len as u32);
    let mut marginal = vec![0.0; clean_states];
    for (idx, &mass) in dist.iter().enumerate() {
        if mass <= 0.0 {
            continue;
        }
        let z = TokenSeq::from_state_index(idx, len, vocab);
        if z.has_mask() {
            let mu = denoiser.predict(&z);
            let mut buf = z.clone();
            distribute_decode(&z, &mut buf, 0, mass, &mu, &mut marginal);
        } else {
            marginal[clean_index(&z)] += mass;
        }
    }
    Ok(marginal)
}

#[allow(clippy::too_many_arguments)]
fn distribute_reverse(
    z_t: &TokenSeq,
    z_s: &mut TokenSeq,
    position: usize,
    mass: f64,
    mu: &crate::denoiser::Prediction,
    alpha_s: f64,
    alpha_t: f64,
    out: &mut [f64],
) {
    if mass == 0.0 {
        return;
    }
    if position == z_t.len() {
        out[z_s.state_index()] += mass;
        return;
    }
    match z_t.get(position) {
        Token::Value(_) => {
            z_s.set(position, z_t.get(position));
            distribute_reverse(z_t, z_s, position + 1, mass, mu, alpha_s, alpha_t, out);
        }
        Token::Mask => {
            let stay = (1.0 - alpha_s) / (1.0 - alpha_t);
            z_s.set(position, Token::Mask);
            distribute_reverse(z_t, z_s, position + 1, mass * stay, mu, alpha_s, alpha_t, out);
            let unmask = (alpha_s - alpha_t) / (1.0 - alpha_t);
            if unmask > 0.0 {
                for v in 0..z_t.vocab_size() {
                    let p = unmask * mu.row(position)[v as usize];
                    z_s.set(position, Token::Value(v));
                    distribute_reverse(
                        z_t, z_s, position + 1, mass * p, mu, alpha_s, alpha_t, out,
                    );
                }
            }
        }
    }
}

fn distribute_decode(
    z: &TokenSeq,
    buf: &mut TokenSeq,
    position: usize,
    mass: f64,
    mu: &crate::denoiser::Prediction,
    out: &mut [f64],
) {
    if mass == 0.0 {
        return;
    }
    if position == z.len() {
        out[clean_index(buf)] += mass;
        return;
    }
    match z.get(position) {
        Token::Value(_) => {
            buf.set(position, z.get(position));
            distribute_decode(z, buf, position + 1, mass, mu, out);
        }
        Token::Mask => {
            for v in 0..z.vocab_size() {
                buf.set(position, Token::Value(v));
                distribute_decode(
                    z,
                    buf,
                    position + 1,
                    mass * mu.row(position)[v as usize],
                    mu,
                    out,
                );
            }
        }
    }
}

/// `KL(q(x) || p_theta(x))` through the exact model marginal; infinite if the
/// model misses a support point.
pub fn exact_data_model_kl(
    dataset: &EmpiricalDataset,
    denoiser: &Denoiser,
    schedule: &Schedule,
    grid: &TimeGrid,
    budget: &Budget,
) -> Result<f64, EngineError> {
    let marginal = exact_model_marginal(denoiser, schedule, grid, budget)?;
    let mut kl = 0.0;
    for (k, x) in dataset.sequences().iter().enumerate() {
        let q = dataset.prob(k);
        let p = marginal[clean_index(x)];
        if p <= 0.0 {
            return Ok(f64::INFINITY);
        }
        kl += q * (q / p).ln();
    }
    Ok(kl)
}

// ---------------------------------------------------------------------------
// Continuous-time objective by quadrature
// ---------------------------------------------------------------------------

/// The reweighted objective `int_0^1 ce_weight(t) * CE_x(t) dt` evaluated by
/// panel-doubling Gauss-Legendre quadrature with the exact (enumerated) inner
/// expectation.
///
/// `CE_x(t)` carries a `(1 - alpha_t)` factor per masked position, which is
/// pulled out analytically so weightings that diverge at an endpoint meet a
/// matching zero instead of `inf * 0`. Non-integrable pairings surface as
/// `converged = false`.
pub fn continuous_elbo_quadrature(
    x: &TokenSeq,
    denoiser: &Denoiser,
    spec: &WeightingSpec,
    schedule: &Schedule,
    panels: usize,
) -> Result<Quadrature, EngineError> {
    let mut failure: Option<EngineError> = None;
    let mut integrand = |t: f64| -> f64 {
        if failure.is_some() {
            return 0.0;
        }
        let alpha = match schedule.alpha(t) {
            Ok(a) => a,
            Err(e) => {
                failure = Some(e.into());
                return 0.0;
            }
        };
        let ce_weight = match spec.ce_weight(schedule, t) {
            Ok(w) => w,
            Err(e) => {
                failure = Some(e.into());
                return 0.0;
            }
        };
        // sum_p E[-log mu_p(z)[x_p] | z_p = MASK]: enumerate the other
        // positions' masking; the masked position's own (1 - alpha) factor is
        // the one pulled out of the integrand.
        let mut conditional_ce = 0.0;
        let mut z = x.clone();
        for position in 0..x.len() {
            let others: Vec<usize> = (0..x.len()).filter(|&p| p != position).collect();
            let patterns = 1u32 << others.len();
            for bits in 0..patterns {
                let mut prob = 1.0;
                for (slot, &p) in others.iter().enumerate() {
                    if bits & (1 << slot) != 0 {
                        z.set(p, Token::Mask);
                        prob *= 1.0 - alpha;
                    } else {
                        z.set(p, x.get(p));
                        prob *= alpha;
                    }
                }
                if prob == 0.0 {
                    continue;
                }
                z.set(position, Token::Mask);
                let mu = denoiser.predict(&z);
                let Token::Value(v) = x.get(position) else { unreachable!() };
                conditional_ce += prob * -mu.row(position)[v as usize].ln();
            }
            z.set(position, x.get(position));
        }
        ce_weight * (1.0 - alpha) * conditional_ce
    };
    let start = panels.max(2);
    let q = quadrature::integrate_adaptive(&mut integrand, 0.0, 1.0, start, start * 64, 1e-10);
    match failure {
        Some(e) => Err(e),
        None => Ok(q),
    }
}
