//! Ancestral sampling from the discrete-time reverse process.
//!
//! Generation starts from the all-MASK sequence at `t = 1` and applies the
//! denoiser-parameterized reverse kernel step by step down to `t = 0`; any
//! position still masked at the end is decoded straight from the denoiser,
//! matching the decoder-at-zero convention of the exact engine so that the
//! empirical law and `exact_model_marginal` describe the same model.

use rand::Rng;

use crate::denoiser::Denoiser;
use crate::exact_engine::{clean_index, TimeGrid};
use crate::masked_process::{Token, TokenSeq};
use crate::rng as rngs;
use crate::schedules::{Schedule, ScheduleError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SamplerError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("histogram and distribution have different supports: {0} vs {1}")]
    SupportMismatch(usize, usize),
}

/// A batch of generated sequences plus the sampling settings that made it.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub samples: Vec<TokenSeq>,
    pub steps: usize,
    pub seed: u64,
}

impl SampleBatch {
    /// Emit one JSON object per line: `{"tokens":[...]}`.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for seq in &self.samples {
            let tokens: Vec<u16> = seq
                .tokens()
                .iter()
                .map(|t| match t {
                    Token::Value(v) => *v,
                    Token::Mask => unreachable!("samples are MASK-free"),
                })
                .collect();
            out.push_str(&serde_json::json!({ "tokens": tokens }).to_string());
            out.push('\n');
        }
        out
    }
}

/// Draw one sequence by ancestral sampling with `steps` reverse transitions.
///
/// Unmasked tokens are carried over unchanged, so the masked count is
/// nonincreasing along the trajectory.
pub fn ancestral_sample(
    denoiser: &Denoiser,
    schedule: &Schedule,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<TokenSeq, SamplerError> {
    assert!(steps >= 1);
    let dims = denoiser.dims();
    let grid = TimeGrid::new(steps);
    let mut z = TokenSeq::all_mask(dims.len, dims.vocab);
    for i in (1..=steps).rev() {
        if !z.has_mask() {
            break;
        }
        let alpha_s = schedule.alpha(grid.s(i))?;
        let alpha_t = schedule.alpha(grid.t(i))?;
        let unmask = ((alpha_s - alpha_t) / (1.0 - alpha_t)).clamp(0.0, 1.0);
        if unmask == 0.0 {
            continue;
        }
        let mu = denoiser.predict(&z);
        for position in 0..dims.len {
            if !z.get(position).is_mask() {
                continue;
            }
            if rng.gen::<f64>() < unmask {
                z.set(position, Token::Value(sample_row(mu.row(position), rng)));
            }
        }
    }
    // Decoder-at-zero: any residual MASK decodes directly from mu.
    if z.has_mask() {
        let mu = denoiser.predict(&z);
        for position in 0..dims.len {
            if z.get(position).is_mask() {
                z.set(position, Token::Value(sample_row(mu.row(position), rng)));
            }
        }
    }
    Ok(z)
}

fn sample_row(row: &[f64], rng: &mut impl Rng) -> u16 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (v, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return v as u16;
        }
    }
    (row.len() - 1) as u16
}

/// Draw `count` sequences under named substreams of `seed`; results do not
/// depend on evaluation order.
pub fn sample_batch(
    denoiser: &Denoiser,
    schedule: &Schedule,
    steps: usize,
    count: usize,
    seed: u64,
) -> Result<SampleBatch, SamplerError> {
    let mut samples = Vec::with_capacity(count);
    for index in 0..count {
        let mut rng = rngs::indexed_stream(seed, "ancestral-sample", index as u64);
        samples.push(ancestral_sample(denoiser, schedule, steps, &mut rng)?);
    }
    Ok(SampleBatch {
        samples,
        steps,
        seed,
    })
}

/// Normalized counts over the `V^L` clean sequences.
pub fn empirical_distribution(batch: &SampleBatch) -> Vec<f64> {
    let Some(first) = batch.samples.first() else {
        return Vec::new();
    };
    let states = (first.vocab_size() as usize).pow(first.len() as u32);
    let mut hist = vec![0.0; states];
    for seq in &batch.samples {
        hist[clean_index(seq)] += 1.0;
    }
    let n = batch.samples.len() as f64;
    for h in &mut hist {
        *h /= n;
    }
    hist
}

/// Total variation distance `0.5 * sum |p - q|` between two distributions on
/// the same support.
pub fn tv_distance(histogram: &[f64], exact: &[f64]) -> Result<f64, SamplerError> {
    if histogram.len() != exact.len() {
        return Err(SamplerError::SupportMismatch(histogram.len(), exact.len()));
    }
    Ok(0.5
        * histogram
            .iter()
            .zip(exact)
            .map(|(p, q)| (p - q).abs())
            .sum::<f64>())
}
