//! Per-token masked-diffusion kernels.
//!
//! The forward process replaces tokens with an absorbing MASK state,
//! independently per position: a token survives to time `t` with probability
//! `alpha_t`. Everything here is a pure function of the schedule; the closed
//! forms are validated against a brute-force Bayes oracle rather than
//! trusted.

use rand::Rng;

use crate::schedules::{Schedule, ScheduleError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("times must satisfy s < t, got s={s}, t={t}")]
    BadTimeOrder { s: f64, t: f64 },
    #[error("unmasked token at time with alpha = 0 is inconsistent")]
    InconsistentState,
    #[error("token {z:?} is inconsistent with clean token {x:?}")]
    InconsistentPair { z: Token, x: Token },
    #[error("conditioning event has probability zero")]
    ZeroProbabilityConditioning,
    #[error("expected a vocabulary token, got MASK")]
    MaskNotAllowed,
    #[error("distribution must be normalized over the vocabulary")]
    UnnormalizedMu,
    #[error("sequence shapes disagree: {0}")]
    ShapeMismatch(String),
}

/// A single token: a vocabulary index or the MASK sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Value(u16),
    Mask,
}

impl Token {
    pub fn is_mask(self) -> bool {
        matches!(self, Token::Mask)
    }
}

/// A fixed-length sequence over `{0..V-1}` plus MASK.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    tokens: Vec<Token>,
    vocab_size: u16,
}

impl TokenSeq {
    pub fn new(tokens: Vec<Token>, vocab_size: u16) -> Result<Self, KernelError> {
        if vocab_size < 2 {
            return Err(KernelError::ShapeMismatch(format!(
                "vocab size must be >= 2, got {vocab_size}"
            )));
        }
        if tokens.is_empty() {
            return Err(KernelError::ShapeMismatch("empty sequence".into()));
        }
        for &tok in &tokens {
            if let Token::Value(v) = tok {
                if v >= vocab_size {
                    return Err(KernelError::ShapeMismatch(format!(
                        "token {v} out of vocabulary 0..{vocab_size}"
                    )));
                }
            }
        }
        Ok(TokenSeq { tokens, vocab_size })
    }

    /// Build a MASK-free sequence from raw indices.
    pub fn from_values(values: &[u16], vocab_size: u16) -> Result<Self, KernelError> {
        Self::new(values.iter().map(|&v| Token::Value(v)).collect(), vocab_size)
    }

    pub fn all_mask(len: usize, vocab_size: u16) -> Self {
        TokenSeq {
            tokens: vec![Token::Mask; len],
            vocab_size,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab_size(&self) -> u16 {
        self.vocab_size
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn get(&self, position: usize) -> Token {
        self.tokens[position]
    }

    pub fn set(&mut self, position: usize, token: Token) {
        if let Token::Value(v) = token {
            debug_assert!(v < self.vocab_size);
        }
        self.tokens[position] = token;
    }

    pub fn mask_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.is_mask()).count()
    }

    pub fn has_mask(&self) -> bool {
        self.tokens.iter().any(|t| t.is_mask())
    }

    /// Dense index over the `(V+1)^L` state space; MASK is digit `V`.
    pub fn state_index(&self) -> usize {
        let base = self.vocab_size as usize + 1;
        let mut idx = 0usize;
        for &tok in &self.tokens {
            let digit = match tok {
                Token::Value(v) => v as usize,
                Token::Mask => self.vocab_size as usize,
            };
            idx = idx * base + digit;
        }
        idx
    }

    /// Inverse of [`TokenSeq::state_index`].
    pub fn from_state_index(mut idx: usize, len: usize, vocab_size: u16) -> Self {
        let base = vocab_size as usize + 1;
        let mut tokens = vec![Token::Mask; len];
        for slot in tokens.iter_mut().rev() {
            let digit = idx % base;
            idx /= base;
            *slot = if digit == vocab_size as usize {
                Token::Mask
            } else {
                Token::Value(digit as u16)
            };
        }
        TokenSeq { tokens, vocab_size }
    }
}

/// A distribution over `{0..V-1} union {MASK}`; the MASK slot is last.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDist {
    probs: Vec<f64>,
}

impl TokenDist {
    pub fn new(probs: Vec<f64>) -> Result<Self, KernelError> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-12 {
            return Err(KernelError::UnnormalizedMu);
        }
        Ok(TokenDist { probs })
    }

    pub fn delta(token: Token, vocab_size: u16) -> Self {
        let mut probs = vec![0.0; vocab_size as usize + 1];
        probs[Self::slot(token, vocab_size)] = 1.0;
        TokenDist { probs }
    }

    fn slot(token: Token, vocab_size: u16) -> usize {
        match token {
            Token::Value(v) => v as usize,
            Token::Mask => vocab_size as usize,
        }
    }

    pub fn vocab_size(&self) -> u16 {
        (self.probs.len() - 1) as u16
    }

    pub fn prob(&self, token: Token) -> f64 {
        self.probs[Self::slot(token, self.vocab_size())]
    }

    pub fn mask_prob(&self) -> f64 {
        *self.probs.last().unwrap()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// All tokens in slot order: vocabulary values then MASK.
    pub fn support(&self) -> impl Iterator<Item = (Token, f64)> + '_ {
        let vocab = self.vocab_size();
        self.probs.iter().enumerate().map(move |(i, &p)| {
            let token = if i == vocab as usize {
                Token::Mask
            } else {
                Token::Value(i as u16)
            };
            (token, p)
        })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Token {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (token, p) in self.support() {
            acc += p;
            if u < acc {
                return token;
            }
        }
        Token::Mask // numerically exhaustive fallback
    }
}

/// Forward marginal `q(z_t | x)` for one clean token: `alpha_t` on the token,
/// `1 - alpha_t` on MASK.
pub fn marginal(
    schedule: &Schedule,
    t: f64,
    x_token: Token,
    vocab_size: u16,
) -> Result<TokenDist, KernelError> {
    let Token::Value(v) = x_token else {
        return Err(KernelError::MaskNotAllowed);
    };
    let alpha = schedule.alpha(t)?;
    let mut probs = vec![0.0; vocab_size as usize + 1];
    probs[v as usize] = alpha;
    probs[vocab_size as usize] = 1.0 - alpha;
    Ok(TokenDist { probs })
}

/// Forward transition `q(z_t | z_s)`: an unmasked token survives with
/// probability `alpha_t / alpha_s`; MASK is absorbing.
pub fn transition(
    schedule: &Schedule,
    s: f64,
    t: f64,
    token: Token,
    vocab_size: u16,
) -> Result<TokenDist, KernelError> {
    if !(s < t) {
        return Err(KernelError::BadTimeOrder { s, t });
    }
    match token {
        Token::Mask => Ok(TokenDist::delta(Token::Mask, vocab_size)),
        Token::Value(v) => {
            let alpha_s = schedule.alpha(s)?;
            let alpha_t = schedule.alpha(t)?;
            if alpha_s <= 0.0 {
                return Err(KernelError::InconsistentState);
            }
            let keep = alpha_t / alpha_s;
            let mut probs = vec![0.0; vocab_size as usize + 1];
            probs[v as usize] = keep;
            probs[vocab_size as usize] = 1.0 - keep;
            Ok(TokenDist { probs })
        }
    }
}

/// Posterior `q(z_s | z_t, x)` in closed form.
///
/// An observed token is carried back unchanged; an observed MASK stays MASK
/// with probability `(1 - alpha_s) / (1 - alpha_t)` and reverts to the clean
/// token otherwise.
pub fn posterior(
    schedule: &Schedule,
    s: f64,
    t: f64,
    z_token: Token,
    x_token: Token,
    vocab_size: u16,
) -> Result<TokenDist, KernelError> {
    if !(s < t) {
        return Err(KernelError::BadTimeOrder { s, t });
    }
    let Token::Value(_) = x_token else {
        return Err(KernelError::MaskNotAllowed);
    };
    match z_token {
        Token::Value(_) if z_token != x_token => Err(KernelError::InconsistentPair {
            z: z_token,
            x: x_token,
        }),
        Token::Value(_) => Ok(TokenDist::delta(z_token, vocab_size)),
        Token::Mask => {
            let alpha_s = schedule.alpha(s)?;
            let alpha_t = schedule.alpha(t)?;
            if 1.0 - alpha_t <= 0.0 {
                return Err(KernelError::ZeroProbabilityConditioning);
            }
            let stay_masked = (1.0 - alpha_s) / (1.0 - alpha_t);
            let mut probs = vec![0.0; vocab_size as usize + 1];
            if let Token::Value(v) = x_token {
                probs[v as usize] = (alpha_s - alpha_t) / (1.0 - alpha_t);
            }
            probs[vocab_size as usize] = stay_masked;
            Ok(TokenDist { probs })
        }
    }
}

/// Brute-force Bayes posterior `q(z_s | z_t, x)` by enumerating all `V + 1`
/// values of `z_s` and weighting `q(z_t | z_s) q(z_s | x)`.
///
/// Serves as the oracle for [`posterior`].
pub fn bayes_posterior_oracle(
    schedule: &Schedule,
    s: f64,
    t: f64,
    z_token: Token,
    x_token: Token,
    vocab_size: u16,
) -> Result<TokenDist, KernelError> {
    if !(s < t) {
        return Err(KernelError::BadTimeOrder { s, t });
    }
    let prior = marginal(schedule, s, x_token, vocab_size)?;
    let mut weights = vec![0.0; vocab_size as usize + 1];
    let mut total = 0.0;
    for (z_s, p_prior) in prior.support() {
        if p_prior == 0.0 {
            continue;
        }
        let forward = transition(schedule, s, t, z_s, vocab_size)?;
        let w = p_prior * forward.prob(z_token);
        weights[TokenDist::slot(z_s, vocab_size)] = w;
        total += w;
    }
    if total <= 0.0 {
        return Err(KernelError::ZeroProbabilityConditioning);
    }
    for w in &mut weights {
        *w /= total;
    }
    Ok(TokenDist { probs: weights })
}

/// Denoiser-parameterized reverse kernel `p(z_s | z_t)`: the posterior with
/// the clean token replaced by the predicted distribution `mu` over the
/// vocabulary.
pub fn reverse_kernel(
    schedule: &Schedule,
    s: f64,
    t: f64,
    z_token: Token,
    mu: &[f64],
    vocab_size: u16,
) -> Result<TokenDist, KernelError> {
    if !(s < t) {
        return Err(KernelError::BadTimeOrder { s, t });
    }
    if mu.len() != vocab_size as usize
        || mu.iter().any(|&p| p < 0.0)
        || (mu.iter().sum::<f64>() - 1.0).abs() > 1e-12
    {
        return Err(KernelError::UnnormalizedMu);
    }
    match z_token {
        Token::Value(_) => Ok(TokenDist::delta(z_token, vocab_size)),
        Token::Mask => {
            let alpha_s = schedule.alpha(s)?;
            let alpha_t = schedule.alpha(t)?;
            if 1.0 - alpha_t <= 0.0 {
                return Err(KernelError::ZeroProbabilityConditioning);
            }
            let unmask = (alpha_s - alpha_t) / (1.0 - alpha_t);
            let mut probs = vec![0.0; vocab_size as usize + 1];
            for (v, &m) in mu.iter().enumerate() {
                probs[v] = unmask * m;
            }
            probs[vocab_size as usize] = (1.0 - alpha_s) / (1.0 - alpha_t);
            Ok(TokenDist { probs })
        }
    }
}

/// Conditional KL term at a fixed noisy sequence `z`:
/// `sum over masked positions of (alpha_s - alpha_t)/(1 - alpha_t) * (-log mu_p[x_p])`.
///
/// Returns `+inf` when a masked position assigns zero mass to the clean
/// token.
pub fn kl_term_closed_form(
    schedule: &Schedule,
    s: f64,
    t: f64,
    z: &TokenSeq,
    x: &TokenSeq,
    mu_per_position: &[Vec<f64>],
) -> Result<f64, KernelError> {
    if !(s < t) {
        return Err(KernelError::BadTimeOrder { s, t });
    }
    if z.len() != x.len() || mu_per_position.len() != x.len() {
        return Err(KernelError::ShapeMismatch(format!(
            "z len {}, x len {}, mu len {}",
            z.len(),
            x.len(),
            mu_per_position.len()
        )));
    }
    let alpha_s = schedule.alpha(s)?;
    let alpha_t = schedule.alpha(t)?;
    let coef = (alpha_s - alpha_t) / (1.0 - alpha_t);
    let mut total = 0.0;
    for (position, &z_tok) in z.tokens().iter().enumerate() {
        match (z_tok, x.get(position)) {
            (Token::Mask, Token::Value(v)) => {
                let mu = mu_per_position[position][v as usize];
                if mu <= 0.0 {
                    return Ok(f64::INFINITY);
                }
                total += coef * -mu.ln();
            }
            (Token::Value(zv), Token::Value(xv)) if zv == xv => {}
            (z, x) => return Err(KernelError::InconsistentPair { z, x }),
        }
    }
    Ok(total)
}

/// Draw `z_t ~ q(z_t | x)`: each token is independently masked with
/// probability `1 - alpha_t`.
pub fn sample_zt(
    schedule: &Schedule,
    t: f64,
    x: &TokenSeq,
    rng: &mut impl Rng,
) -> Result<TokenSeq, KernelError> {
    let alpha = schedule.alpha(t)?;
    let mut out = x.clone();
    for position in 0..x.len() {
        if rng.gen::<f64>() >= alpha {
            out.set(position, Token::Mask);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn assert_dist_close(a: &TokenDist, b: &TokenDist, tol: f64) {
        assert_eq!(a.probs().len(), b.probs().len());
        for (pa, pb) in a.probs().iter().zip(b.probs()) {
            assert!((pa - pb).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn marginal_endpoints() {
        let s = Schedule::cosine();
        let d0 = marginal(&s, 0.0, Token::Value(3), 5).unwrap();
        assert_eq!(d0.prob(Token::Value(3)), 1.0);
        let d1 = marginal(&s, 1.0, Token::Value(3), 5).unwrap();
        assert_eq!(d1.mask_prob(), 1.0);
        let dm = marginal(&s, 1.0 / 3.0, Token::Value(0), 2).unwrap();
        assert!((dm.prob(Token::Value(0)) - 0.5).abs() <= 1e-12);
        assert!((dm.mask_prob() - 0.5).abs() <= 1e-12);
        assert!(matches!(
            marginal(&s, 0.5, Token::Mask, 2),
            Err(KernelError::MaskNotAllowed)
        ));
    }

    #[test]
    fn transition_mask_is_absorbing() {
        let s = Schedule::cosine();
        let d = transition(&s, 0.2, 0.7, Token::Mask, 4).unwrap();
        assert_eq!(d.mask_prob(), 1.0);
        assert!(matches!(
            transition(&s, 0.7, 0.2, Token::Value(1), 4),
            Err(KernelError::BadTimeOrder { .. })
        ));
        assert!(matches!(
            transition(&s, 1.0, 1.0, Token::Value(1), 4),
            Err(KernelError::BadTimeOrder { .. })
        ));
    }

    #[test]
    fn transition_composes_chapman_kolmogorov() {
        let sched = Schedule::cosine();
        let vocab = 3u16;
        for (s, u, t) in [(0.1, 0.3, 0.8), (0.0, 0.5, 1.0), (0.25, 0.5, 0.75)] {
            for token in [Token::Value(0), Token::Value(2), Token::Mask] {
                let direct = transition(&sched, s, t, token, vocab).unwrap();
                // Matrix product over the intermediate state.
                let first = transition(&sched, s, u, token, vocab).unwrap();
                let mut composed = vec![0.0; vocab as usize + 1];
                for (mid, p_mid) in first.support() {
                    if p_mid == 0.0 {
                        continue;
                    }
                    let second = transition(&sched, u, t, mid, vocab).unwrap();
                    for (idx, p) in second.probs().iter().enumerate() {
                        composed[idx] += p_mid * p;
                    }
                }
                for (idx, p) in direct.probs().iter().enumerate() {
                    assert!((p - composed[idx]).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn marginal_flows_through_transition() {
        let sched = Schedule::cosine();
        let vocab = 3u16;
        for (s, t) in [(0.0, 0.4), (0.2, 0.9), (0.5, 1.0)] {
            let at_s = marginal(&sched, s, Token::Value(1), vocab).unwrap();
            let mut pushed = vec![0.0; vocab as usize + 1];
            for (token, p) in at_s.support() {
                if p == 0.0 {
                    continue;
                }
                let step = transition(&sched, s, t, token, vocab).unwrap();
                for (idx, q) in step.probs().iter().enumerate() {
                    pushed[idx] += p * q;
                }
            }
            let direct = marginal(&sched, t, Token::Value(1), vocab).unwrap();
            for (idx, p) in direct.probs().iter().enumerate() {
                assert!((p - pushed[idx]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn posterior_matches_bayes_oracle_on_grid() {
        let sched = Schedule::cosine();
        let vocab = 3u16;
        let times: Vec<f64> = (1..=16).map(|i| i as f64 / 17.0).collect();
        for (i, &s) in times.iter().enumerate() {
            for &t in &times[i + 1..] {
                for x in 0..vocab {
                    for z in [Token::Value(x), Token::Mask] {
                        let closed =
                            posterior(&sched, s, t, z, Token::Value(x), vocab).unwrap();
                        let oracle =
                            bayes_posterior_oracle(&sched, s, t, z, Token::Value(x), vocab)
                                .unwrap();
                        assert_dist_close(&closed, &oracle, 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn posterior_recovers_clean_token_at_s_zero() {
        let sched = Schedule::cosine();
        let d = posterior(&sched, 0.0, 0.6, Token::Mask, Token::Value(2), 4).unwrap();
        assert_eq!(d.prob(Token::Value(2)), 1.0);
    }

    #[test]
    fn posterior_rejects_inconsistent_observation() {
        let sched = Schedule::cosine();
        let closed = posterior(&sched, 0.2, 0.6, Token::Value(1), Token::Value(2), 4);
        assert!(matches!(closed, Err(KernelError::InconsistentPair { .. })));
        // The oracle agrees: the event has probability zero.
        let oracle =
            bayes_posterior_oracle(&sched, 0.2, 0.6, Token::Value(1), Token::Value(2), 4);
        assert!(oracle.is_err());
    }

    #[test]
    fn reverse_kernel_with_delta_mu_is_the_posterior() {
        let sched = Schedule::cosine();
        let vocab = 3u16;
        let mut mu = vec![0.0; vocab as usize];
        mu[2] = 1.0;
        let rk = reverse_kernel(&sched, 0.3, 0.8, Token::Mask, &mu, vocab).unwrap();
        let post = posterior(&sched, 0.3, 0.8, Token::Mask, Token::Value(2), vocab).unwrap();
        assert_dist_close(&rk, &post, 1e-15);
    }

    #[test]
    fn reverse_kernel_uniform_mu_splits_evenly() {
        let sched = Schedule::cosine();
        let mu = vec![0.5, 0.5];
        let rk = reverse_kernel(&sched, 0.25, 0.75, Token::Mask, &mu, 2).unwrap();
        let alpha_s = sched.alpha(0.25).unwrap();
        let alpha_t = sched.alpha(0.75).unwrap();
        let unmask = (alpha_s - alpha_t) / (1.0 - alpha_t);
        assert!((rk.prob(Token::Value(0)) - unmask / 2.0).abs() <= 1e-15);
        assert!((rk.prob(Token::Value(1)) - unmask / 2.0).abs() <= 1e-15);
        assert!(matches!(
            reverse_kernel(&sched, 0.25, 0.75, Token::Mask, &[0.9, 0.2], 2),
            Err(KernelError::UnnormalizedMu)
        ));
    }

    #[test]
    fn reverse_kernel_chains_like_direct_kernel_for_fixed_mu() {
        // With mu constant in time the reverse chain is Markov with the same
        // structure, so (t -> u -> s) must equal (t -> s).
        let sched = Schedule::cosine();
        let vocab = 2u16;
        let mu = vec![0.3, 0.7];
        let (s, u, t) = (0.2, 0.5, 0.9);
        let direct = reverse_kernel(&sched, s, t, Token::Mask, &mu, vocab).unwrap();
        let first = reverse_kernel(&sched, u, t, Token::Mask, &mu, vocab).unwrap();
        let mut composed = vec![0.0; vocab as usize + 1];
        for (mid, p_mid) in first.support() {
            if p_mid == 0.0 {
                continue;
            }
            let second = reverse_kernel(&sched, s, u, mid, &mu, vocab).unwrap();
            for (idx, p) in second.probs().iter().enumerate() {
                composed[idx] += p_mid * p;
            }
        }
        for (idx, p) in direct.probs().iter().enumerate() {
            assert!((p - composed[idx]).abs() <= 1e-12);
        }
    }

    #[test]
    fn kl_term_zero_for_perfect_denoiser_and_linear_otherwise() {
        let sched = Schedule::cosine();
        let x = TokenSeq::from_values(&[0, 1, 1], 2).unwrap();
        let mut z = x.clone();
        z.set(0, Token::Mask);
        z.set(2, Token::Mask);
        let perfect = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        assert_eq!(
            kl_term_closed_form(&sched, 0.2, 0.6, &z, &x, &perfect).unwrap(),
            0.0
        );

        let mu = vec![vec![0.25, 0.75], vec![0.5, 0.5], vec![0.4, 0.6]];
        let base = kl_term_closed_form(&sched, 0.2, 0.6, &z, &x, &mu).unwrap();
        // Doubling -log mu at position 0 doubles that position's share.
        let mut sharper = mu.clone();
        sharper[0][0] = mu[0][0] * mu[0][0]; // -log squares to 2x
        sharper[0][1] = 1.0 - sharper[0][0];
        let bumped = kl_term_closed_form(&sched, 0.2, 0.6, &z, &x, &sharper).unwrap();
        let alpha_s = sched.alpha(0.2).unwrap();
        let alpha_t = sched.alpha(0.6).unwrap();
        let coef = (alpha_s - alpha_t) / (1.0 - alpha_t);
        let pos0 = coef * -(mu[0][0] as f64).ln();
        assert!((bumped - base - pos0).abs() <= 1e-12);
    }

    #[test]
    fn kl_term_matches_direct_kl_enumeration() {
        // Oracle: sum over positions of KL(posterior || reverse_kernel).
        let sched = Schedule::cosine();
        let x = TokenSeq::from_values(&[1, 0], 3).unwrap();
        let mut z = x.clone();
        z.set(1, Token::Mask);
        let mu = vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]];
        let (s, t) = (0.3, 0.7);
        let closed = kl_term_closed_form(&sched, s, t, &z, &x, &mu).unwrap();
        let mut oracle = 0.0;
        for position in 0..x.len() {
            let post = posterior(&sched, s, t, z.get(position), x.get(position), 3).unwrap();
            let rk = reverse_kernel(&sched, s, t, z.get(position), &mu[position], 3).unwrap();
            for (token, p) in post.support() {
                if p > 0.0 {
                    oracle += p * (p / rk.prob(token)).ln();
                }
            }
        }
        assert!((closed - oracle).abs() <= 1e-12, "{closed} vs {oracle}");
    }

    #[test]
    fn kl_term_infinite_on_zero_mass() {
        let sched = Schedule::cosine();
        let x = TokenSeq::from_values(&[0], 2).unwrap();
        let mut z = x.clone();
        z.set(0, Token::Mask);
        let mu = vec![vec![0.0, 1.0]];
        assert_eq!(
            kl_term_closed_form(&sched, 0.2, 0.6, &z, &x, &mu).unwrap(),
            f64::INFINITY
        );
    }

    #[test]
    fn sample_zt_endpoints_and_mask_rate() {
        let sched = Schedule::cosine();
        let x = TokenSeq::from_values(&[0, 1, 0, 1], 2).unwrap();
        let mut r = rng::stream(11, "sample-zt");
        assert_eq!(sample_zt(&sched, 0.0, &x, &mut r).unwrap(), x);
        assert_eq!(
            sample_zt(&sched, 1.0, &x, &mut r).unwrap().mask_count(),
            4
        );
        // At alpha = 1/2 the mask fraction concentrates around 0.5.
        let draws = 100_000;
        let mut masked = 0usize;
        for _ in 0..draws {
            masked += sample_zt(&sched, 1.0 / 3.0, &x, &mut r).unwrap().mask_count();
        }
        let fraction = masked as f64 / (draws * x.len()) as f64;
        assert!((fraction - 0.5).abs() <= 0.01, "fraction {fraction}");
    }

    #[test]
    fn state_index_round_trip() {
        let vocab = 3u16;
        let len = 3usize;
        let states = (vocab as usize + 1).pow(len as u32);
        for idx in 0..states {
            let seq = TokenSeq::from_state_index(idx, len, vocab);
            assert_eq!(seq.state_index(), idx);
        }
    }

    proptest! {
        #[test]
        fn kernels_return_normalized_distributions(
            s_frac in 0.0f64..1.0,
            gap in 0.01f64..1.0,
            token in 0u16..3,
            masked in proptest::bool::ANY,
        ) {
            let sched = Schedule::cosine();
            let vocab = 3u16;
            let s = s_frac * 0.98;
            let t = (s + gap * (1.0 - s)).min(1.0).max(s + 1e-6);
            let z = if masked { Token::Mask } else { Token::Value(token) };

            let mut dists = vec![
                marginal(&sched, t, Token::Value(token), vocab).unwrap(),
                transition(&sched, s, t, z, vocab).unwrap(),
                posterior(&sched, s, t, z, Token::Value(token), vocab).unwrap(),
            ];
            if t < 1.0 {
                dists.push(
                    bayes_posterior_oracle(&sched, s, t, z, Token::Value(token), vocab).unwrap(),
                );
            }
            let mu = vec![0.2, 0.5, 0.3];
            dists.push(reverse_kernel(&sched, s, t, z, &mu, vocab).unwrap());

            for d in dists {
                prop_assert!(d.probs().iter().all(|&p| p >= 0.0));
                let sum: f64 = d.probs().iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn posterior_always_matches_oracle(
            s_frac in 0.0f64..1.0,
            gap in 0.01f64..1.0,
            token in 0u16..3,
            masked in proptest::bool::ANY,
        ) {
            let sched = Schedule::cosine();
            let vocab = 3u16;
            let s = s_frac * 0.9;
            // Keep t < 1 so the oracle's conditioning event has mass.
            let t = (s + gap * (0.99 - s)).max(s + 1e-6);
            let z = if masked { Token::Mask } else { Token::Value(token) };
            let closed = posterior(&sched, s, t, z, Token::Value(token), vocab).unwrap();
            let oracle =
                bayes_posterior_oracle(&sched, s, t, z, Token::Value(token), vocab).unwrap();
            for (a, b) in closed.probs().iter().zip(oracle.probs()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
