//! Probabilistic region proposal.
//!
//! The coarse per-sample peak probabilities are turned into a sampling
//! distribution: a candidate region (three windows wide) is centred on the
//! most probable sample, every candidate index contributes a unit-variance
//! Gaussian weighted by its probability, and the window centre is either
//! drawn from the resulting mixture (training) or taken at its mode
//! (inference).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// How the window centre is chosen from the sampling distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalMode {
    /// Draw the centre from the distribution.
    Stochastic,
    /// Take the distribution's mode (lowest index on ties).
    Deterministic,
}

/// Settings of the proposal stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalConfig {
    /// Width of the refined window, samples.
    pub window_len: usize,
    /// Candidate region width as a multiple of `window_len`.
    pub candidate_factor: usize,
    /// Standard deviation of each per-index Gaussian, samples.
    pub sampling_std: f64,
    /// Default mode; training overrides to stochastic, inference to
    /// deterministic.
    pub mode: ProposalMode,
}

impl ProposalConfig {
    pub fn new(window_len: usize) -> Self {
        ProposalConfig {
            window_len,
            candidate_factor: 3,
            sampling_std: 1.0,
            mode: ProposalMode::Deterministic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 {
            return Err(Error::Config("proposal window must be non-empty".into()));
        }
        if self.candidate_factor != 3 {
            return Err(Error::Config(format!(
                "candidate region must be 3 windows wide, got factor {}",
                self.candidate_factor
            )));
        }
        if self.sampling_std != 1.0 {
            return Err(Error::Config(format!(
                "sampling std is fixed at 1 sample, got {}",
                self.sampling_std
            )));
        }
        Ok(())
    }
}

/// A proposed window plus the distribution it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionProposal {
    /// First sample of the window (global coordinates).
    pub start: usize,
    /// Window width; equals the config's `window_len`.
    pub width: usize,
    /// First sample of the candidate region the distribution covers.
    pub candidate_start: usize,
    /// Categorical distribution over candidate indices; sums to 1.
    pub distribution: Vec<f64>,
}

impl RegionProposal {
    /// Inclusive-exclusive window bounds.
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.width
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Build the proposal for one frame's peak probabilities.
///
/// All-zero or non-finite probabilities fall back to a window at the centre
/// of the signal (logged as a warning).
pub fn propose_region(
    peak_prob: &[f64],
    cfg: &ProposalConfig,
    mode: ProposalMode,
    rng: &mut ChaCha8Rng,
) -> Result<RegionProposal> {
    cfg.validate()?;
    let len = peak_prob.len();
    let window = cfg.window_len;
    if window > len {
        return Err(Error::Config(format!(
            "proposal window {window} exceeds signal length {len}"
        )));
    }

    let total: f64 = peak_prob.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        log::warn!("degenerate peak probabilities; proposing the signal centre");
        let cand_width = (cfg.candidate_factor * window).min(len);
        let candidate_start = (len - cand_width) / 2;
        return Ok(RegionProposal {
            start: (len - window) / 2,
            width: window,
            candidate_start,
            distribution: vec![1.0 / cand_width as f64; cand_width],
        });
    }

    // Candidate region centred on the most probable sample.
    let peak = argmax(peak_prob);
    let cand_width = (cfg.candidate_factor * window).min(len);
    let candidate_start = peak
        .saturating_sub(cand_width / 2)
        .min(len - cand_width);

    // Mixture of per-index Gaussians, evaluated on the candidate grid. The
    // kernel is truncated where it is numerically negligible.
    let std = cfg.sampling_std;
    let radius = (6.0 * std).ceil() as i64;
    let mut dist = vec![0.0; cand_width];
    for (o, d) in dist.iter_mut().enumerate() {
        let j = (candidate_start + o) as i64;
        let mut acc = 0.0;
        for i in (j - radius).max(candidate_start as i64)
            ..=(j + radius).min((candidate_start + cand_width - 1) as i64)
        {
            let p = peak_prob[i as usize];
            let z = (j - i) as f64 / std;
            acc += p * (-0.5 * z * z).exp();
        }
        *d = acc;
    }
    let sum: f64 = dist.iter().sum();
    if sum <= 0.0 {
        // Probability mass lies entirely outside the candidate region.
        for d in dist.iter_mut() {
            *d = 1.0 / cand_width as f64;
        }
    } else {
        for d in dist.iter_mut() {
            *d /= sum;
        }
    }

    let centre = match mode {
        ProposalMode::Deterministic => candidate_start + argmax(&dist),
        ProposalMode::Stochastic => {
            let u: f64 = rng.gen();
            let mut cum = 0.0;
            let mut chosen = cand_width - 1;
            for (o, &d) in dist.iter().enumerate() {
                cum += d;
                if u < cum {
                    chosen = o;
                    break;
                }
            }
            candidate_start + chosen
        }
    };

    let start = centre.saturating_sub(window / 2).min(len - window);
    Ok(RegionProposal {
        start,
        width: window,
        candidate_start,
        distribution: dist,
    })
}
