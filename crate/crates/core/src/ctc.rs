//! Log-space CTC loss via the forward algorithm, with a brute-force
//! enumeration oracle and greedy decoding.
//!
//! The same criterion backs the main recognition head, both language-masked
//! heads, and the segment-level boundary head.

use crate::error::{Error, Result};
use crate::matrix::{log_add, log_sum_exp, Matrix};

/// Log-softmax frame posteriors plus the blank id.
#[derive(Clone, Debug)]
pub struct LogProbLattice {
    log_probs: Matrix,
    blank: usize,
}

impl LogProbLattice {
    /// Validates that every row is a normalized log-distribution
    /// (log-sum-exp == 0 within 1e-9).
    pub fn new(log_probs: Matrix, blank: usize) -> Result<Self> {
        if log_probs.rows() == 0 {
            return Err(Error::Contract("lattice needs at least one frame".into()));
        }
        if blank >= log_probs.cols() {
            return Err(Error::Contract(format!(
                "blank id {} out of range for vocab {}",
                blank,
                log_probs.cols()
            )));
        }
        for t in 0..log_probs.rows() {
            let lse = log_sum_exp(log_probs.row(t));
            if lse.abs() > 1e-9 {
                return Err(Error::Contract(format!(
                    "lattice row {t} log-sum-exps to {lse:e}, not 0"
                )));
            }
        }
        Ok(LogProbLattice { log_probs, blank })
    }

    pub fn log_probs(&self) -> &Matrix {
        &self.log_probs
    }

    pub fn blank(&self) -> usize {
        self.blank
    }

    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    pub fn vocab(&self) -> usize {
        self.log_probs.cols()
    }
}

/// Minimum frame count a target needs: one frame per label plus a separating
/// blank between every adjacent repeat.
pub fn required_frames(target: &[usize]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

pub fn feasible(frames: usize, target: &[usize]) -> bool {
    frames >= required_frames(target)
}

fn validate_target(vocab: usize, blank: usize, target: &[usize]) -> Result<()> {
    for &id in target {
        if id == blank {
            return Err(Error::Contract(format!(
                "CTC target contains the blank id {blank}"
            )));
        }
        if id >= vocab {
            return Err(Error::Contract(format!(
                "CTC target id {id} out of range for vocab {vocab}"
            )));
        }
    }
    Ok(())
}

/// Negative log-likelihood of `target` under the lattice.
pub fn ctc_loss(lattice: &LogProbLattice, target: &[usize]) -> Result<f64> {
    let (nll, _) = nll_and_grad(&lattice.log_probs, lattice.blank, target)?;
    Ok(nll)
}

/// NLL plus its gradient with respect to every log-probability entry.
pub fn ctc_grad(lattice: &LogProbLattice, target: &[usize]) -> Result<(f64, Matrix)> {
    nll_and_grad(&lattice.log_probs, lattice.blank, target)
}

/// Forward-backward over the blank-interleaved label sequence, entirely in
/// log space. Returns (nll, d nll / d log_probs).
pub(crate) fn nll_and_grad(
    log_probs: &Matrix,
    blank: usize,
    target: &[usize],
) -> Result<(f64, Matrix)> {
    let frames = log_probs.rows();
    validate_target(log_probs.cols(), blank, target)?;
    let required = required_frames(target);
    if frames < required {
        return Err(Error::CtcInfeasible { frames, required });
    }

    // Extended labels: blank, t0, blank, t1, ..., blank.
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| -> usize {
        if s % 2 == 0 {
            blank
        } else {
            target[s / 2]
        }
    };
    let neg_inf = f64::NEG_INFINITY;

    // alpha[t][s]: log prob of all prefixes ending in state s, including the
    // emission at frame t.
    let mut alpha = vec![vec![neg_inf; s_len]; frames];
    alpha[0][0] = log_probs.get(0, blank);
    if s_len > 1 {
        alpha[0][1] = log_probs.get(0, label(1));
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if s >= 2 && label(s) != blank && label(s) != label(s - 2) {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            if acc != neg_inf {
                alpha[t][s] = acc + log_probs.get(t, label(s));
            }
        }
    }

    let mut log_z = alpha[frames - 1][s_len - 1];
    if s_len > 1 {
        log_z = log_add(log_z, alpha[frames - 1][s_len - 2]);
    }
    if log_z == neg_inf {
        return Err(Error::Numerical(
            "CTC total probability underflowed to zero".into(),
        ));
    }

    // beta[t][s]: log prob of completing from state s using emissions t+1..T-1.
    let mut beta = vec![vec![neg_inf; s_len]; frames];
    beta[frames - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[frames - 1][s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let mut acc = if beta[t + 1][s] != neg_inf {
                beta[t + 1][s] + log_probs.get(t + 1, label(s))
            } else {
                neg_inf
            };
            if s + 1 < s_len && beta[t + 1][s + 1] != neg_inf {
                acc = log_add(acc, beta[t + 1][s + 1] + log_probs.get(t + 1, label(s + 1)));
            }
            if s + 2 < s_len
                && label(s + 2) != blank
                && label(s + 2) != label(s)
                && beta[t + 1][s + 2] != neg_inf
            {
                acc = log_add(acc, beta[t + 1][s + 2] + log_probs.get(t + 1, label(s + 2)));
            }
            beta[t][s] = acc;
        }
    }

    // d(-log Z)/d lp[t][k] = -exp(logsumexp_{s: label(s)=k}(alpha+beta) - log Z).
    let mut grad = Matrix::zeros(frames, log_probs.cols());
    for t in 0..frames {
        for s in 0..s_len {
            let g = alpha[t][s] + beta[t][s];
            if g == neg_inf {
                continue;
            }
            let k = label(s);
            let cur = grad.get(t, k);
            let add = -(g - log_z).exp();
            grad.set(t, k, cur + add);
        }
    }
    Ok((-log_z, grad))
}

/// Enumerates every length-T frame labeling, collapses it, and sums the
/// probabilities of those matching the target. Independent of the forward
/// recursion; enforced to stay under 10^7 sequences.
pub fn ctc_brute_force(lattice: &LogProbLattice, target: &[usize]) -> Result<f64> {
    let frames = lattice.frames();
    let vocab = lattice.vocab();
    validate_target(vocab, lattice.blank, target)?;
    let total = (vocab as f64).powi(frames as i32);
    if total > 1e7 {
        return Err(Error::Contract(format!(
            "brute-force instance too large: {vocab}^{frames} sequences"
        )));
    }

    let mut prob_sum = 0.0;
    let mut seq = vec![0usize; frames];
    let count = (vocab as u64).pow(frames as u32);
    for n in 0..count {
        let mut rem = n;
        for slot in seq.iter_mut() {
            *slot = (rem % vocab as u64) as usize;
            rem /= vocab as u64;
        }
        if collapses_to(&seq, lattice.blank, target) {
            let log_p: f64 = seq
                .iter()
                .enumerate()
                .map(|(t, &k)| lattice.log_probs.get(t, k))
                .sum();
            prob_sum += log_p.exp();
        }
    }
    if prob_sum <= 0.0 {
        return Err(Error::CtcInfeasible {
            frames,
            required: required_frames(target),
        });
    }
    Ok(-prob_sum.ln())
}

fn collapses_to(seq: &[usize], blank: usize, target: &[usize]) -> bool {
    let mut out = Vec::with_capacity(target.len());
    let mut prev = None;
    for &k in seq {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out == target
}

/// Per-frame argmax, collapse repeats, drop blanks.
pub fn ctc_greedy_decode(lattice: &LogProbLattice) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..lattice.frames() {
        let k = lattice.log_probs.argmax_row(t);
        if Some(k) != prev && k != lattice.blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}
