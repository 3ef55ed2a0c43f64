//! Alignment-lattice negative log-likelihood for transducer training.
//!
//! The lattice is a `T'×(U+1)×(V+1)` block of log-probabilities with blank at
//! index 0 of the last axis. A path consumes all `T'` encoder frames through
//! blank steps and emits all `U` target tokens in order; the loss is the
//! negated log-sum over every such path. [`brute_force_nll`] enumerates the
//! paths explicitly and serves as the oracle for the dynamic program.

use thiserror::Error;

use crate::numerics::Tensor;

/// Sentinel for log(0); kept far from f64 infinity so guarded arithmetic
/// never produces NaN from `(-inf) - (-inf)`.
pub const LOG_ZERO: f64 = -1.0e30;
const LOG_ZERO_GUARD: f64 = -1.0e29;
const BRUTE_FORCE_LIMIT: usize = 16;

#[derive(Debug, Error)]
pub enum TransducerError {
    #[error("target id {id} at position {pos} must lie in [1, {vocab}]")]
    BadLabel { id: usize, pos: usize, vocab: usize },
    #[error("lattice shape {shape:?} does not fit {targets} targets (need rank 3, U+1 rows)")]
    BadShape { shape: Vec<usize>, targets: usize },
    #[error("lattice row ({t}, {u}) is not a log-distribution: logsumexp = {lse:.3e}")]
    NotNormalized { t: usize, u: usize, lse: f64 },
    #[error("path enumeration guard exceeded: T' + U = {sum} > {limit}")]
    TooLarge { sum: usize, limit: usize },
}

/// `T'×(U+1)×(V+1)` log-probabilities over tokens-plus-blank.
#[derive(Debug, Clone)]
pub struct JointLogProbLattice {
    log_probs: Tensor,
}

impl JointLogProbLattice {
    /// Wraps a rank-3 tensor with at least one frame and a non-empty last axis.
    pub fn new(log_probs: Tensor) -> Result<Self, TransducerError> {
        let s = log_probs.shape();
        if s.len() != 3 || s[0] == 0 || s[1] == 0 || s[2] < 2 {
            return Err(TransducerError::BadShape {
                shape: s.to_vec(),
                targets: s.get(1).map_or(0, |u| u.saturating_sub(1)),
            });
        }
        Ok(Self { log_probs })
    }

    /// Verifies each (t, u) slice is a log-distribution within `tol`.
    pub fn check_normalized(&self, tol: f64) -> Result<(), TransducerError> {
        let (frames, rows, v1) = self.dims();
        for t in 0..frames {
            for u in 0..rows {
                let base = (t * rows + u) * v1;
                let row = &self.log_probs.data()[base..base + v1];
                let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                if lse.abs() > tol {
                    return Err(TransducerError::NotNormalized { t, u, lse });
                }
            }
        }
        Ok(())
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.log_probs
    }

    pub fn frames(&self) -> usize {
        self.log_probs.shape()[0]
    }

    /// U implied by the lattice: number of emit rows minus one.
    pub fn target_len(&self) -> usize {
        self.log_probs.shape()[1] - 1
    }

    pub fn vocab_size(&self) -> usize {
        self.log_probs.shape()[2] - 1
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.log_probs.shape();
        (s[0], s[1], s[2])
    }

    #[inline]
    fn lp(&self, t: usize, u: usize, k: usize) -> f64 {
        let (_, rows, v1) = self.dims();
        self.log_probs.data()[(t * rows + u) * v1 + k]
    }
}

/// Loss value and its gradient with respect to the lattice log-probabilities.
///
/// An unreachable terminal (possible only through log-zero emissions) yields
/// `nll = +inf` with no gradient.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub nll: f64,
    pub grad: Option<Tensor>,
}

impl LossResult {
    pub fn is_feasible(&self) -> bool {
        self.nll.is_finite()
    }
}

fn validate_targets(
    lattice: &JointLogProbLattice,
    targets: &[usize],
) -> Result<(), TransducerError> {
    let (_, rows, _) = lattice.dims();
    if rows != targets.len() + 1 {
        return Err(TransducerError::BadShape {
            shape: lattice.log_probs.shape().to_vec(),
            targets: targets.len(),
        });
    }
    let vocab = lattice.vocab_size();
    for (pos, &id) in targets.iter().enumerate() {
        if id == 0 || id > vocab {
            return Err(TransducerError::BadLabel { id, pos, vocab });
        }
    }
    Ok(())
}

#[inline]
fn logsumexp2(a: f64, b: f64) -> f64 {
    if a <= LOG_ZERO_GUARD && b <= LOG_ZERO_GUARD {
        return LOG_ZERO;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo <= LOG_ZERO_GUARD {
        hi
    } else {
        hi + (lo - hi).exp().ln_1p()
    }
}

#[inline]
fn guarded_add(a: f64, b: f64) -> f64 {
    if a <= LOG_ZERO_GUARD || b <= LOG_ZERO_GUARD {
        LOG_ZERO
    } else {
        a + b
    }
}

/// Forward scores: `alpha[t][u]` is the log-probability of consuming the
/// first `t` frames while emitting the first `u` targets and sitting at
/// lattice node `(t, u)`.
pub fn forward_alpha(
    lattice: &JointLogProbLattice,
    targets: &[usize],
) -> Result<Tensor, TransducerError> {
    validate_targets(lattice, targets)?;
    let (frames, rows, _) = lattice.dims();
    let mut alpha = vec![LOG_ZERO; frames * rows];
    alpha[0] = 0.0;
    for t in 0..frames {
        for u in 0..rows {
            if t == 0 && u == 0 {
                continue;
            }
            let from_blank = if t > 0 {
                guarded_add(alpha[(t - 1) * rows + u], lattice.lp(t - 1, u, 0))
            } else {
                LOG_ZERO
            };
            let from_emit = if u > 0 {
                guarded_add(alpha[t * rows + u - 1], lattice.lp(t, u - 1, targets[u - 1]))
            } else {
                LOG_ZERO
            };
            alpha[t * rows + u] = logsumexp2(from_blank, from_emit);
        }
    }
    Ok(Tensor::new(vec![frames, rows], alpha).expect("alpha shape"))
}

/// Backward scores: `beta[t][u]` is the log-probability of completing the
/// lattice from node `(t, u)`, including the final blank.
fn backward_beta(lattice: &JointLogProbLattice, targets: &[usize]) -> Vec<f64> {
    let (frames, rows, _) = lattice.dims();
    let mut beta = vec![LOG_ZERO; frames * rows];
    beta[(frames - 1) * rows + rows - 1] = lattice.lp(frames - 1, rows - 1, 0);
    for t in (0..frames).rev() {
        for u in (0..rows).rev() {
            if t == frames - 1 && u == rows - 1 {
                continue;
            }
            let via_blank = if t + 1 < frames {
                guarded_add(lattice.lp(t, u, 0), beta[(t + 1) * rows + u])
            } else {
                LOG_ZERO
            };
            let via_emit = if u + 1 < rows {
                guarded_add(lattice.lp(t, u, targets[u]), beta[t * rows + u + 1])
            } else {
                LOG_ZERO
            };
            beta[t * rows + u] = logsumexp2(via_blank, via_emit);
        }
    }
    beta
}

/// Negative log-likelihood of the target sequence plus the analytic gradient
/// from alpha/beta edge occupancies.
pub fn transducer_nll(
    lattice: &JointLogProbLattice,
    targets: &[usize],
) -> Result<LossResult, TransducerError> {
    let alpha = forward_alpha(lattice, targets)?;
    let (frames, rows, v1) = lattice.dims();
    let terminal = guarded_add(
        alpha.data()[(frames - 1) * rows + rows - 1],
        lattice.lp(frames - 1, rows - 1, 0),
    );
    if terminal <= LOG_ZERO_GUARD {
        return Ok(LossResult {
            nll: f64::INFINITY,
            grad: None,
        });
    }
    let log_p = terminal;
    let beta = backward_beta(lattice, targets);
    let alpha = alpha.data();

    // d(-logP)/d lp(t,u,k) = -occupancy of the edge that consumes lp(t,u,k).
    let mut grad = vec![0.0; frames * rows * v1];
    for t in 0..frames {
        for u in 0..rows {
            let a = alpha[t * rows + u];
            if a <= LOG_ZERO_GUARD {
                continue;
            }
            // Blank edge leaves (t,u) upward in time; from the last frame it
            // exits the lattice and is only valid at u = U.
            let blank_cont = if t + 1 < frames {
                beta[(t + 1) * rows + u]
            } else if u == rows - 1 {
                0.0
            } else {
                LOG_ZERO
            };
            if blank_cont > LOG_ZERO_GUARD {
                let occ = a + lattice.lp(t, u, 0) + blank_cont - log_p;
                if occ > LOG_ZERO_GUARD {
                    grad[(t * rows + u) * v1] = -occ.exp();
                }
            }
            if u + 1 < rows {
                let emit_cont = beta[t * rows + u + 1];
                if emit_cont > LOG_ZERO_GUARD {
                    let occ = a + lattice.lp(t, u, targets[u]) + emit_cont - log_p;
                    if occ > LOG_ZERO_GUARD {
                        grad[(t * rows + u) * v1 + targets[u]] = -occ.exp();
                    }
                }
            }
        }
    }
    Ok(LossResult {
        nll: -log_p,
        grad: Some(Tensor::new(vec![frames, rows, v1], grad).expect("grad shape")),
    })
}

/// Exhaustive path-sum oracle for small lattices.
///
/// Enumerates every interleaving of `T'` blank steps and `U` in-order
/// emissions (all emissions happen at some frame `t < T'`), which is the
/// same path set the dynamic program integrates.
pub fn brute_force_nll(
    lattice: &JointLogProbLattice,
    targets: &[usize],
) -> Result<f64, TransducerError> {
    validate_targets(lattice, targets)?;
    let frames = lattice.frames();
    let sum = frames + targets.len();
    if sum > BRUTE_FORCE_LIMIT {
        return Err(TransducerError::TooLarge {
            sum,
            limit: BRUTE_FORCE_LIMIT,
        });
    }

    fn walk(
        lattice: &JointLogProbLattice,
        targets: &[usize],
        t: usize,
        u: usize,
        acc: f64,
        out: &mut Vec<f64>,
    ) {
        let frames = lattice.frames();
        if t == frames - 1 && u == targets.len() {
            out.push(acc + lattice.lp(t, u, 0));
            // Even at the terminal node the path may still emit nothing more,
            // so only the exit blank applies; fall through for no other moves.
        }
        if u < targets.len() {
            walk(
                lattice,
                targets,
                t,
                u + 1,
                acc + lattice.lp(t, u, targets[u]),
                out,
            );
        }
        if t + 1 < frames {
            walk(lattice, targets, t + 1, u, acc + lattice.lp(t, u, 0), out);
        }
    }

    let mut path_log_probs = Vec::new();
    walk(lattice, targets, 0, 0, 0.0, &mut path_log_probs);
    let max = path_log_probs
        .iter()
        .fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    if !max.is_finite() || max <= LOG_ZERO_GUARD {
        return Ok(f64::INFINITY);
    }
    let lse = max
        + path_log_probs
            .iter()
            .map(|v| (v - max).exp())
            .sum::<f64>()
            .ln();
    Ok(-lse)
}

/// Uniformly random normalized lattice, for tests and oracle sweeps.
pub fn random_lattice<R: rand::Rng>(
    frames: usize,
    target_len: usize,
    vocab: usize,
    rng: &mut R,
) -> JointLogProbLattice {
    let v1 = vocab + 1;
    let rows = target_len + 1;
    let mut data = Vec::with_capacity(frames * rows * v1);
    for _ in 0..frames * rows {
        let logits: Vec<f64> = (0..v1).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        data.extend(logits.iter().map(|v| v - lse));
    }
    JointLogProbLattice::new(
        Tensor::new(vec![frames, rows, v1], data).expect("lattice shape"),
    )
    .expect("valid dims")
}
