//! Frame-synchronous transducer decoding: greedy argmax with a per-frame
//! emission cap, and beam search over label sequences with log-sum merging.
//!
//! The hot path runs on plain tensors (no tape); a test pins it to the tape
//! forward used in training.

use std::collections::BTreeMap;
use std::collections::HashMap;

use thiserror::Error;

use crate::model::{ModelError, ModelParams};
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("beam width must be at least 1")]
    ZeroBeam,
    #[error("max_symbols_per_frame must be at least 1")]
    ZeroSymbolCap,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Argmax with ties broken toward blank (index 0), then the lowest id.
fn argmax_blank_first(log_probs: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in log_probs.iter().enumerate().skip(1) {
        if v > log_probs[best] {
            best = k;
        }
    }
    best
}

/// Plain-tensor prediction-network row for one trigram context.
fn predict_row(params: &ModelParams, prev2: usize, prev1: usize) -> Vec<f64> {
    let d_emb = params.dims.embed_dim;
    let emb = params.embedding.data();
    let mut input = Vec::with_capacity(2 * d_emb);
    input.extend_from_slice(&emb[prev2 * d_emb..(prev2 + 1) * d_emb]);
    input.extend_from_slice(&emb[prev1 * d_emb..(prev1 + 1) * d_emb]);
    let w = params.pred_proj.weight.data();
    let b = params.pred_proj.bias.data();
    let d_model = params.dims.d_model;
    (0..d_model)
        .map(|j| {
            let mut acc = b[j];
            for (i, x) in input.iter().enumerate() {
                acc += x * w[i * d_model + j];
            }
            acc.tanh()
        })
        .collect()
}

/// Plain-tensor joint log-probabilities for one (frame, context) pair.
fn joint_row(params: &ModelParams, h_enc: &[f64], h_pred: &[f64]) -> Vec<f64> {
    let w = params.joint_out.weight.data();
    let b = params.joint_out.bias.data();
    let out_dim = params.dims.output_dim();
    let mut logits = b.to_vec();
    for (i, (e, p)) in h_enc.iter().zip(h_pred).enumerate() {
        let a = (e + p).tanh();
        if a == 0.0 {
            continue;
        }
        for (l, wv) in logits.iter_mut().zip(&w[i * out_dim..(i + 1) * out_dim]) {
            *l += a * wv;
        }
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter_mut().for_each(|v| *v -= lse);
    logits
}

/// Per-utterance cache of prediction rows keyed by trigram context.
struct PredictionCache<'a> {
    params: &'a ModelParams,
    rows: HashMap<(usize, usize), Vec<f64>>,
}

impl<'a> PredictionCache<'a> {
    fn new(params: &'a ModelParams) -> Self {
        PredictionCache {
            params,
            rows: HashMap::new(),
        }
    }

    fn get(&mut self, prev2: usize, prev1: usize) -> &[f64] {
        self.rows
            .entry((prev2, prev1))
            .or_insert_with(|| predict_row(self.params, prev2, prev1))
    }
}

fn context_of(labels: &[u32]) -> (usize, usize) {
    let n = labels.len();
    let prev1 = if n >= 1 { labels[n - 1] as usize } else { 0 };
    let prev2 = if n >= 2 { labels[n - 2] as usize } else { 0 };
    (prev2, prev1)
}

/// Greedy decoding: per frame, repeatedly emit the argmax token (feeding it
/// back into the prediction network) until blank wins or the per-frame
/// emission cap is reached.
pub fn greedy_decode(
    params: &ModelParams,
    features: &Tensor,
    max_symbols_per_frame: usize,
) -> Result<Vec<u32>, DecodeError> {
    if max_symbols_per_frame == 0 {
        return Err(DecodeError::ZeroSymbolCap);
    }
    let h = params.encode(features)?;
    let (frames, d) = (h.shape()[0], h.shape()[1]);
    let mut cache = PredictionCache::new(params);
    let mut labels: Vec<u32> = Vec::new();
    for t in 0..frames {
        let h_enc = &h.data()[t * d..(t + 1) * d];
        let mut emitted = 0;
        loop {
            let (p2, p1) = context_of(&labels);
            let lp = joint_row(params, h_enc, cache.get(p2, p1));
            let best = argmax_blank_first(&lp);
            if best == 0 {
                break;
            }
            labels.push(best as u32);
            emitted += 1;
            if emitted >= max_symbols_per_frame {
                break;
            }
        }
    }
    Ok(labels)
}

#[derive(Clone)]
struct Child {
    labels: Vec<u32>,
    score: f64,
    is_blank: bool,
}

fn logaddexp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Beam search; returns the best label sequence and its merged log score.
///
/// Hypotheses expand one blank/emit decision at a time within a frame;
/// identical label sequences merge by log-sum. With `beam = 1` the pruning
/// keeps exactly the greedy argmax child (same tie-breaking), so the output
/// equals [`greedy_decode`].
pub fn beam_decode_scored(
    params: &ModelParams,
    features: &Tensor,
    beam: usize,
    max_symbols_per_frame: usize,
) -> Result<(Vec<u32>, f64), DecodeError> {
    if beam == 0 {
        return Err(DecodeError::ZeroBeam);
    }
    if max_symbols_per_frame == 0 {
        return Err(DecodeError::ZeroSymbolCap);
    }
    let h = params.encode(features)?;
    let (frames, d) = (h.shape()[0], h.shape()[1]);
    let mut cache = PredictionCache::new(params);

    let mut active: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
    active.insert(Vec::new(), 0.0);
    for t in 0..frames {
        let h_enc = &h.data()[t * d..(t + 1) * d];
        // Hypotheses that have taken blank on this frame, merged by labels.
        let mut finished: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        let mut step = 0;
        while !active.is_empty() {
            let mut children: Vec<Child> = Vec::new();
            for (labels, &score) in &active {
                let (p2, p1) = context_of(labels);
                let lp = joint_row(params, h_enc, cache.get(p2, p1));
                children.push(Child {
                    labels: labels.clone(),
                    score: score + lp[0],
                    is_blank: true,
                });
                if step < max_symbols_per_frame {
                    for (k, &token_lp) in lp.iter().enumerate().skip(1) {
                        let mut extended = labels.clone();
                        extended.push(k as u32);
                        children.push(Child {
                            labels: extended,
                            score: score + token_lp,
                            is_blank: false,
                        });
                    }
                }
            }
            // Score first; at ties blank wins, then the smaller labels.
            children.sort_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then_with(|| b.is_blank.cmp(&a.is_blank))
                    .then_with(|| a.labels.cmp(&b.labels))
            });
            children.truncate(beam);
            active = BTreeMap::new();
            for child in children {
                let slot = if child.is_blank {
                    &mut finished
                } else {
                    &mut active
                };
                match slot.get_mut(&child.labels) {
                    Some(existing) => *existing = logaddexp(*existing, child.score),
                    None => {
                        slot.insert(child.labels, child.score);
                    }
                }
            }
            step += 1;
        }
        // Top `beam` merged survivors enter the next frame.
        let mut survivors: Vec<(Vec<u32>, f64)> = finished.into_iter().collect();
        survivors.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        survivors.truncate(beam);
        active = survivors.into_iter().collect();
    }

    let best = active
        .into_iter()
        .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
        .expect("at least one hypothesis survives");
    Ok(best)
}

pub fn beam_decode(
    params: &ModelParams,
    features: &Tensor,
    beam: usize,
    max_symbols_per_frame: usize,
) -> Result<Vec<u32>, DecodeError> {
    Ok(beam_decode_scored(params, features, beam, max_symbols_per_frame)?.0)
}
