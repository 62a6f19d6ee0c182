//! Key recovery and evaluation: per-candidate log-likelihood scores, key
//! rank, average-rank curves over resampled attack sets, and required-traces
//! extraction.

use std::fmt;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{predict_proba, TrainedModel};
use crate::traces::{target_key_byte, LeakageModel, TraceSet};
use crate::{Error, Result};

/// Probabilities are clamped here before the log so scores stay finite
/// without reordering nonzero entries.
pub const SCORE_EPS: f64 = 1e-40;

pub const DEFAULT_REPEATS: usize = 300;

/// Accumulated log-likelihood per key-byte candidate.
#[derive(Debug, Clone)]
pub struct ScoreVector {
    pub g: [f64; 256],
}

/// N×256 label table: entry (j, k) is the class label of trace j under
/// key-byte hypothesis k. Every row is a permutation of 0..=255.
pub fn candidate_label_table(lm: &LeakageModel, ts: &TraceSet) -> Result<Array2<u8>> {
    lm.validate()?;
    ts.validate()?;
    let n = ts.n_traces();
    let mut table = Array2::<u8>::zeros((n, 256));
    for j in 0..n {
        let p = ts.plaintexts.row(j);
        let c = ts.ciphertexts.as_ref().map(|a| a.row(j));
        let m = ts.masks.as_ref().map(|a| a.row(j));
        let p = p.as_slice().unwrap();
        let c = c.as_ref().and_then(|r| r.as_slice());
        let m = m.as_ref().and_then(|r| r.as_slice());
        for k in 0..256usize {
            table[[j, k]] = lm.label_from_parts(p, c, m, k as u8)?;
        }
    }
    Ok(table)
}

/// g_k = Σ_j log(max(probs[j, labels[j, k]], SCORE_EPS)).
pub fn log_likelihood_scores(probs: &Array2<f64>, labels: &Array2<u8>) -> Result<ScoreVector> {
    if probs.ncols() != 256 || labels.dim() != probs.dim() {
        return Err(Error::Shape(format!(
            "probs {:?} and labels {:?} must both be N x 256",
            probs.dim(),
            labels.dim()
        )));
    }
    let mut g = [0.0f64; 256];
    for (prow, lrow) in probs.rows().into_iter().zip(labels.rows()) {
        for (gk, &label) in g.iter_mut().zip(lrow) {
            *gk += prow[label as usize].max(SCORE_EPS).ln();
        }
    }
    Ok(ScoreVector { g })
}

/// Midrank of the true key byte: strictly better candidates count one, ties
/// count one half. 0 means the key is recovered outright; 256 equal scores
/// give 127.5.
pub fn rank(g: &ScoreVector, true_key: u8) -> f64 {
    let gs = g.g[true_key as usize];
    let mut ahead = 0u32;
    let mut tied = 0u32;
    for (k, &v) in g.g.iter().enumerate() {
        if k == true_key as usize {
            continue;
        }
        if v > gs {
            ahead += 1;
        } else if v == gs {
            tied += 1;
        }
    }
    f64::from(ahead) + f64::from(tied) / 2.0
}

/// Rank of the true key as a function of attack-set size, aggregated over
/// seeded without-replacement resamplings of the attack traces.
#[derive(Debug, Clone)]
pub struct RankCurve {
    /// repeats × n_max; row r holds the ranks for n = 1..=n_max on repeat r.
    pub per_repeat: Array2<f64>,
    pub mean: Vec<f64>,
    pub p10: Vec<f64>,
    pub p90: Vec<f64>,
    pub seed: u64,
}

impl RankCurve {
    pub fn n_max(&self) -> usize {
        self.per_repeat.ncols()
    }

    pub fn repeats(&self) -> usize {
        self.per_repeat.nrows()
    }

    /// Aggregates per-repeat ranks: mean in repeat order, percentiles by
    /// linear interpolation on the sorted repeats.
    pub fn from_per_repeat(per_repeat: Array2<f64>, seed: u64) -> RankCurve {
        let n_max = per_repeat.ncols();
        let repeats = per_repeat.nrows();
        let mut mean = Vec::with_capacity(n_max);
        let mut p10 = Vec::with_capacity(n_max);
        let mut p90 = Vec::with_capacity(n_max);
        for col in per_repeat.columns() {
            mean.push(col.sum() / repeats as f64);
            let mut sorted: Vec<f64> = col.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            p10.push(percentile(&sorted, 0.10));
            p90.push(percentile(&sorted, 0.90));
        }
        RankCurve { per_repeat, mean, p10, p90, seed }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,mean_rank,p10,p90\n");
        for n in 0..self.n_max() {
            s.push_str(&format!(
                "{},{},{},{}\n",
                n + 1,
                self.mean[n],
                self.p10[n],
                self.p90[n]
            ));
        }
        s
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// 32-byte ChaCha seed: base seed in bytes 0..8, repeat index in 8..16.
fn repeat_seed(seed: u64, repeat: u64) -> [u8; 32] {
    let mut s = [0u8; 32];
    s[..8].copy_from_slice(&seed.to_le_bytes());
    s[8..16].copy_from_slice(&repeat.to_le_bytes());
    s
}

/// Curve from precomputed class probabilities and a candidate label table.
/// Each repeat draws n_max traces without replacement and re-ranks the true
/// key after every added trace. Repeats run in parallel but are seeded
/// individually, so the result is independent of scheduling.
pub fn average_rank_curve_from_probs(
    probs: &Array2<f64>,
    labels: &Array2<u8>,
    true_key: u8,
    n_max: usize,
    repeats: usize,
    seed: u64,
) -> Result<RankCurve> {
    let n = probs.nrows();
    if probs.ncols() != 256 || labels.dim() != (n, 256) {
        return Err(Error::Shape(format!(
            "probs {:?} and labels {:?} must both be N x 256",
            probs.dim(),
            labels.dim()
        )));
    }
    if n_max == 0 || n_max > n {
        return Err(Error::Config(format!(
            "n_max = {n_max} outside 1..={n} available attack traces"
        )));
    }
    if repeats == 0 {
        return Err(Error::Config("repeats must be positive".into()));
    }
    // Per-trace log-likelihood rows; scoring a prefix is then a running sum.
    let mut log_l = Array2::<f64>::zeros((n, 256));
    for j in 0..n {
        for k in 0..256 {
            log_l[[j, k]] = probs[[j, labels[[j, k]] as usize]].max(SCORE_EPS).ln();
        }
    }
    let rows: Vec<Vec<f64>> = (0..repeats)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha12Rng::from_seed(repeat_seed(seed, r as u64));
            let mut idx: Vec<usize> = (0..n).collect();
            let (chosen, _) = idx.partial_shuffle(&mut rng, n_max);
            let mut g = [0.0f64; 256];
            let mut out = Vec::with_capacity(n_max);
            for &j in chosen.iter() {
                let row = log_l.row(j);
                for (gk, &l) in g.iter_mut().zip(row) {
                    *gk += l;
                }
                out.push(rank(&ScoreVector { g }, true_key));
            }
            out
        })
        .collect();
    let mut per_repeat = Array2::<f64>::zeros((repeats, n_max));
    for (r, row) in rows.iter().enumerate() {
        for (n_i, &v) in row.iter().enumerate() {
            per_repeat[[r, n_i]] = v;
        }
    }
    Ok(RankCurve::from_per_repeat(per_repeat, seed))
}

/// Evaluates a trained model against an attack set with a known fixed key.
pub fn average_rank_curve(
    model: &mut TrainedModel,
    attack_set: &TraceSet,
    lm: &LeakageModel,
    n_max: usize,
    repeats: usize,
    seed: u64,
) -> Result<RankCurve> {
    let key = attack_set.fixed_key()?;
    let true_key = target_key_byte(lm, &key);
    let labels = candidate_label_table(lm, attack_set)?;
    let probs = predict_proba(model, &attack_set.samples)?;
    average_rank_curve_from_probs(&probs, &labels, true_key, n_max, repeats, seed)
}

/// Success criterion for required-traces extraction. Published results mix
/// both conventions, so reports state which one was applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Zero,
    BelowOne,
}

impl Threshold {
    fn met(self, mean_rank: f64) -> bool {
        match self {
            Threshold::Zero => mean_rank == 0.0,
            Threshold::BelowOne => mean_rank < 1.0,
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Threshold::Zero => "rank = 0",
            Threshold::BelowOne => "rank < 1",
        })
    }
}

/// Smallest n whose mean rank meets the threshold and keeps meeting it for
/// the rest of the measured curve; None if the tail never settles. Rank
/// curves wiggle, so a first crossing alone would over-report success.
pub fn required_traces(curve: &RankCurve, threshold: Threshold) -> Option<usize> {
    let mut first = None;
    for (i, &m) in curve.mean.iter().enumerate() {
        if threshold.met(m) {
            first.get_or_insert(i + 1);
        } else {
            first = None;
        }
    }
    first
}
