//! Leakage localization: CPA against hypothesized intermediates, and class
//! gradient saliency maps explaining what a trained network attends to.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::attack::candidate_label_table;
use crate::engine::TrainedModel;
use crate::netspec::{Mode, ModelGraph};
use crate::traces::{target_key_byte, LeakageModel, TraceSet};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerModel {
    HammingWeight,
    Identity,
}

impl PowerModel {
    fn apply(self, v: u8) -> f64 {
        match self {
            PowerModel::HammingWeight => f64::from(v.count_ones()),
            PowerModel::Identity => f64::from(v),
        }
    }
}

/// Pearson correlation per key hypothesis and sample index.
#[derive(Debug, Clone)]
pub struct CpaResult {
    /// 256 × D; hypotheses with a constant power vector are zeroed.
    pub corr: Array2<f64>,
    /// Row of the true key byte, when the set carries one fixed key.
    pub known_key_row: Option<usize>,
    /// Hypotheses whose power vector had zero variance across the traces.
    pub constant_rows: Vec<usize>,
    pub lm: LeakageModel,
    pub power_model: PowerModel,
}

impl CpaResult {
    /// Sample index with the largest |corr| in hypothesis row `k`.
    pub fn argmax_abs(&self, k: usize) -> usize {
        let row = self.corr.row(k);
        let mut best = 0;
        for (t, &v) in row.iter().enumerate() {
            if v.abs() > row[best].abs() {
                best = t;
            }
        }
        best
    }

    /// CSV of one hypothesis row: `t,corr`.
    pub fn row_csv(&self, k: usize) -> String {
        let mut s = String::from("t,corr\n");
        for (t, &v) in self.corr.row(k).iter().enumerate() {
            s.push_str(&format!("{t},{v}\n"));
        }
        s
    }
}

/// Correlation between `power_model(label under hypothesis k)` and every
/// sample column. Centered two-pass computation; the matrix product covers
/// all 256 hypotheses at once.
pub fn cpa(ts: &TraceSet, lm: &LeakageModel, power_model: PowerModel) -> Result<CpaResult> {
    lm.validate()?;
    ts.validate()?;
    let n = ts.n_traces();
    if n < 3 {
        return Err(Error::Config(format!(
            "n_traces = {n} is too few for a correlation estimate (need >= 3)"
        )));
    }
    let d = ts.n_samples();
    let table = candidate_label_table(lm, ts)?;

    let mut h = Array2::<f64>::zeros((256, n));
    for j in 0..n {
        for k in 0..256 {
            h[[k, j]] = power_model.apply(table[[j, k]]);
        }
    }
    let mut constant_rows = Vec::new();
    let mut h_norm = [0.0f64; 256];
    for k in 0..256 {
        let mean = h.row(k).sum() / n as f64;
        let mut row = h.row_mut(k);
        row -= mean;
        let ss: f64 = row.iter().map(|v| v * v).sum();
        if ss == 0.0 {
            constant_rows.push(k);
        }
        h_norm[k] = ss.sqrt();
    }

    let mut x = ts.samples.clone();
    let col_means = x.mean_axis(Axis(0)).unwrap();
    x -= &col_means;
    let x_norm: Vec<f64> = x
        .columns()
        .into_iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();

    let num = h.dot(&x);
    let mut corr = Array2::<f64>::zeros((256, d));
    for k in 0..256 {
        if h_norm[k] == 0.0 {
            continue;
        }
        for t in 0..d {
            if x_norm[t] == 0.0 {
                continue;
            }
            corr[[k, t]] = (num[[k, t]] / (h_norm[k] * x_norm[t])).clamp(-1.0, 1.0);
        }
    }

    let known_key_row = ts
        .fixed_key()
        .ok()
        .map(|key| target_key_byte(lm, &key) as usize);
    Ok(CpaResult {
        corr,
        known_key_row,
        constant_rows,
        lm: lm.clone(),
        power_model,
    })
}

/// Which class each trace's saliency map is computed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassPolicy {
    /// The model's own argmax prediction per trace.
    Predicted,
    /// Supplied ground-truth labels per trace.
    TrueLabels,
    Fixed { class: u8 },
}

/// Saliency over time: nonnegative weight per pooled timestep, expanded
/// back to the input length.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub coarse: Vec<f64>,
    pub expanded: Vec<f64>,
    pub class: ClassPolicy,
    /// Number of traces averaged into the map.
    pub count: usize,
}

impl WeightMap {
    /// Expanded map rescaled to [0, 1] for plotting; raw values stay in
    /// `expanded`.
    pub fn normalized_expanded(&self) -> Vec<f64> {
        let max = self.expanded.iter().cloned().fold(0.0f64, f64::max);
        if max == 0.0 {
            return vec![0.0; self.expanded.len()];
        }
        self.expanded.iter().map(|v| v / max).collect()
    }

    /// CSV of the expanded map: `t,weight`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,weight\n");
        for (t, &v) in self.expanded.iter().enumerate() {
            s.push_str(&format!("{t},{v}\n"));
        }
        s
    }
}

/// Feature matrix after the final pooling stage for one trace, arranged
/// time-major: pooled timesteps × feature channels.
pub fn cgv_feature_matrix(model: &mut TrainedModel, trace: &Array1<f64>) -> Result<Array2<f64>> {
    forward_one(&mut model.graph, trace)?;
    let tap = tap_or_err(&model.graph)?;
    let (_, v, dp) = tap.dim();
    let mut a = Array2::<f64>::zeros((dp, v));
    for i in 0..v {
        for j in 0..dp {
            a[[j, i]] = tap[[0, i, j]];
        }
    }
    Ok(a)
}

/// Weight map of one trace for one class: the pooled features are weighted
/// by the gradient of the pre-softmax class score and summed over channels,
/// keeping only positive contributions.
pub fn cgv_weight_map(model: &mut TrainedModel, trace: &Array1<f64>, class: u8) -> Result<WeightMap> {
    forward_one(&mut model.graph, trace)?;
    let coarse = coarse_map(&model.graph, class)?;
    let expanded = expand_nearest(&coarse, model.graph.config().input_length);
    Ok(WeightMap {
        coarse,
        expanded,
        class: ClassPolicy::Fixed { class },
        count: 1,
    })
}

/// Mean weight map over many traces. Labels are required only by the
/// `TrueLabels` policy.
pub fn cgv_aggregate(
    model: &mut TrainedModel,
    samples: &Array2<f64>,
    labels: Option<&[u8]>,
    policy: ClassPolicy,
) -> Result<WeightMap> {
    let n = samples.nrows();
    if n == 0 {
        return Err(Error::Config("no traces to aggregate".into()));
    }
    if let ClassPolicy::TrueLabels = policy {
        let l = labels.ok_or_else(|| {
            Error::Config("class_policy true_labels needs per-trace labels".into())
        })?;
        if l.len() != n {
            return Err(Error::Shape(format!(
                "{} labels for {} traces",
                l.len(),
                n
            )));
        }
    }
    let mut sum: Option<Vec<f64>> = None;
    for j in 0..n {
        let trace = samples.row(j).to_owned();
        forward_one(&mut model.graph, &trace)?;
        let class = match policy {
            ClassPolicy::Fixed { class } => class,
            ClassPolicy::TrueLabels => labels.unwrap()[j],
            ClassPolicy::Predicted => predicted_class(&model.graph),
        };
        let coarse = coarse_map(&model.graph, class)?;
        match &mut sum {
            None => sum = Some(coarse),
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(&coarse) {
                    *a += c;
                }
            }
        }
    }
    let mut coarse = sum.unwrap();
    for v in coarse.iter_mut() {
        *v /= n as f64;
    }
    // The expansion is an index map, so expanding the mean equals the mean
    // of the expansions.
    let expanded = expand_nearest(&coarse, model.graph.config().input_length);
    Ok(WeightMap { coarse, expanded, class: policy, count: n })
}

fn forward_one(graph: &mut ModelGraph, trace: &Array1<f64>) -> Result<()> {
    let d = graph.config().input_length;
    if trace.len() != d {
        return Err(Error::Shape(format!(
            "trace length {} != model input_length {d}",
            trace.len()
        )));
    }
    let x = trace.view().insert_axis(Axis(0)).to_owned();
    graph.forward(&x, Mode::Eval, None);
    Ok(())
}

fn tap_or_err(graph: &ModelGraph) -> Result<&ndarray::Array3<f64>> {
    graph
        .tap_post_final_pooling()
        .ok_or_else(|| Error::Config("model exposes no post-pooling features".into()))
}

fn predicted_class(graph: &ModelGraph) -> u8 {
    let logits = graph.tap_pre_softmax().expect("forward before prediction");
    let row = logits.row(0);
    let mut best = 0usize;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best as u8
}

fn coarse_map(graph: &ModelGraph, class: u8) -> Result<Vec<f64>> {
    let mut seed = Array2::<f64>::zeros((1, 256));
    seed[[0, class as usize]] = 1.0;
    let alpha = graph.backward_data_to_tap(&seed);
    let tap = tap_or_err(graph)?;
    let (_, v, dp) = tap.dim();
    let mut coarse = vec![0.0; dp];
    for (j, c) in coarse.iter_mut().enumerate() {
        let s: f64 = (0..v).map(|i| tap[[0, i, j]] * alpha[[0, i, j]]).sum();
        *c = s.max(0.0);
    }
    Ok(coarse)
}

/// Nearest-neighbor upsample to exactly `d` entries; each coarse entry
/// repeats ⌊d/d'⌋ or ⌈d/d'⌉ times.
fn expand_nearest(coarse: &[f64], d: usize) -> Vec<f64> {
    let dp = coarse.len();
    (0..d).map(|t| coarse[t * dp / d]).collect()
}
