//! Central-difference verification of the hand-written backward passes.
//! Samples random parameter and input coordinates, perturbs them in place,
//! and compares the numeric slope against the gradients the graph reports.

use super::ops;
use crate::netspec::{Mode, ModelGraph};
use crate::{Error, Result};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::{BTreeMap, HashMap};

const H: f64 = 1e-5;

/// Two objectives catch different mistakes: the loss exercises the fused
/// softmax/cross-entropy backward, a raw logit column exercises the pure
/// data path.
#[derive(Debug, Clone, Copy)]
pub enum Objective {
    Loss,
    ClassScore(usize),
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub max_rel_error: f64,
    /// Parameter name (or "input") and flat coordinate of the worst error.
    pub worst: Option<(String, usize)>,
    /// Worst relative error seen per parameter group.
    pub per_group: BTreeMap<String, f64>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    fn absorb(&mut self, other: GradCheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst.clone();
        }
        for (k, v) in other.per_group {
            let e = self.per_group.entry(k).or_insert(0.0);
            if v > *e {
                *e = v;
            }
        }
        self.checked += other.checked;
    }
}

/// Symmetric relative error with an absolute floor: when both values are
/// below 1e-6 the disagreement is noise and counts as zero.
pub(crate) fn rel_error(analytic: f64, numeric: f64) -> f64 {
    if analytic.abs() < 1e-6 && numeric.abs() < 1e-6 {
        return 0.0;
    }
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs())
}

fn objective_value(
    graph: &mut ModelGraph,
    x: &Array2<f64>,
    labels: &[u8],
    objective: Objective,
) -> f64 {
    let logits = graph.forward(x, Mode::Eval, None);
    match objective {
        Objective::Loss => ops::softmax_cross_entropy(&logits, labels).0,
        Objective::ClassScore(c) => logits.column(c).sum(),
    }
}

fn objective_dlogits(logits: &Array2<f64>, labels: &[u8], objective: Objective) -> Array2<f64> {
    match objective {
        Objective::Loss => {
            let probs = ops::softmax(logits);
            ops::cross_entropy_grad(&probs, labels)
        }
        Objective::ClassScore(c) => {
            let mut d = Array2::<f64>::zeros(logits.dim());
            d.column_mut(c).fill(1.0);
            d
        }
    }
}

struct ParamAccess;

impl ParamAccess {
    fn get(graph: &mut ModelGraph, name: &str, idx: usize) -> f64 {
        let mut out = f64::NAN;
        graph.for_each_param(&mut |p: ops::ParamView| {
            if p.name == name {
                out = p.value[idx];
            }
        });
        out
    }

    fn set(graph: &mut ModelGraph, name: &str, idx: usize, v: f64) {
        graph.for_each_param(&mut |p: ops::ParamView| {
            if p.name == name {
                p.value[idx] = v;
            }
        });
    }
}

/// Compares numeric slopes against a caller-supplied analytic gradient.
/// Split out so a deliberately corrupted gradient can be fed through the
/// same comparator.
#[allow(clippy::too_many_arguments)]
pub(crate) fn check_with_snapshot(
    graph: &mut ModelGraph,
    x: &Array2<f64>,
    labels: &[u8],
    objective: Objective,
    param_grads: &HashMap<String, Vec<f64>>,
    input_grad: &Array2<f64>,
    n_param_coords: usize,
    n_input_coords: usize,
    tolerance: f64,
    seed: u64,
) -> GradCheckReport {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        tolerance,
        max_rel_error: 0.0,
        worst: None,
        per_group: BTreeMap::new(),
        checked: 0,
    };

    let mut names: Vec<(String, usize)> = Vec::new();
    graph.for_each_param(&mut |p: ops::ParamView| names.push((p.name.clone(), p.value.len())));
    let total: usize = names.iter().map(|(_, l)| l).sum();

    let record = |report: &mut GradCheckReport, group: &str, coord: usize, err: f64| {
        let slot = report.per_group.entry(group.to_string()).or_insert(0.0);
        if err > *slot {
            *slot = err;
        }
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((group.to_string(), coord));
        }
        report.checked += 1;
    };

    for _ in 0..n_param_coords {
        let mut flat = rng.gen_range(0..total);
        let (name, idx) = {
            let mut found = None;
            for (n, l) in &names {
                if flat < *l {
                    found = Some((n.clone(), flat));
                    break;
                }
                flat -= l;
            }
            found.unwrap()
        };
        let base = ParamAccess::get(graph, &name, idx);
        ParamAccess::set(graph, &name, idx, base + H);
        let up = objective_value(graph, x, labels, objective);
        ParamAccess::set(graph, &name, idx, base - H);
        let down = objective_value(graph, x, labels, objective);
        ParamAccess::set(graph, &name, idx, base);
        let numeric = (up - down) / (2.0 * H);
        let analytic = param_grads[&name][idx];
        record(&mut report, &name, idx, rel_error(analytic, numeric));
    }

    let mut xp = x.clone();
    let d = x.len();
    for _ in 0..n_input_coords.min(d) {
        let flat = rng.gen_range(0..d);
        let (r, c) = (flat / x.ncols(), flat % x.ncols());
        let base = xp[[r, c]];
        xp[[r, c]] = base + H;
        let up = objective_value(graph, &xp, labels, objective);
        xp[[r, c]] = base - H;
        let down = objective_value(graph, &xp, labels, objective);
        xp[[r, c]] = base;
        let numeric = (up - down) / (2.0 * H);
        record(&mut report, "input", flat, rel_error(input_grad[[r, c]], numeric));
    }

    report
}

fn snapshot_grads(graph: &mut ModelGraph) -> HashMap<String, Vec<f64>> {
    let mut out = HashMap::new();
    graph.for_each_param(&mut |p: ops::ParamView| {
        out.insert(p.name.clone(), p.grad.to_vec());
    });
    out
}

pub fn gradient_check_objective(
    graph: &mut ModelGraph,
    x: &Array2<f64>,
    labels: &[u8],
    objective: Objective,
    coords: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if x.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "batch rows {} != labels {}",
            x.nrows(),
            labels.len()
        )));
    }
    if x.ncols() != graph.config().input_length {
        return Err(Error::Shape(format!(
            "trace length {} != model input_length {}",
            x.ncols(),
            graph.config().input_length
        )));
    }
    if coords == 0 {
        return Err(Error::Config("coords must be >= 1".into()));
    }
    let logits = graph.forward(x, Mode::Eval, None);
    let dlogits = objective_dlogits(&logits, labels, objective);
    graph.zero_grads();
    let gx = graph.backward_from_logits(&dlogits);
    let grads = snapshot_grads(graph);
    Ok(check_with_snapshot(
        graph,
        x,
        labels,
        objective,
        &grads,
        &gx,
        coords,
        coords / 2,
        tolerance,
        seed,
    ))
}

/// Runs both objectives and merges the worst case of each group.
pub fn gradient_check(
    graph: &mut ModelGraph,
    x: &Array2<f64>,
    labels: &[u8],
    coords: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut report =
        gradient_check_objective(graph, x, labels, Objective::Loss, coords, tolerance, seed)?;
    let c = labels.first().map(|&l| l as usize).unwrap_or(0);
    let second = gradient_check_objective(
        graph,
        x,
        labels,
        Objective::ClassScore(c),
        coords,
        tolerance,
        seed.wrapping_add(1),
    )?;
    report.absorb(second);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::{build_attention_network, CbamConfig, NetworkConfig};
    use crate::testutil::rand_array;

    #[test]
    fn linear_head_gradients_match_numerically() {
        let cfg = NetworkConfig {
            input_length: 5,
            n3: 0,
            n1: 0,
            cbam: CbamConfig { enabled: false, ..CbamConfig::default() },
            ..NetworkConfig::default()
        };
        let mut graph = build_attention_network(&cfg, 11).unwrap();
        let mut r = ChaCha12Rng::seed_from_u64(0);
        let x: Array2<f64> = rand_array(&[3, 5], &mut r).into_dimensionality().unwrap();
        let labels = [4u8, 90, 201];
        let report = gradient_check(&mut graph, &x, &labels, 250, 1e-4, 99).unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
        assert!(report.checked >= 500);
        assert!(report.per_group.contains_key("head.w"));
        assert!(report.per_group.contains_key("input"));
    }

    #[test]
    fn attention_block_gradients_pass_at_loose_tolerance() {
        let cfg = NetworkConfig {
            input_length: 16,
            n3: 1,
            filters_per_block: vec![4],
            conv_kernel: 3,
            cbam: CbamConfig { reduction_ratio: 2, spatial_kernel: 3, ..CbamConfig::default() },
            fc_hidden_units: 6,
            ..NetworkConfig::default()
        };
        let mut graph = build_attention_network(&cfg, 13).unwrap();
        let mut r = ChaCha12Rng::seed_from_u64(1);
        let x: Array2<f64> = rand_array(&[3, 16], &mut r).into_dimensionality().unwrap();
        let labels = [0u8, 128, 255];
        let report = gradient_check(&mut graph, &x, &labels, 300, 1e-4, 7).unwrap();
        assert!(report.passed(), "worst {:?} err {}", report.worst, report.max_rel_error);
    }

    #[test]
    fn corrupted_analytic_gradient_is_caught() {
        let cfg = NetworkConfig {
            input_length: 5,
            n3: 0,
            n1: 0,
            cbam: CbamConfig { enabled: false, ..CbamConfig::default() },
            ..NetworkConfig::default()
        };
        let mut graph = build_attention_network(&cfg, 17).unwrap();
        let mut r = ChaCha12Rng::seed_from_u64(2);
        let x: Array2<f64> = rand_array(&[2, 5], &mut r).into_dimensionality().unwrap();
        let labels = [1u8, 2];

        let logits = graph.forward(&x, crate::netspec::Mode::Eval, None);
        let dlogits = objective_dlogits(&logits, &labels, Objective::Loss);
        graph.zero_grads();
        let gx = graph.backward_from_logits(&dlogits);
        let mut grads = snapshot_grads(&mut graph);
        for v in grads.values_mut() {
            for g in v.iter_mut() {
                *g = *g * 2.0 + 0.05;
            }
        }
        let report = check_with_snapshot(
            &mut graph,
            &x,
            &labels,
            Objective::Loss,
            &grads,
            &gx,
            200,
            0,
            1e-4,
            3,
        );
        assert!(!report.passed());
        assert!(report.max_rel_error > 0.1);
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let cfg = NetworkConfig {
            input_length: 5,
            n3: 0,
            n1: 0,
            cbam: CbamConfig { enabled: false, ..CbamConfig::default() },
            ..NetworkConfig::default()
        };
        let mut graph = build_attention_network(&cfg, 0).unwrap();
        let x = Array2::<f64>::zeros((2, 5));
        assert!(gradient_check(&mut graph, &x, &[1u8], 10, 1e-6, 0).is_err());
        let bad = Array2::<f64>::zeros((2, 4));
        assert!(gradient_check(&mut graph, &bad, &[1u8, 2], 10, 1e-6, 0).is_err());
        assert!(gradient_check(&mut graph, &x, &[1u8, 2], 0, 1e-6, 0).is_err());
    }
}
