//! Training and evaluation of model graphs, plus gradient verification and
//! checkpointing.

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod optim;

use crate::netspec::{Mode, ModelGraph};
use crate::{Error, Result};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Fraction of the profiling set held out for per-epoch validation.
    pub validation_fraction: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 10,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            validation_fraction: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(f) = self.validation_fraction {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Config(format!(
                    "validation_fraction {f} not in [0, 1)"
                )));
            }
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        learning_rate: f64,
    },
    Adam {
        learning_rate: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        /// Global gradient-norm clip applied before the update when set.
        #[serde(default)]
        clip_norm: Option<f64>,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            learning_rate: 1e-4,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            clip_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = match self {
            OptimizerConfig::Sgd { learning_rate } => *learning_rate,
            OptimizerConfig::Adam { learning_rate, beta1, beta2, epsilon, clip_norm } => {
                for (name, v) in [("beta1", *beta1), ("beta2", *beta2)] {
                    if !(0.0..1.0).contains(&v) {
                        return Err(Error::Config(format!("{name} {v} not in [0, 1)")));
                    }
                }
                if *epsilon <= 0.0 {
                    return Err(Error::Config("epsilon must be > 0".into()));
                }
                if let Some(c) = clip_norm {
                    if !(*c > 0.0) {
                        return Err(Error::Config(format!("clip_norm {c} must be > 0")));
                    }
                }
                *learning_rate
            }
        };
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning_rate {lr} must be finite and >= 0")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub preset: Option<String>,
    pub seed: u64,
    pub dataset_hash: Option<String>,
    pub tool_version: String,
    /// Leakage model the checkpoint was trained against, so downstream
    /// evaluation does not need it respecified.
    #[serde(default)]
    pub leakage: Option<crate::traces::LeakageModel>,
}

pub struct TrainedModel {
    pub graph: ModelGraph,
    pub history: Vec<EpochStats>,
    pub provenance: Provenance,
}

/// Minibatch gradient descent on the categorical cross-entropy. Shuffling,
/// dropout and the optimizer all derive from `cfg.seed`, so a rerun with the
/// same inputs is bit-identical.
pub fn train(
    mut graph: ModelGraph,
    samples: &Array2<f64>,
    labels: &[u8],
    cfg: &TrainingConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let n = samples.nrows();
    if n == 0 {
        return Err(Error::Shape("training set is empty".into()));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "samples rows {n} != labels {}",
            labels.len()
        )));
    }
    if samples.ncols() != graph.config().input_length {
        return Err(Error::Shape(format!(
            "trace length {} != model input_length {}",
            samples.ncols(),
            graph.config().input_length
        )));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut indices: Vec<usize> = (0..n).collect();

    // Optional held-out slice, carved off once before the first epoch.
    let n_val = cfg
        .validation_fraction
        .map(|f| (n as f64 * f).floor() as usize)
        .unwrap_or(0);
    let (val_idx, train_idx): (Vec<usize>, Vec<usize>) = if n_val > 0 {
        indices.shuffle(&mut rng);
        (indices[..n_val].to_vec(), indices[n_val..].to_vec())
    } else {
        (Vec::new(), indices)
    };
    let mut order = train_idx;
    if order.is_empty() {
        return Err(Error::Config("validation_fraction leaves no training data".into()));
    }

    let mut optimizer = optim::Optimizer::new(&cfg.optimizer);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = gather(samples, labels, chunk);
            let logits = graph.forward(&x, Mode::Train, Some(&mut rng));
            let (loss, probs) = ops::softmax_cross_entropy(&logits, &y);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: batch_no });
            }
            loss_sum += loss * chunk.len() as f64;
            correct += count_correct(&probs, &y);
            seen += chunk.len();

            let dlogits = ops::cross_entropy_grad(&probs, &y);
            graph.zero_grads();
            graph.backward_from_logits(&dlogits);
            optimizer.step(&mut graph);
        }

        let (val_loss, val_accuracy) = if val_idx.is_empty() {
            (None, None)
        } else {
            let (vx, vy) = gather(samples, labels, &val_idx);
            let logits = graph.forward(&vx, Mode::Eval, None);
            let (l, p) = ops::softmax_cross_entropy(&logits, &vy);
            (Some(l), Some(count_correct(&p, &vy) as f64 / vy.len() as f64))
        };

        history.push(EpochStats {
            epoch,
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
            val_loss,
            val_accuracy,
        });
    }

    Ok(TrainedModel {
        graph,
        history,
        provenance: Provenance {
            preset: None,
            seed: cfg.seed,
            dataset_hash: None,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            leakage: None,
        },
    })
}

fn gather(samples: &Array2<f64>, labels: &[u8], idx: &[usize]) -> (Array2<f64>, Vec<u8>) {
    let d = samples.ncols();
    let mut x = Array2::<f64>::zeros((idx.len(), d));
    let mut y = Vec::with_capacity(idx.len());
    for (row, &i) in idx.iter().enumerate() {
        x.row_mut(row).assign(&samples.row(i));
        y.push(labels[i]);
    }
    (x, y)
}

fn count_correct(probs: &Array2<f64>, labels: &[u8]) -> usize {
    probs
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (i, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            best == label as usize
        })
        .count()
}

/// Class probabilities for each trace row, evaluated in inference mode.
pub fn predict_proba(model: &mut TrainedModel, samples: &Array2<f64>) -> Result<Array2<f64>> {
    predict_proba_graph(&mut model.graph, samples)
}

pub fn predict_proba_graph(graph: &mut ModelGraph, samples: &Array2<f64>) -> Result<Array2<f64>> {
    if samples.ncols() != graph.config().input_length {
        return Err(Error::Shape(format!(
            "trace length {} != model input_length {}",
            samples.ncols(),
            graph.config().input_length
        )));
    }
    let n = samples.nrows();
    let chunk = 512usize;
    let mut out = Array2::<f64>::zeros((n, graph.config().n_classes));
    let mut row = 0;
    while row < n {
        let end = (row + chunk).min(n);
        let x = samples.slice(ndarray::s![row..end, ..]).to_owned();
        let logits = graph.forward(&x, Mode::Eval, None);
        out.slice_mut(ndarray::s![row..end, ..]).assign(&ops::softmax(&logits));
        row = end;
    }
    Ok(out)
}

/// Writes training history as CSV with the exact header `epoch,loss,accuracy`
/// (plus validation columns when present).
pub fn history_to_csv(history: &[EpochStats]) -> String {
    let has_val = history.iter().any(|e| e.val_loss.is_some());
    let mut s = String::new();
    if has_val {
        s.push_str("epoch,loss,accuracy,val_loss,val_accuracy\n");
    } else {
        s.push_str("epoch,loss,accuracy\n");
    }
    for e in history {
        if has_val {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch,
                e.loss,
                e.accuracy,
                e.val_loss.map(|v| v.to_string()).unwrap_or_default(),
                e.val_accuracy.map(|v| v.to_string()).unwrap_or_default()
            ));
        } else {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.accuracy));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::ops::ParamView;
    use crate::netspec::{build_attention_network, CbamConfig, NetworkConfig};
    use ndarray::Array2;
    use rand::Rng;

    fn headless_cfg(d: usize, n1: usize) -> NetworkConfig {
        NetworkConfig {
            input_length: d,
            n3: 0,
            n1,
            fc_hidden_units: 16,
            cbam: CbamConfig { enabled: false, ..CbamConfig::default() },
            ..NetworkConfig::default()
        }
    }

    /// Two well-separated clusters labeled 0 and 1.
    fn separable(n: usize, d: usize, seed: u64) -> (Array2<f64>, Vec<u8>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut x = Array2::<f64>::zeros((n, d));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % 2) as u8;
            let sign = if class == 0 { 1.0 } else { -1.0 };
            for j in 0..d {
                x[[i, j]] = sign * (1.0 + 0.1 * j as f64) + 0.05 * (rng.gen::<f64>() - 0.5);
            }
            y.push(class);
        }
        (x, y)
    }

    fn params_of(graph: &mut ModelGraph) -> Vec<f64> {
        let mut out = Vec::new();
        graph.for_each_param(&mut |p: ParamView| out.extend_from_slice(p.value));
        out
    }

    #[test]
    fn separable_toy_problem_is_learned_quickly() {
        let (x, y) = separable(64, 8, 0);
        let graph = build_attention_network(&headless_cfg(8, 1), 1).unwrap();
        let cfg = TrainingConfig {
            epochs: 30,
            batch_size: 16,
            optimizer: OptimizerConfig::Adam {
                learning_rate: 3e-2,
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
                clip_norm: None,
            },
            seed: 3,
            validation_fraction: None,
        };
        let model = train(graph, &x, &y, &cfg).unwrap();
        let last = model.history.last().unwrap();
        assert!(last.accuracy > 0.95, "final accuracy {}", last.accuracy);
        assert_eq!(model.history.len(), 30);
    }

    #[test]
    fn zero_learning_rate_training_changes_nothing() {
        let (x, y) = separable(16, 6, 1);
        let mut reference = build_attention_network(&headless_cfg(6, 1), 2).unwrap();
        let graph = build_attention_network(&headless_cfg(6, 1), 2).unwrap();
        let cfg = TrainingConfig {
            epochs: 3,
            batch_size: 8,
            optimizer: OptimizerConfig::Sgd { learning_rate: 0.0 },
            seed: 4,
            validation_fraction: None,
        };
        let mut model = train(graph, &x, &y, &cfg).unwrap();
        assert_eq!(params_of(&mut reference), params_of(&mut model.graph));
    }

    #[test]
    fn uniform_logits_give_log_256_loss() {
        let mut graph = build_attention_network(&headless_cfg(5, 0), 3).unwrap();
        graph.for_each_param(&mut |p: ParamView| {
            for v in p.value.iter_mut() {
                *v = 0.0;
            }
        });
        let x = Array2::from_shape_fn((4, 5), |(i, j)| (i + j) as f64);
        let logits = graph.forward(&x, Mode::Eval, None);
        let (loss, probs) = ops::softmax_cross_entropy(&logits, &[0, 85, 170, 255]);
        assert!((loss - 256f64.ln()).abs() < 1e-9, "loss {loss}");
        assert!(probs.iter().all(|&p| (p - 1.0 / 256.0).abs() < 1e-12));
    }

    #[test]
    fn full_batch_descent_decreases_loss_monotonically() {
        let (x, y) = separable(32, 6, 2);
        let graph = build_attention_network(&headless_cfg(6, 1), 5).unwrap();
        let cfg = TrainingConfig {
            epochs: 15,
            batch_size: 32,
            optimizer: OptimizerConfig::Sgd { learning_rate: 1e-3 },
            seed: 6,
            validation_fraction: None,
        };
        let model = train(graph, &x, &y, &cfg).unwrap();
        for w in model.history.windows(2) {
            assert!(
                w[1].loss <= w[0].loss + 1e-9,
                "loss rose from {} to {}",
                w[0].loss,
                w[1].loss
            );
        }
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let with = NetworkConfig {
            dropout_rates: vec![0.5],
            ..headless_cfg(7, 1)
        };
        let mut g_dropout = build_attention_network(&with, 7).unwrap();
        let mut g_plain = build_attention_network(&headless_cfg(7, 1), 7).unwrap();
        let x = Array2::from_shape_fn((3, 7), |(i, j)| (i as f64 - j as f64) * 0.3);
        let a = g_dropout.forward(&x, Mode::Eval, None);
        let b = g_plain.forward(&x, Mode::Eval, None);
        assert_eq!(a, b);
        // And twice in a row is stable.
        let c = g_dropout.forward(&x, Mode::Eval, None);
        assert_eq!(a, c);
    }

    #[test]
    fn zero_epochs_is_a_config_error() {
        let (x, y) = separable(8, 4, 3);
        let graph = build_attention_network(&headless_cfg(4, 0), 8).unwrap();
        let cfg = TrainingConfig { epochs: 0, ..TrainingConfig::default() };
        let err = match train(graph, &x, &y, &cfg) {
            Err(e) => e,
            Ok(_) => panic!("expected an error"),
        };
        assert!(err.to_string().contains("epochs"), "{err}");
        assert!(err.is_usage());
    }

    #[test]
    fn same_seed_reruns_are_bit_identical() {
        let (x, y) = separable(24, 5, 4);
        let cfg = TrainingConfig {
            epochs: 4,
            batch_size: 6,
            seed: 11,
            validation_fraction: Some(0.25),
            ..TrainingConfig::default()
        };
        let run = || {
            let graph = build_attention_network(&headless_cfg(5, 1), 9).unwrap();
            train(graph, &x, &y, &cfg).unwrap()
        };
        let mut a = run();
        let mut b = run();
        assert_eq!(params_of(&mut a.graph), params_of(&mut b.graph));
        for (ea, eb) in a.history.iter().zip(b.history.iter()) {
            assert_eq!(ea.loss.to_bits(), eb.loss.to_bits());
            assert_eq!(ea.val_loss.map(f64::to_bits), eb.val_loss.map(f64::to_bits));
        }
        assert!(a.history.iter().all(|e| e.val_loss.is_some()));
    }

    #[test]
    fn runaway_learning_rate_reports_divergence() {
        let (x, y) = separable(16, 4, 5);
        let graph = build_attention_network(&headless_cfg(4, 1), 10).unwrap();
        let cfg = TrainingConfig {
            epochs: 5,
            batch_size: 16,
            optimizer: OptimizerConfig::Sgd { learning_rate: 1e18 },
            seed: 12,
            validation_fraction: None,
        };
        match train(graph, &x, &y, &cfg) {
            Err(Error::Diverged { .. }) => {}
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("expected divergence"),
        }
    }

    #[test]
    fn predict_proba_normalizes_and_validates_width() {
        let (x, _) = separable(700, 4, 6);
        let mut graph = build_attention_network(&headless_cfg(4, 0), 11).unwrap();
        let probs = predict_proba_graph(&mut graph, &x).unwrap();
        assert_eq!(probs.dim(), (700, 256));
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        let bad = Array2::<f64>::zeros((3, 5));
        assert!(predict_proba_graph(&mut graph, &bad).is_err());
    }

    #[test]
    fn history_csv_headers_are_stable() {
        let rows = vec![
            EpochStats { epoch: 0, loss: 1.5, accuracy: 0.25, val_loss: None, val_accuracy: None },
            EpochStats { epoch: 1, loss: 1.2, accuracy: 0.5, val_loss: None, val_accuracy: None },
        ];
        let csv = history_to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,loss,accuracy"));
        assert_eq!(lines.clone().count(), 2);
        assert!(lines.next().unwrap().starts_with("0,1.5,"));

        let with_val = vec![EpochStats {
            epoch: 0,
            loss: 2.0,
            accuracy: 0.1,
            val_loss: Some(2.5),
            val_accuracy: Some(0.05),
        }];
        let csv = history_to_csv(&with_val);
        assert!(csv.starts_with("epoch,loss,accuracy,val_loss,val_accuracy\n"));
        assert!(csv.contains("0,2,0.1,2.5,0.05"));
    }
}
