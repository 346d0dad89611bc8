//! Bilevel cell search: alternating `w` and `α` gradient steps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{discretize, softmax_rows, Genotype};
use crate::data::{Batch, Dataset};
use crate::error::{config_err, Error, Result};
use crate::metrics::{accuracy, auc, EpochMetrics};
use crate::network::{loss_overall, Detector, NetworkConfig};
use crate::ops::OpKind;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::{Forward, Mode, ParamStore};
use crate::schedule::ScheduleSpec;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Blocks per cell.
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    /// Layout of the supernet.
    pub network: NetworkConfig,
    pub w_optimizer: OptimizerConfig,
    pub w_schedule: ScheduleSpec,
    pub alpha_optimizer: OptimizerConfig,
    pub alpha_schedule: ScheduleSpec,
    /// Which data drives the `α` steps.
    #[serde(default)]
    pub alpha_data: AlphaData,
}

fn default_blocks() -> usize {
    4
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaData {
    /// Split the training set in two halves: `w` on one, `α` on the other.
    #[default]
    TrainHalves,
    /// `w` on the training split, `α` on the validation split.
    ValidationSplit,
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.blocks == 0 {
            return config_err("search needs epochs, batch_size and blocks >= 1");
        }
        self.network.validate()?;
        self.w_optimizer.validate()?;
        self.alpha_optimizer.validate()?;
        self.w_schedule.validate()?;
        self.alpha_schedule.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Weights,
    Arch,
}

/// What happened during a search.
#[derive(Clone, Debug, Default)]
pub struct SearchHistory {
    /// Per epoch: one `train` row (w steps) and one `val` row (α steps).
    pub metrics: Vec<EpochMetrics>,
    pub w_steps: u64,
    pub alpha_steps: u64,
    /// Kind of every update in execution order.
    pub step_order: Vec<StepKind>,
    /// Largest `|Σ_op softmax(α) − 1|` seen after any α step.
    pub max_weight_sum_error: f64,
    /// Softmax weights after each epoch: `(epoch, normal, reduce)`, row-major `[edges, 11]`.
    pub alpha_weights: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl SearchHistory {
    /// `epoch,cell,block,input,op,weight` rows.
    pub fn alpha_csv(&self, blocks: usize) -> String {
        let mut s = String::from("epoch,cell,block,input,op,weight\n");
        for (epoch, normal, reduce) in &self.alpha_weights {
            for (cell, table) in [("normal", normal), ("reduce", reduce)] {
                let mut row = 0;
                for b in 0..blocks {
                    for h in 0..b + 2 {
                        for op in OpKind::ALL {
                            let w = table[row * OpKind::COUNT + op.index()];
                            s.push_str(&format!("{epoch},{cell},{b},{h},{op},{w:.6}\n"));
                        }
                        row += 1;
                    }
                }
            }
        }
        s
    }
}

pub struct SearchOutcome {
    pub detector: Detector,
    pub store: ParamStore,
    pub genotype: Genotype,
    pub history: SearchHistory,
}

/// Losses and predictions of one step.
pub(crate) struct StepResult {
    pub ce: f64,
    pub mse: f64,
    pub predictions: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Softmax probability of class 1 and the argmax class per row.
pub(crate) fn scores_and_predictions(logits: &Tensor) -> (Vec<f64>, Vec<usize>) {
    let k = logits.shape()[1];
    let mut scores = Vec::new();
    let mut preds = Vec::new();
    for row in logits.data().chunks(k) {
        let probs = softmax_rows(&row.iter().map(|&v| v as f64).collect::<Vec<_>>(), k);
        scores.push(probs[1]);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        preds.push(best);
    }
    (scores, preds)
}

/// One forward/backward/update on `batch`, differentiating the selected group.
#[allow(clippy::too_many_arguments)]
pub(crate) fn train_step(
    detector: &Detector,
    store: &mut ParamStore,
    batch: &Batch,
    lambda_mask: f64,
    opt: &mut Optimizer,
    lr: f64,
    update_arch: bool,
    context: &str,
) -> Result<StepResult> {
    let wrap = |e: Error| match e {
        Error::NonFinite { context: c } => Error::NonFinite {
            context: format!("{context}: {c}"),
        },
        other => other,
    };
    let mut fw = Forward::new(store, Mode::Train, !update_arch, update_arch);
    let x = fw.input(batch.images.clone());
    let gt = fw.input(batch.masks.clone());
    let out = detector.forward(&mut fw, x).map_err(wrap)?;
    let losses = loss_overall(&mut fw, &out, &batch.labels, gt, lambda_mask).map_err(wrap)?;
    let ce = fw.graph.value(losses.ce).data()[0] as f64;
    let mse = fw.graph.value(losses.mse).data()[0] as f64;
    if !ce.is_finite() || !mse.is_finite() {
        return Err(Error::NonFinite {
            context: format!("{context}: loss"),
        });
    }
    let (scores, predictions) = scores_and_predictions(fw.graph.value(out.logits));
    let grads = fw.backward(losses.total).map_err(wrap)?;
    opt.step(store, &grads, lr)?;
    Ok(StepResult {
        ce,
        mse,
        predictions,
        scores,
    })
}

/// Running averages over the steps of one epoch.
#[derive(Default)]
pub(crate) struct EpochAccumulator {
    ce: f64,
    mse: f64,
    weight: f64,
    predictions: Vec<usize>,
    scores: Vec<f64>,
    labels: Vec<usize>,
}

impl EpochAccumulator {
    pub fn add(&mut self, r: StepResult, labels: &[usize]) {
        let n = labels.len() as f64;
        self.ce += r.ce * n;
        self.mse += r.mse * n;
        self.weight += n;
        self.predictions.extend(r.predictions);
        self.scores.extend(r.scores);
        self.labels.extend_from_slice(labels);
    }

    pub fn finish(self, epoch: usize, split: &str) -> EpochMetrics {
        let w = self.weight.max(1.0);
        EpochMetrics {
            epoch,
            split: split.to_string(),
            loss_ce: self.ce / w,
            loss_mse: self.mse / w,
            acc: accuracy(&self.predictions, &self.labels),
            auc: auc(&self.scores, &self.labels).ok(),
        }
    }
}

fn weight_sum_error(store: &ParamStore, detector: &Detector) -> Result<f64> {
    let Some(arch) = &detector.arch else { return Ok(0.0) };
    let mut g = Graph::<f32>::new();
    let mut worst = 0.0f64;
    for id in [arch.normal, arch.reduce] {
        let v = g.constant(store.value(id).clone());
        let s = g.softmax(v, 1)?;
        for row in g.value(s).data().chunks(OpKind::COUNT) {
            let total: f64 = row.iter().map(|&p| p as f64).sum();
            worst = worst.max((total - 1.0).abs());
        }
    }
    Ok(worst)
}

/// Splits `samples` into two halves by alternating index within each class.
fn halves(train: &Dataset) -> (Dataset, Dataset) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut seen = [0usize; 2];
    for s in &train.samples {
        let slot = &mut seen[s.label.min(1)];
        if *slot % 2 == 0 {
            a.push(s.clone());
        } else {
            b.push(s.clone());
        }
        *slot += 1;
    }
    (Dataset::new(a), Dataset::new(b))
}

/// Runs the alternating search and discretises the final `α`.
///
/// Every iteration takes one `w` step on the next training batch and then one
/// `α` step on the next validation batch, cycling through validation batches.
pub fn search(train: &Dataset, val: &Dataset, config: &SearchConfig, seed: u64) -> Result<SearchOutcome> {
    config.validate()?;
    let (w_set, a_set) = match config.alpha_data {
        AlphaData::TrainHalves => halves(train),
        AlphaData::ValidationSplit => (train.clone(), val.clone()),
    };
    if w_set.is_empty() || a_set.is_empty() {
        return config_err("search needs non-empty training and validation data");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let detector = Detector::supernet(&config.network, config.blocks, &mut store, &mut rng)?;
    let arch = detector.arch.clone().expect("supernet has α");
    let mut w_opt = Optimizer::new(config.w_optimizer.clone())?;
    let mut a_opt = Optimizer::new(config.alpha_optimizer.clone())?;
    let lambda = config.network.lambda_mask;
    let mut history = SearchHistory::default();
    let mut iteration = 0u64;
    for epoch in 0..config.epochs {
        let lr_w = config.w_schedule.lr_at(epoch)?;
        let lr_a = config.alpha_schedule.lr_at(epoch)?;
        let w_batches = w_set.epoch_batches(config.batch_size, &mut rng);
        let a_batches = a_set.epoch_batches(config.batch_size, &mut rng);
        let mut w_acc = EpochAccumulator::default();
        let mut a_acc = EpochAccumulator::default();
        for (k, idx) in w_batches.iter().enumerate() {
            let batch = w_set.batch(idx)?;
            let ctx = format!("search iteration {iteration} (epoch {epoch}, w step)");
            let r = train_step(&detector, &mut store, &batch, lambda, &mut w_opt, lr_w, false, &ctx)?;
            w_acc.add(r, &batch.labels);
            history.w_steps += 1;
            history.step_order.push(StepKind::Weights);

            let batch = a_set.batch(&a_batches[k % a_batches.len()])?;
            let ctx = format!("search iteration {iteration} (epoch {epoch}, α step)");
            let r = train_step(&detector, &mut store, &batch, lambda, &mut a_opt, lr_a, true, &ctx)?;
            a_acc.add(r, &batch.labels);
            history.alpha_steps += 1;
            history.step_order.push(StepKind::Arch);
            history.max_weight_sum_error = history.max_weight_sum_error.max(weight_sum_error(&store, &detector)?);
            iteration += 1;
        }
        let train_row = w_acc.finish(epoch, "train");
        let val_row = a_acc.finish(epoch, "val");
        log::info!(
            "search epoch {epoch}: train ce {:.4} acc {:.3} | val ce {:.4} acc {:.3}",
            train_row.loss_ce,
            train_row.acc,
            val_row.loss_ce,
            val_row.acc
        );
        history.metrics.push(train_row);
        history.metrics.push(val_row);
        let table = |id| softmax_rows(&store.value(id).to_f64_vec(), OpKind::COUNT);
        history.alpha_weights.push((epoch, table(arch.normal), table(arch.reduce)));
    }
    let genotype = discretize(&store, &arch)?;
    Ok(SearchOutcome {
        detector,
        store,
        genotype,
        history,
    })
}
