//! The search → retrain → evaluate pipeline and its on-disk artifacts.
//!
//! Every phase is a pure function of its configuration and seed: the same
//! inputs produce byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::Genotype;
use crate::data::{generate, ingest, split, Dataset, DatasetSpec, ManipStyle, Sample};
use crate::error::{config_err, Error, Result};
use crate::metrics::{accuracy, auc, to_csv, Confusion, EpochMetrics, MetricsReport};
use crate::network::{load_checkpoint, loss_overall, save_checkpoint, Detector, NetworkConfig};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::{Forward, Mode, ParamStore};
use crate::schedule::ScheduleSpec;
use crate::search::{scores_and_predictions, search, train_step, AlphaData, EpochAccumulator, SearchConfig, SearchOutcome};

/// Where samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic { spec: DatasetSpec },
    /// PPM images with landmark sidecars, resized to `image_size`.
    Directory { path: PathBuf, image_size: [usize; 2] },
}

impl DataSource {
    pub fn load(&self) -> Result<Vec<Sample>> {
        match self {
            Self::Synthetic { spec } => generate(spec),
            Self::Directory { path, image_size } => ingest(path, *image_size),
        }
    }

    pub fn image_size(&self) -> [usize; 2] {
        match self {
            Self::Synthetic { spec } => spec.image_size,
            Self::Directory { image_size, .. } => *image_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    #[serde(default)]
    pub split_seed: u64,
}

/// The three splits of an experiment.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl DataConfig {
    pub fn load(&self) -> Result<Splits> {
        let samples = self.source.load()?;
        let [train, val, test] = split(&samples, self.split, self.split_seed)?;
        Ok(Splits {
            train: Dataset::new(train),
            val: Dataset::new(val),
            test: Dataset::new(test),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrainConfig {
    pub network: NetworkConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleSpec,
}

impl RetrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return config_err("retrain needs epochs and batch_size >= 1");
        }
        self.network.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives initialisation and batch order; the data keeps its own seed.
    pub seed: u64,
    pub data: DataConfig,
    pub search: SearchConfig,
    pub retrain: RetrainConfig,
}

/// Weight decay of the reference training protocol.
const WEIGHT_DECAY: f64 = 5e-4;

impl ExperimentConfig {
    /// Small enough to run end to end on one CPU core in minutes.
    pub fn desk() -> Self {
        let network = NetworkConfig {
            stack_n: 1,
            num_d2_blocks: 2,
            stem_channels: 8,
            stem_stride: 2,
            input_size: [32, 32],
            num_classes: 2,
            lambda_mask: 0.0,
        };
        let epochs = 30;
        Self {
            seed: 0,
            data: DataConfig {
                source: DataSource::Synthetic {
                    spec: DatasetSpec::new(600, ManipStyle::FullFace, 0),
                },
                split: [4.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0],
                split_seed: 0,
            },
            search: SearchConfig {
                epochs,
                batch_size: 32,
                blocks: 4,
                network,
                w_optimizer: OptimizerConfig::sgd(0.9, WEIGHT_DECAY),
                w_schedule: ScheduleSpec::Cosine {
                    base_lr: 0.1,
                    total_epochs: epochs,
                },
                alpha_optimizer: OptimizerConfig::adam(WEIGHT_DECAY),
                alpha_schedule: ScheduleSpec::StepDecay {
                    base_lr: 0.02,
                    milestones: vec![60, 150],
                    factor: 0.1,
                },
                alpha_data: AlphaData::ValidationSplit,
            },
            retrain: RetrainConfig {
                network: NetworkConfig {
                    stack_n: 1,
                    num_d2_blocks: 3,
                    stem_channels: 8,
                    stem_stride: 2,
                    input_size: [32, 32],
                    num_classes: 2,
                    lambda_mask: 1.0,
                },
                epochs: 15,
                batch_size: 32,
                optimizer: OptimizerConfig::adam(WEIGHT_DECAY),
                schedule: ScheduleSpec::Cosine {
                    base_lr: 0.01,
                    total_epochs: 15,
                },
            },
        }
    }

    /// The published training protocol: 256×256 inputs, 300-epoch search
    /// and retraining with the reported optimisers and schedules.
    pub fn paper_scale() -> Self {
        let network = NetworkConfig {
            stack_n: 1,
            num_d2_blocks: 3,
            stem_channels: 16,
            stem_stride: 1,
            input_size: [256, 256],
            num_classes: 2,
            lambda_mask: 0.0,
        };
        Self {
            seed: 0,
            data: DataConfig {
                source: DataSource::Synthetic {
                    spec: DatasetSpec {
                        image_size: [256, 256],
                        ..DatasetSpec::new(1000, ManipStyle::FullFace, 0)
                    },
                },
                split: [0.72, 0.14, 0.14],
                split_seed: 0,
            },
            search: SearchConfig {
                epochs: 300,
                batch_size: 8,
                blocks: 4,
                network: network.clone(),
                w_optimizer: OptimizerConfig::sgd(0.9, WEIGHT_DECAY),
                w_schedule: ScheduleSpec::Cosine {
                    base_lr: 0.1,
                    total_epochs: 300,
                },
                alpha_optimizer: OptimizerConfig::adam(WEIGHT_DECAY),
                alpha_schedule: ScheduleSpec::StepDecay {
                    base_lr: 0.02,
                    milestones: vec![60, 150],
                    factor: 0.1,
                },
                alpha_data: AlphaData::TrainHalves,
            },
            retrain: RetrainConfig {
                network: NetworkConfig {
                    lambda_mask: 1.0,
                    ..network
                },
                epochs: 300,
                batch_size: 96,
                optimizer: OptimizerConfig::adam(WEIGHT_DECAY),
                schedule: ScheduleSpec::StepDecay {
                    base_lr: 0.5,
                    milestones: vec![80, 140],
                    factor: 0.1,
                },
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let size = self.data.source.image_size();
        for (phase, net) in [("search", &self.search.network), ("retrain", &self.retrain.network)] {
            if net.input_size != size {
                return config_err(format!(
                    "{phase} network expects {:?} inputs but the data is {size:?}",
                    net.input_size
                ));
            }
        }
        self.search.validate()?;
        self.retrain.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

/// Evaluation of a detector on a whole dataset.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss_ce: f64,
    pub loss_mse: f64,
    pub acc: f64,
    pub auc: Option<f64>,
    pub confusion: Confusion,
    pub scores: Vec<f64>,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    pub fn row(&self, epoch: usize, split: &str) -> EpochMetrics {
        EpochMetrics {
            epoch,
            split: split.to_string(),
            loss_ce: self.loss_ce,
            loss_mse: self.loss_mse,
            acc: self.acc,
            auc: self.auc,
        }
    }

    pub fn report(&self, history: Vec<EpochMetrics>) -> MetricsReport {
        MetricsReport {
            acc: self.acc,
            auc: self.auc,
            loss_ce: self.loss_ce,
            loss_mse: self.loss_mse,
            confusion: self.confusion,
            history,
        }
    }
}

/// Eval-mode forward over `data` in fixed order.
pub fn evaluate(detector: &Detector, store: &mut ParamStore, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return config_err("cannot evaluate on an empty dataset");
    }
    let lambda = detector.config.lambda_mask;
    let (mut ce, mut mse) = (0.0, 0.0);
    let mut scores = Vec::with_capacity(data.len());
    let mut predictions = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        let mut fw = Forward::new(store, Mode::Eval, false, false);
        let x = fw.input(batch.images.clone());
        let gt = fw.input(batch.masks.clone());
        let out = detector.forward(&mut fw, x)?;
        let losses = loss_overall(&mut fw, &out, &batch.labels, gt, lambda)?;
        let n = chunk.len() as f64;
        ce += fw.graph.value(losses.ce).data()[0] as f64 * n;
        mse += fw.graph.value(losses.mse).data()[0] as f64 * n;
        let (s, p) = scores_and_predictions(fw.graph.value(out.logits));
        scores.extend(s);
        predictions.extend(p);
    }
    let labels = data.labels();
    let n = data.len() as f64;
    Ok(Evaluation {
        loss_ce: ce / n,
        loss_mse: mse / n,
        acc: accuracy(&predictions, &labels),
        auc: auc(&scores, &labels).ok(),
        confusion: Confusion::from_predictions(&predictions, &labels),
        scores,
        predictions,
    })
}

pub struct RetrainOutcome {
    pub detector: Detector,
    pub store: ParamStore,
    /// Per epoch: a `train` row and a `val` row.
    pub history: Vec<EpochMetrics>,
}

/// Trains a fresh detector built from `genotype` with the combined loss.
pub fn retrain(genotype: &Genotype, train: &Dataset, val: &Dataset, config: &RetrainConfig, seed: u64) -> Result<RetrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return config_err("retrain needs a non-empty training set");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let detector = Detector::assemble(genotype, &config.network, &mut store, &mut rng)?;
    let mut opt = Optimizer::new(config.optimizer.clone())?;
    let lambda = config.network.lambda_mask;
    let mut history = Vec::new();
    for epoch in 0..config.epochs {
        let lr = config.schedule.lr_at(epoch)?;
        let mut acc = EpochAccumulator::default();
        for (k, idx) in train.epoch_batches(config.batch_size, &mut rng).iter().enumerate() {
            let batch = train.batch(idx)?;
            let ctx = format!("retrain epoch {epoch}, batch {k}");
            let r = train_step(&detector, &mut store, &batch, lambda, &mut opt, lr, false, &ctx)?;
            acc.add(r, &batch.labels);
        }
        let train_row = acc.finish(epoch, "train");
        let line = format!("retrain epoch {epoch}: train ce {:.4} acc {:.3}", train_row.loss_ce, train_row.acc);
        history.push(train_row);
        if val.is_empty() {
            log::info!("{line}");
        } else {
            let e = evaluate(&detector, &mut store, val, config.batch_size)?;
            log::info!("{line} | val ce {:.4} acc {:.3}", e.loss_ce, e.acc);
            history.push(e.row(epoch, "val"));
        }
    }
    Ok(RetrainOutcome { detector, store, history })
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

/// Search phase: writes `genotype.json`, `cell.dot`, `alpha_history.csv` and `metrics.csv`.
pub fn run_search(config: &ExperimentConfig, out: &Path) -> Result<SearchOutcome> {
    config.validate()?;
    let splits = config.data.load()?;
    let outcome = search(&splits.train, &splits.val, &config.search, config.seed)?;
    prepare_out(out)?;
    write(out, "genotype.json", &outcome.genotype.to_json())?;
    write(out, "cell.dot", &outcome.genotype.to_dot())?;
    write(out, "alpha_history.csv", &outcome.history.alpha_csv(config.search.blocks))?;
    write(out, "metrics.csv", &to_csv(&outcome.history.metrics))?;
    Ok(outcome)
}

/// Retrain phase: writes `checkpoint.addc`, `metrics.csv` and `report.json`
/// (the report scores the test split).
pub fn run_retrain(config: &ExperimentConfig, genotype: &Genotype, out: &Path) -> Result<MetricsReport> {
    config.validate()?;
    if genotype.blocks != config.search.blocks {
        return config_err(format!(
            "genotype has {} blocks per cell, the config expects {}",
            genotype.blocks, config.search.blocks
        ));
    }
    let splits = config.data.load()?;
    let mut outcome = retrain(genotype, &splits.train, &splits.val, &config.retrain, config.seed)?;
    let test = evaluate(&outcome.detector, &mut outcome.store, &splits.test, config.retrain.batch_size)?;
    let mut rows = outcome.history.clone();
    rows.push(test.row(config.retrain.epochs.saturating_sub(1), "test"));
    let report = test.report(outcome.history);
    prepare_out(out)?;
    save_checkpoint(&out.join("checkpoint.addc"), &outcome.detector, &outcome.store)?;
    write(out, "metrics.csv", &to_csv(&rows))?;
    write(out, "report.json", &report_json(&report))?;
    Ok(report)
}

/// Eval phase: scores a checkpoint on every sample of `data` (a data source
/// JSON, a dataset spec JSON or a PPM directory); writes `metrics.csv` and
/// `report.json`.
pub fn run_eval(checkpoint: &Path, data: &Path, out: &Path) -> Result<MetricsReport> {
    let (detector, mut store) = load_checkpoint(checkpoint)?;
    let source = data_source_from_path(data, detector.config.input_size)?;
    if source.image_size() != detector.config.input_size {
        return config_err(format!(
            "checkpoint expects {:?} inputs but the data is {:?}",
            detector.config.input_size,
            source.image_size()
        ));
    }
    let dataset = Dataset::new(source.load()?);
    let e = evaluate(&detector, &mut store, &dataset, 64)?;
    let report = e.report(Vec::new());
    prepare_out(out)?;
    write(out, "metrics.csv", &to_csv(&[e.row(0, "eval")]))?;
    write(out, "report.json", &report_json(&report))?;
    Ok(report)
}

fn report_json(report: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serialises");
    s.push('\n');
    s
}

/// Loads a dataset description for `eval`: a [`DataSource`] JSON file, or a
/// directory of PPM images read at `image_size`.
pub fn data_source_from_path(path: &Path, image_size: [usize; 2]) -> Result<DataSource> {
    if path.is_dir() {
        return Ok(DataSource::Directory {
            path: path.to_path_buf(),
            image_size,
        });
    }
    let text = fs::read_to_string(path)?;
    if let Ok(source) = serde_json::from_str::<DataSource>(&text) {
        return Ok(source);
    }
    serde_json::from_str::<DatasetSpec>(&text)
        .map(|spec| DataSource::Synthetic { spec })
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("neither a data source nor a dataset spec: {e}"),
        })
}
