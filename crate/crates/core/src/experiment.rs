//! Run configuration, the training loop, evaluation and the ablation grid.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{train_step, AssignmentError, LossWeights, TrainExample};
use crate::composition::{prior_from_cams, CompositionError, FusionMode};
use crate::dataio::{DataError, DatasetRecord, SyntheticScene};
use crate::decoder::{forward, DecoderError, ModelConfig, ModelState};
use crate::geometry::ScoredCrop;
use crate::metrics::{EvalExample, MetricsError, MetricsReport};
use crate::tensor::{AdamW, Optimizer, Sgd};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Assignment(#[from] AssignmentError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Composition(#[from] CompositionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// How the composition prior enters cross-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum McabMode {
    Average,
    Max,
    Off,
}

impl McabMode {
    pub const ALL: [McabMode; 3] = [McabMode::Average, McabMode::Max, McabMode::Off];

    pub fn fusion(self) -> Option<FusionMode> {
        match self {
            McabMode::Average => Some(FusionMode::Average),
            McabMode::Max => Some(FusionMode::Max),
            McabMode::Off => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            McabMode::Average => "average",
            McabMode::Max => "max",
            McabMode::Off => "off",
        }
    }
}

impl std::str::FromStr for McabMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "average" => Ok(McabMode::Average),
            "max" => Ok(McabMode::Max),
            "off" => Ok(McabMode::Off),
            _ => Err(format!("unknown MCAB mode `{s}` (average, max, off)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

/// Step decay: `initial` until `decay_epoch`, then `initial / decay_factor`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_epoch: usize,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.initial / self.decay_factor
        } else {
            self.initial
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// JSON-lines datasets; synthetic data is generated when absent.
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub train_images: usize,
    pub eval_images: usize,
    pub candidates: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub epsilon: f64,
    pub ks: Vec<usize>,
    pub ns: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub lr: LrSchedule,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mcab: McabMode,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Small enough to train on one core in about a minute.
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            loss: LossWeights::default(),
            lr: LrSchedule {
                initial: 2e-3,
                decay_epoch: 15,
                decay_factor: 10.0,
            },
            optimizer: OptimizerKind::Adamw,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 4,
            seed: 0,
            mcab: McabMode::Average,
            data: DataConfig {
                train: None,
                eval: None,
                train_images: 200,
                eval_images: 200,
                candidates: 90,
                train_seed: 1,
                eval_seed: 2,
            },
            eval: EvalConfig {
                epsilon: crate::metrics::DEFAULT_EPSILON,
                ks: crate::metrics::DEFAULT_SK.to_vec(),
                ns: vec![5, 10],
            },
            out: None,
        }
    }

    /// Full-size model with the published schedule: 50 epochs, 1e-4 for 40
    /// of them, batch 16.
    pub fn full() -> Self {
        RunConfig {
            model: ModelConfig::full(),
            lr: LrSchedule {
                initial: 1e-4,
                decay_epoch: 40,
                decay_factor: 10.0,
            },
            epochs: 50,
            batch_size: 16,
            ..RunConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.model.validate()?;
        self.loss.validate()?;
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        if self.model.n_layers == 0 {
            return bad("model.n_layers must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr.initial >= 0.0 && self.lr.initial.is_finite()) || self.lr.decay_factor <= 0.0 {
            return bad("learning rate must be finite and non-negative with a positive decay factor");
        }
        if self.eval.ks.is_empty() || self.eval.ns.is_empty() {
            return bad("eval.ks and eval.ns must be nonempty");
        }
        if !(0.0..=1.0).contains(&self.eval.epsilon) {
            return bad("eval.epsilon must lie in [0, 1]");
        }
        if self.data.train.is_none() && self.data.train_images == 0 {
            return bad("no training data");
        }
        for p in [&self.data.train, &self.data.eval].into_iter().flatten() {
            if !p.is_file() {
                return Err(ExperimentError::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// Builds training examples from in-memory synthetic scenes.
pub fn scenes_to_examples(
    scenes: &[SyntheticScene],
    model: &ModelConfig,
    mode: McabMode,
) -> Result<Vec<TrainExample>, ExperimentError> {
    scenes
        .iter()
        .map(|s| {
            let prior = mode
                .fusion()
                .map(|f| prior_from_cams(&s.cams, &s.probabilities, f, model.grid_h, model.grid_w, model.epsilon_b))
                .transpose()?;
            Ok(TrainExample {
                input: s.image.clone(),
                is_embedding: false,
                prior,
                ground_truths: s.candidates.clone(),
            })
        })
        .collect()
}

/// Builds training examples from loaded records, preferring embeddings when
/// a record carries them.
pub fn records_to_examples(
    records: &[DatasetRecord],
    model: &ModelConfig,
    mode: McabMode,
) -> Result<Vec<TrainExample>, ExperimentError> {
    records
        .iter()
        .map(|r| {
            let (input, is_embedding) = match r.load_embedding()? {
                Some(e) => (e, true),
                None => (r.load_image()?, false),
            };
            Ok(TrainExample {
                input,
                is_embedding,
                prior: r.prior(mode.fusion(), model.grid_h, model.grid_w, model.epsilon_b)?,
                ground_truths: r.crops.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss before each update.
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

pub fn make_optimizer(cfg: &RunConfig) -> Box<dyn Optimizer> {
    match cfg.optimizer {
        OptimizerKind::Sgd => Box::new(Sgd),
        OptimizerKind::Adamw => Box::new(AdamW::new(cfg.weight_decay)),
    }
}

/// Trains a freshly initialized model. Batches are reshuffled each epoch from
/// a generator seeded by `cfg.seed`, so a run is reproducible bit for bit.
pub fn train(cfg: &RunConfig, examples: &[TrainExample]) -> Result<(ModelState, TrainReport), ExperimentError> {
    train_with(cfg, examples, |_, _| {})
}

/// As [`train`], calling `on_epoch(epoch, mean_loss)` after every epoch.
pub fn train_with(
    cfg: &RunConfig,
    examples: &[TrainExample],
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(ModelState, TrainReport), ExperimentError> {
    if examples.is_empty() {
        return Err(ExperimentError::Config("no training examples".into()));
    }
    let mut state = ModelState::init(cfg.model.clone(), cfg.seed)?;
    let mut opt = make_optimizer(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = TrainReport {
        step_losses: Vec::new(),
        epoch_losses: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr.at(epoch);
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let loss = train_step(&mut state, &batch, &cfg.loss, opt.as_mut(), lr)?;
            report.step_losses.push(loss);
            sum += loss;
            steps += 1;
        }
        let mean = sum / steps as f64;
        report.epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }
    Ok((state, report))
}

/// Runs the model over every example and pairs predictions with annotations.
pub fn predict_all(state: &ModelState, examples: &[TrainExample]) -> Result<Vec<EvalExample>, ExperimentError> {
    examples
        .iter()
        .map(|ex| {
            Ok(EvalExample {
                predictions: forward(ex.model_input(), ex.prior.as_ref(), state)?,
                ground_truths: ex.ground_truths.clone(),
            })
        })
        .collect()
}

pub fn evaluate(state: &ModelState, examples: &[TrainExample], eval: &EvalConfig) -> Result<MetricsReport, ExperimentError> {
    let preds = predict_all(state, examples)?;
    Ok(MetricsReport::compute(&preds, &eval.ks, &eval.ns, eval.epsilon)?)
}

/// Ranks each image's annotated candidates by a seeded random permutation and
/// offers them as predictions.
pub fn random_ranking(ground_truths: &[Vec<ScoredCrop>], seed: u64) -> Vec<EvalExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ground_truths
        .iter()
        .map(|gts| {
            let mut rank: Vec<usize> = (0..gts.len()).collect();
            rank.shuffle(&mut rng);
            let n = gts.len().max(1) as f64;
            EvalExample {
                predictions: gts
                    .iter()
                    .zip(&rank)
                    .map(|(g, &r)| crate::decoder::Prediction {
                        crop: g.crop,
                        score: 1.0 - r as f64 / n,
                    })
                    .collect(),
                ground_truths: gts.clone(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mcab: McabMode,
    pub layers: usize,
    pub acc_1_5: f64,
    pub acc_1_10: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub epsilon: f64,
}

impl AblationReport {
    pub fn get(&self, mcab: McabMode, layers: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mcab == mcab && r.layers == layers)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<8} {:>6} {:>9} {:>9}\n", "MCAB", "layers", "Acc1/5", "Acc1/10");
        for r in &self.rows {
            s += &format!(
                "{:<8} {:>6} {:>9.1} {:>9.1}\n",
                r.mcab.name(),
                r.layers,
                100.0 * r.acc_1_5,
                100.0 * r.acc_1_10
            );
        }
        s
    }
}

/// Trains and evaluates one model per (mode, depth) pair. `data` yields the
/// train and eval examples for a mode, since the prior depends on it.
pub fn ablate(
    cfg: &RunConfig,
    modes: &[McabMode],
    depths: &[usize],
    mut data: impl FnMut(McabMode) -> Result<(Vec<TrainExample>, Vec<TrainExample>), ExperimentError>,
) -> Result<AblationReport, ExperimentError> {
    let mut rows = Vec::new();
    for &mode in modes {
        let (train_set, eval_set) = data(mode)?;
        for &layers in depths {
            let mut c = cfg.clone();
            c.mcab = mode;
            c.model.n_layers = layers;
            c.validate()?;
            let (state, report) = train(&c, &train_set)?;
            let preds = predict_all(&state, &eval_set)?;
            rows.push(AblationRow {
                mcab: mode,
                layers,
                acc_1_5: crate::metrics::acc_k_n(&preds, 1, 5, c.eval.epsilon)?,
                acc_1_10: crate::metrics::acc_k_n(&preds, 1, 10, c.eval.epsilon)?,
                final_loss: report.epoch_losses.last().copied().unwrap_or(f64::NAN),
            });
        }
    }
    Ok(AblationReport {
        rows,
        epsilon: cfg.eval.epsilon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decays_once() {
        let s = RunConfig::full().lr;
        assert_eq!(s.at(0), 1e-4);
        assert_eq!(s.at(39), 1e-4);
        assert_eq!(s.at(40), 1e-5);
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let c = RunConfig::desk();
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let mut bad = c.clone();
        bad.model.n_layers = 0;
        assert!(bad.validate().is_err());
        let mut bad = c;
        bad.data.train = Some("/definitely/not/here.jsonl".into());
        assert!(bad.validate().is_err());
    }

    #[test]
    fn random_ranking_is_a_permutation() {
        let scenes = crate::dataio::generate_synthetic(5, 3, 8, 20);
        let gts: Vec<_> = scenes.iter().map(|s| s.candidates.clone()).collect();
        let a = random_ranking(&gts, 9);
        assert_eq!(a, random_ranking(&gts, 9));
        for ex in &a {
            let mut scores: Vec<f64> = ex.predictions.iter().map(|p| p.score).collect();
            scores.sort_by(f64::total_cmp);
            scores.dedup();
            assert_eq!(scores.len(), 20);
        }
    }
}
