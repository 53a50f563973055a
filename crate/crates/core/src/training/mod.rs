//! Loss, schedule, optimizer and the training loop.

mod optim;

pub use optim::{adam_step, lr_schedule, AdamConfig, OptimizerState};

use std::fmt;
use std::io::Write;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, Graph};
use crate::data::{make_batches, Batch, Dataset, PAD_ID};
use crate::error::{Error, Result};
use crate::eval::{dataset_bleu, perplexity, sources_of};
use crate::model::{teacher_forced_logits, ModelParams};
use crate::tensor::{Float, Tensor};

/// Instances per parallel work unit when computing batch gradients. Chunk
/// results are summed in a fixed order, so results do not depend on the
/// number of threads.
const CHUNK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMetric {
    Bleu4,
    Perplexity,
}

impl SelectionMetric {
    pub fn name(self) -> &'static str {
        match self {
            SelectionMetric::Bleu4 => "bleu4",
            SelectionMetric::Perplexity => "perplexity",
        }
    }

    fn better(self, new: f64, old: f64) -> bool {
        match self {
            SelectionMetric::Bleu4 => new > old,
            SelectionMetric::Perplexity => new < old,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: u64,
    /// Multiplier on the inverse-square-root schedule.
    pub lr_factor: Float,
    pub label_smoothing: Float,
    pub selection_metric: SelectionMetric,
    /// Set from the run-level seed, not from config files.
    #[serde(skip)]
    pub seed: u64,
    /// Validate every this many optimizer steps; 0 means at the end of each
    /// epoch.
    pub validate_every: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<Float>,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
    pub max_decode_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            warmup_steps: 4000,
            lr_factor: 1.0,
            label_smoothing: 0.1,
            selection_metric: SelectionMetric::Bleu4,
            seed: 0,
            validate_every: 0,
            clip_norm: Some(5.0),
            max_steps: None,
            max_decode_len: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.max_decode_len == 0 {
            return Err(Error::Config("batch_size and max_decode_len must be positive".into()));
        }
        if !(self.lr_factor.is_finite() && self.lr_factor >= 0.0) {
            return Err(Error::Config("lr_factor must be finite and non-negative".into()));
        }
        if self.clip_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Label-smoothed cross-entropy of `logits` against `targets`, averaged over
/// non-PAD positions.
pub fn cross_entropy_loss(logits: &Tensor, targets: &[usize], pad_id: usize, smoothing: Float) -> Result<Float> {
    let store = crate::tensor::ParamStore::new();
    let mut g = Graph::new(&store);
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, targets, pad_id, smoothing)?;
    Ok(g.value(loss).item())
}

/// SplitMix64 finalizer, used to derive independent dropout seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn dropout_seed(seed: u64, step: u64, instance: usize) -> u64 {
    mix(mix(mix(seed) ^ step) ^ instance as u64)
}

/// Token-mean loss of a batch and its gradient. Each instance runs on its own
/// unpadded graph, which is equivalent to the padded, masked batch. With
/// `dropout = Some((seed, step))` the graphs run in training mode.
pub fn batch_gradients(
    params: &ModelParams,
    dataset: &Dataset,
    batch: &Batch,
    smoothing: Float,
    dropout: Option<(u64, u64)>,
) -> Result<(Float, GradientMap)> {
    let tokens: usize = batch
        .members
        .iter()
        .map(|&m| dataset.instances[m].tgt[1..].iter().filter(|&&t| t != PAD_ID).count())
        .sum();
    if tokens == 0 {
        return Err(Error::invalid("batch has no target tokens"));
    }
    let chunks = batch
        .members
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = GradientMap::zeros_like(&params.store);
            let mut loss = 0.0;
            for &m in chunk {
                let inst = &dataset.instances[m];
                let mut g = match dropout {
                    Some((seed, step)) => Graph::training(&params.store, dropout_seed(seed, step, inst.id)),
                    None => Graph::new(&params.store),
                };
                let logits = teacher_forced_logits(&mut g, params, sources_of(dataset, inst), &inst.tgt)?;
                let targets = &inst.tgt[1..];
                let n = targets.iter().filter(|&&t| t != PAD_ID).count();
                let l = g.cross_entropy(logits, targets, PAD_ID, smoothing)?;
                let weighted = g.scale(l, n as Float / tokens as Float);
                loss += g.value(weighted).item();
                grads.accumulate(&g.backward(weighted)?)?;
            }
            Ok((loss, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = GradientMap::zeros_like(&params.store);
    let mut loss = 0.0;
    for (l, g) in &chunks {
        loss += l;
        total.accumulate(g)?;
    }
    Ok((loss, total))
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    /// Mean training loss since the previous record.
    pub loss: Float,
    pub metric: SelectionMetric,
    pub value: Option<f64>,
    pub lr: Float,
}

impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={} epoch={} loss={:.6} {}=", self.step, self.epoch, self.loss, self.metric.name())?;
        match self.value {
            Some(v) => write!(f, "{v:.6}")?,
            None => f.write_str("-")?,
        }
        write!(f, " lr={:.6e}", self.lr)
    }
}

pub struct TrainOutcome {
    /// Parameters with the best validation metric, or the final parameters
    /// when no validation set was given.
    pub best: ModelParams,
    pub best_metric: Option<f64>,
    pub last: ModelParams,
    pub history: Vec<MetricRecord>,
    pub steps: u64,
}

/// Owns the parameters being trained and the optimizer state.
pub struct Trainer {
    pub params: ModelParams,
    pub config: TrainConfig,
    pub state: OptimizerState,
    pub adam: AdamConfig,
}

impl Trainer {
    pub fn new(params: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = OptimizerState::new(&params.store);
        Ok(Trainer {
            params,
            config,
            state,
            adam: AdamConfig::default(),
        })
    }

    pub fn learning_rate(&self, step: u64) -> Result<Float> {
        Ok(self.config.lr_factor * lr_schedule(step, self.params.config.d_model, self.config.warmup_steps)?)
    }

    /// Forward, backward and one Adam update on `batch`; returns the loss
    /// before the update.
    pub fn step(&mut self, dataset: &Dataset, batch: &Batch) -> Result<Float> {
        let step = self.state.step + 1;
        let (loss, mut grads) = batch_gradients(
            &self.params,
            dataset,
            batch,
            self.config.label_smoothing,
            Some((self.config.seed, step)),
        )?;
        if !loss.is_finite() || !grads.global_norm().is_finite() {
            return Err(Error::Divergence { step });
        }
        if let Some(c) = self.config.clip_norm {
            grads.clip_global_norm(c);
        }
        let lr = self.learning_rate(step)?;
        adam_step(&mut self.params.store, &grads, &mut self.state, lr, self.adam)?;
        Ok(loss)
    }

    pub fn evaluate(&self, valid: &Dataset) -> Result<f64> {
        match self.config.selection_metric {
            SelectionMetric::Bleu4 => Ok(dataset_bleu(&self.params, valid, self.config.max_decode_len)?.bleu),
            SelectionMetric::Perplexity => perplexity(&self.params, valid),
        }
    }

    /// Runs the configured epochs over `train`, validating on `valid` and
    /// keeping the best parameters. Each metric record is written to `log`.
    pub fn train(mut self, train: &Dataset, valid: Option<&Dataset>, log: &mut dyn Write) -> Result<TrainOutcome> {
        train.validate()?;
        if let Some(v) = valid {
            v.validate()?;
        }
        let metric = self.config.selection_metric;
        let mut best = self.params.clone();
        let mut best_metric: Option<f64> = None;
        let mut history = Vec::new();
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        let mut last_record_step = self.state.step;
        let budget_left = |s: &Self| s.config.max_steps.is_none_or(|m| s.state.step < m);

        let mut record = |t: &Self, epoch: usize, loss_sum: &mut Float, loss_n: &mut usize| -> Result<()> {
            let value = valid.map(|v| t.evaluate(v)).transpose()?;
            let rec = MetricRecord {
                step: t.state.step,
                epoch,
                loss: if *loss_n > 0 { *loss_sum / *loss_n as Float } else { Float::NAN },
                metric,
                value,
                lr: if t.state.step > 0 { t.learning_rate(t.state.step)? } else { 0.0 },
            };
            info!("{rec}");
            writeln!(log, "{rec}")?;
            (*loss_sum, *loss_n) = (0.0, 0);
            if let Some(v) = value {
                if best_metric.is_none_or(|b| metric.better(v, b)) {
                    best_metric = Some(v);
                    best = t.params.clone();
                }
            }
            history.push(rec);
            Ok(())
        };

        let mut reached = 0;
        'epochs: for epoch in 1..=self.config.epochs {
            reached = epoch;
            let seed = dropout_seed(self.config.seed, u64::MAX, epoch);
            let batches = make_batches(&train.instances, self.config.batch_size, seed)?;
            for batch in &batches {
                if !budget_left(&self) {
                    break 'epochs;
                }
                loss_sum += self.step(train, batch)?;
                loss_n += 1;
                let every = self.config.validate_every;
                if every > 0 && self.state.step.is_multiple_of(every) {
                    record(&self, epoch, &mut loss_sum, &mut loss_n)?;
                    last_record_step = self.state.step;
                }
            }
            if self.config.validate_every == 0 && self.state.step > last_record_step {
                record(&self, epoch, &mut loss_sum, &mut loss_n)?;
                last_record_step = self.state.step;
            }
        }
        if self.state.step > last_record_step {
            record(&self, reached, &mut loss_sum, &mut loss_n)?;
        }
        let steps = self.state.step;
        let last = self.params;
        if valid.is_none() {
            best = last.clone();
        }
        Ok(TrainOutcome {
            best,
            best_metric,
            last,
            history,
            steps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{TrainingInstance, VisualFeatureGrid, BOS_ID, EOS_ID};
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            d_k: 4,
            d_v: 4,
            d_ff: 16,
            src_vocab: 10,
            tgt_vocab: 10,
            grid_len: 4,
            d_feat: 3,
            p_drop_visual: 0.5,
            p_drop_residual: 0.0,
            max_len: 20,
        }
    }

    fn mixed() -> Dataset {
        let grid = |k: usize| VisualFeatureGrid::new(4, 3, (0..12).map(|i| ((i * k) as f32 * 0.31).cos()).collect()).unwrap();
        Dataset::new(
            vec![
                TrainingInstance::multimodal(0, vec![4, 5], vec![BOS_ID, 6, 7, EOS_ID], 0),
                TrainingInstance::multimodal(1, vec![5, 8], vec![BOS_ID, 7, EOS_ID], 1),
                TrainingInstance::text_pair(2, vec![4, 9, 9], vec![BOS_ID, 8, 6, 9, EOS_ID]),
                TrainingInstance::text_pair(3, vec![6], vec![BOS_ID, 5, EOS_ID]),
                TrainingInstance::caption(4, vec![BOS_ID, 4, 4, EOS_ID], 1),
            ],
            vec![grid(1), grid(2)],
        )
        .unwrap()
    }

    #[test]
    fn loss_examples() {
        let perfect = Tensor::new(vec![2, 3], vec![0.0, 80.0, 0.0, 0.0, 0.0, 80.0]).unwrap();
        assert!(cross_entropy_loss(&perfect, &[1, 2], PAD_ID, 0.0).unwrap() < 1e-30);
        let uniform = Tensor::zeros(&[3, 5]);
        let l = cross_entropy_loss(&uniform, &[1, 2, 3], PAD_ID, 0.0).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        assert!(cross_entropy_loss(&uniform, &[0, 0, 0], PAD_ID, 0.0).is_err());
    }

    #[test]
    fn smoothed_loss_by_hand() {
        let logits = Tensor::new(vec![1, 3], vec![1.0, 2.0, 0.5]).unwrap();
        let lse = (1f64.exp() + 2f64.exp() + 0.5f64.exp()).ln();
        let nll = [lse - 1.0, lse - 2.0, lse - 0.5];
        let expected = 0.9 * nll[1] + 0.1 * (nll[0] + nll[1] + nll[2]) / 3.0;
        assert!((cross_entropy_loss(&logits, &[1], PAD_ID, 0.1).unwrap() - expected).abs() < 1e-12);
        // PAD rows do not count.
        let two = Tensor::new(vec![2, 3], vec![1.0, 2.0, 0.5, 9.0, -3.0, 4.0]).unwrap();
        assert!((cross_entropy_loss(&two, &[1, PAD_ID], PAD_ID, 0.1).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn text_batches_leave_visual_gradients_exactly_zero() {
        let p = ModelParams::init(&cfg(), 2).unwrap();
        let data = mixed();
        for b in make_batches(&data.instances, 8, 0).unwrap() {
            let (_, grads) = batch_gradients(&p, &data, &b, 0.1, Some((1, 1))).unwrap();
            let visual_nonzero = p.visual_branch_ids().iter().any(|&id| grads.get(id).data().iter().any(|&v| v != 0.0));
            assert_eq!(visual_nonzero, b.kind.has_image(), "{:?}", b.kind);
        }
    }

    #[test]
    fn batch_gradient_is_token_weighted_mean() {
        let p = ModelParams::init(&cfg(), 5).unwrap();
        let data = mixed();
        let batches = make_batches(&data.instances, 8, 0).unwrap();
        let text = batches.iter().find(|b| b.kind.has_text() && !b.kind.has_image()).unwrap();
        let (loss, _) = batch_gradients(&p, &data, text, 0.0, None).unwrap();
        // instance 2 predicts 4 tokens, instance 3 predicts 2
        let single = |i: usize| {
            let b = Batch::from_members(&data.instances, vec![i]).unwrap();
            batch_gradients(&p, &data, &b, 0.0, None).unwrap().0
        };
        let expected = (4.0 * single(2) + 2.0 * single(3)) / 6.0;
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let p = ModelParams::init(&cfg(), 3).unwrap();
        let tc = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let out = Trainer::new(p.clone(), tc).unwrap().train(&mixed(), None, &mut std::io::sink()).unwrap();
        assert_eq!(out.best.store, p.store);
        assert_eq!(out.steps, 0);
        assert!(out.history.is_empty());
    }

    #[test]
    fn two_identical_runs_are_bitwise_identical() {
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 2,
            warmup_steps: 10,
            seed: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let mut log = Vec::new();
            let out = Trainer::new(ModelParams::init(&cfg(), 9).unwrap(), tc.clone())
                .unwrap()
                .train(&mixed(), Some(&mixed()), &mut log)
                .unwrap();
            (out.last.store, out.best.store, log)
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        let log = String::from_utf8(a.2).unwrap();
        assert_eq!(log.lines().count(), 3);
        assert!(log.lines().all(|l| l.starts_with("step=") && l.contains(" bleu4=") && l.contains(" lr=")));
    }

    #[test]
    fn divergence_reports_the_step() {
        let mut p = ModelParams::init(&cfg(), 1).unwrap();
        let w = p.layout.output_w;
        let mut t = p.store.get(w).clone();
        t.data_mut()[0] = Float::NAN;
        p.store.set(w, t).unwrap();
        let data = mixed();
        let b = make_batches(&data.instances, 8, 0).unwrap();
        let mut tr = Trainer::new(p, TrainConfig::default()).unwrap();
        assert!(matches!(tr.step(&data, &b[0]), Err(Error::Divergence { step: 1 })));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { warmup_steps: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { label_smoothing: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
