//! Training loops (full method, single-term ablations, L2-dropout
//! baseline, deep ensembles), the shift evaluation driver, and the
//! sensitivity sweep runner.
//!
//! Per-minibatch schedule of the main trainer:
//!   1. sample one epsilon from the configured set,
//!   2. build the FGSM minibatch from the current parameters,
//!   3. one optimizer step on `cce + lambda_s * entropy` over the clean
//!      minibatch,
//!   4. bin the adversarial minibatch's predictions and take one optimizer
//!      step on `lambda_adv * adv_calibration` over it.
//! The adversarial samples never enter the cross-entropy minimization.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{fgsm_generate, sample_epsilon, AdversarialConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor};
use crate::losses::{adv_calibration_loss, cce_loss, entropy_loss, one_hot, LossWeights};
use crate::metrics::{
    bin_predictions, ece, micro_averaged_ece, nll, predictive_entropy, BinStatistics,
    PredictionRecord,
};
use crate::nn::{softmax_confidences, Model, Optimizer, OptimizerKind};
use crate::rng::{stream_rng, STREAM_DROPOUT, STREAM_EPSILON, STREAM_SHUFFLE};
use crate::shift::{perturb_dataset, PerturbationConfig, PerturbationKind, PerturbationSpec};

/// Which loss terms the trainer applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Falcon,
    FalconLsOnly,
    FalconLadvOnly,
    L2Baseline,
}

/// All hyperparameters governing one training run.
///
/// Published search grids for the auxiliary weights:
/// `lambda_s in {0.5, 1, 5, 10, 15, 30, 50, 100}` (default 50),
/// `lambda_adv in {0.25, 1e-1, 1e-2, 1e-3, 1e-4, 1e-6}` (default 0.02),
/// learning rate in `{1e-5 .. 5e-3}` (default 5e-4).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lambda_s: f64,
    pub lambda_adv: f64,
    pub epsilon_set: Vec<f64>,
    pub clip_min: f64,
    pub clip_max: f64,
    pub num_bins: usize,
    /// Minibatch size; must be >= 2 so binned accuracies are meaningful,
    /// and should comfortably exceed `num_bins`.
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub l2: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Epochs without validation-accuracy improvement before stopping
    /// (needs a validation set at the call site).
    pub early_stopping_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Falcon,
            lambda_s: 50.0,
            lambda_adv: 0.02,
            epsilon_set: AdversarialConfig::default().epsilon_set,
            clip_min: 0.0,
            clip_max: 1.0,
            num_bins: 10,
            batch_size: 128,
            epochs: 5,
            learning_rate: 5e-4,
            dropout: 0.5,
            l2: 0.0,
            optimizer: OptimizerKind::sgd_momentum(),
            seed: 0,
            early_stopping_patience: Some(5),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.num_bins < 1 {
            return Err(Error::Config("num_bins must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.l2 < 0.0 {
            return Err(Error::Config("l2 coefficient must be >= 0".into()));
        }
        LossWeights::new(self.lambda_adv, self.lambda_s)?;
        self.adversarial_config().validate()?;
        Ok(())
    }

    pub fn adversarial_config(&self) -> AdversarialConfig {
        AdversarialConfig {
            epsilon_set: self.epsilon_set.clone(),
            clip_min: self.clip_min,
            clip_max: self.clip_max,
        }
    }
}

/// Loss values of one global step; the clean phase logs `l_cce`/`l_s`,
/// the adversarial phase `l_adv`, under the same step index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_cce: f64,
    pub l_s: Option<f64>,
    pub l_adv: Option<f64>,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// History as CSV rows (used by the CLI `train` artifact).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,l_cce,l_s,l_adv,epsilon\n");
        let fmt_opt = |v: Option<f64>| v.map(crate::data::fmt_float).unwrap_or_default();
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.step,
                s.epoch,
                crate::data::fmt_float(s.l_cce),
                fmt_opt(s.l_s),
                fmt_opt(s.l_adv),
                fmt_opt(s.epsilon),
            ));
        }
        out
    }
}

fn check_finite(value: f64, step: usize, term: &'static str) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::Divergence { step, term });
    }
    Ok(value)
}

struct EarlyStopper {
    patience: usize,
    best_accuracy: f64,
    best_params: Vec<f64>,
    stale_epochs: usize,
}

impl EarlyStopper {
    fn new(patience: usize, model: &Model) -> Self {
        Self {
            patience,
            best_accuracy: f64::NEG_INFINITY,
            best_params: model.flat_params(),
            stale_epochs: 0,
        }
    }

    /// Returns true when training should stop; keeps the best snapshot.
    fn observe(&mut self, acc: f64, model: &Model) -> bool {
        if acc > self.best_accuracy {
            self.best_accuracy = acc;
            self.best_params = model.flat_params();
            self.stale_epochs = 0;
            false
        } else {
            self.stale_epochs += 1;
            self.stale_epochs >= self.patience
        }
    }

    fn restore(self, model: &mut Model) -> Result<()> {
        model.set_params(&self.best_params)
    }
}

/// The main training loop. Mode selects the active loss terms:
/// `Falcon` uses both, `FalconLsOnly` drops the adversarial calibration
/// phase, `FalconLadvOnly` drops the entropy term, and `L2Baseline`
/// degenerates to the plain cross-entropy loop.
pub fn train_falcon(
    model: &mut Model,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let use_ls = matches!(cfg.mode, TrainMode::Falcon | TrainMode::FalconLsOnly)
        && cfg.lambda_s > 0.0;
    let use_adv = matches!(cfg.mode, TrainMode::Falcon | TrainMode::FalconLadvOnly)
        && cfg.lambda_adv > 0.0;
    let adv_cfg = cfg.adversarial_config();
    let num_classes = model.num_classes();

    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.l2, model)?;
    let mut shuffle_rng = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut dropout_rng = stream_rng(cfg.seed, STREAM_DROPOUT);
    let mut eps_rng = stream_rng(cfg.seed, STREAM_EPSILON);
    let mut stopper = cfg
        .early_stopping_patience
        .filter(|_| val.is_some())
        .map(|p| EarlyStopper::new(p, model));

    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    model.training = true;

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for rows in order.chunks(cfg.batch_size) {
            let (bx, by) = train.batch(rows);

            // FGSM minibatch from the pre-step parameters.
            let (mut epsilon, mut mb_adv) = (None, None);
            if use_adv {
                let e = sample_epsilon(&adv_cfg, &mut eps_rng);
                mb_adv = Some(fgsm_generate(model, &bx, &by, e, &adv_cfg)?);
                epsilon = Some(e);
            }

            // Clean step: cce (+ weighted entropy term) on the minibatch.
            let onehot = one_hot(&by, num_classes)?;
            let mut tape = Tape::new();
            let (logits, pnodes) = model.forward(&mut tape, &bx, Some(&mut dropout_rng))?;
            let probs = tape.softmax_rows(logits)?;
            let cce = cce_loss(&mut tape, probs, &onehot)?;
            let l_cce = check_finite(tape.value(cce)[0], step, "cce")?;
            let mut loss = cce;
            let mut l_s = None;
            if use_ls {
                let ls = entropy_loss(&mut tape, probs, &onehot)?;
                l_s = Some(check_finite(tape.value(ls)[0], step, "entropy")?);
                let weighted = tape.scale(ls, cfg.lambda_s);
                loss = tape.add(loss, weighted)?;
            }
            tape.backward(loss)?;
            model.collect_grads(&tape, &pnodes)?;
            opt.step(model)?;

            // Adversarial step: binned-accuracy calibration on the FGSM
            // minibatch only.
            let mut l_adv = None;
            if let Some(adv_inputs) = mb_adv {
                let mut tape = Tape::new();
                let (logits, pnodes) = model.forward(&mut tape, &adv_inputs, Some(&mut dropout_rng))?;
                let probs = tape.softmax_rows(logits)?;
                let ladv = adv_calibration_loss(&mut tape, probs, &by, cfg.num_bins)?;
                l_adv = Some(check_finite(tape.value(ladv)[0], step, "adv-calibration")?);
                let weighted = tape.scale(ladv, cfg.lambda_adv);
                tape.backward(weighted)?;
                model.collect_grads(&tape, &pnodes)?;
                opt.step(model)?;
            }

            history.steps.push(StepRecord {
                step,
                epoch,
                l_cce,
                l_s,
                l_adv,
                epsilon,
            });
            step += 1;
        }
        history.epochs_run = epoch + 1;

        if let (Some(stopper_ref), Some(val_set)) = (stopper.as_mut(), val) {
            let acc = accuracy(model, val_set)?;
            if stopper_ref.observe(acc, model) {
                history.stopped_early = true;
                break 'epochs;
            }
        }
    }

    if let Some(s) = stopper {
        if history.stopped_early {
            s.restore(model)?;
        }
    }
    model.training = false;
    Ok(history)
}

/// Plain CCE + L2 + dropout baseline trainer. Kept as its own loop so the
/// degenerate-mode equivalence of the main trainer is a real cross-check.
pub fn train_baseline(
    model: &mut Model,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let num_classes = model.num_classes();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.l2, model)?;
    let mut shuffle_rng = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut dropout_rng = stream_rng(cfg.seed, STREAM_DROPOUT);
    let mut stopper = cfg
        .early_stopping_patience
        .filter(|_| val.is_some())
        .map(|p| EarlyStopper::new(p, model));

    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    model.training = true;

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for rows in order.chunks(cfg.batch_size) {
            let (bx, by) = train.batch(rows);
            let onehot = one_hot(&by, num_classes)?;
            let mut tape = Tape::new();
            let (logits, pnodes) = model.forward(&mut tape, &bx, Some(&mut dropout_rng))?;
            let probs = tape.softmax_rows(logits)?;
            let cce = cce_loss(&mut tape, probs, &onehot)?;
            let l_cce = check_finite(tape.value(cce)[0], step, "cce")?;
            tape.backward(cce)?;
            model.collect_grads(&tape, &pnodes)?;
            opt.step(model)?;
            history.steps.push(StepRecord {
                step,
                epoch,
                l_cce,
                l_s: None,
                l_adv: None,
                epsilon: None,
            });
            step += 1;
        }
        history.epochs_run = epoch + 1;

        if let (Some(stopper_ref), Some(val_set)) = (stopper.as_mut(), val) {
            let acc = accuracy(model, val_set)?;
            if stopper_ref.observe(acc, model) {
                history.stopped_early = true;
                break 'epochs;
            }
        }
    }

    if let Some(s) = stopper {
        if history.stopped_early {
            s.restore(model)?;
        }
    }
    model.training = false;
    Ok(history)
}

/// Independently seeded ensemble; members train on
/// `cce(clean) + cce(fgsm)` when `adv_epsilon > 0`, plain cce otherwise.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: Vec<Model>,
}

impl Ensemble {
    pub fn num_classes(&self) -> usize {
        self.members[0].num_classes()
    }
}

/// Train `k` baseline nets with member seeds at fixed offsets from the
/// master seed; prediction is the mean of member softmax outputs.
pub fn train_ensemble(
    k: usize,
    build: impl Fn(&mut ChaCha8Rng) -> Result<Model>,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    adv_epsilon: f64,
) -> Result<Ensemble> {
    if k < 1 {
        return Err(Error::Contract("ensemble size must be >= 1".into()));
    }
    cfg.validate()?;
    let adv_cfg = cfg.adversarial_config();
    let mut members = Vec::with_capacity(k);
    for member in 0..k {
        let mut member_cfg = cfg.clone();
        member_cfg.seed = cfg.seed + member as u64;
        let mut init_rng = stream_rng(member_cfg.seed, crate::rng::STREAM_INIT);
        let mut model = build(&mut init_rng)?;
        if adv_epsilon == 0.0 {
            train_baseline(&mut model, train, val, &member_cfg)?;
        } else {
            train_member_adversarial(&mut model, train, val, &member_cfg, adv_epsilon, &adv_cfg)?;
        }
        members.push(model);
    }
    Ok(Ensemble { members })
}

/// Adversarially trained baseline member: one step per minibatch on
/// `cce(clean) + cce(adversarial)`.
fn train_member_adversarial(
    model: &mut Model,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    adv_epsilon: f64,
    adv_cfg: &AdversarialConfig,
) -> Result<()> {
    let num_classes = model.num_classes();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.l2, model)?;
    let mut shuffle_rng = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut dropout_rng = stream_rng(cfg.seed, STREAM_DROPOUT);
    let mut stopper = cfg
        .early_stopping_patience
        .filter(|_| val.is_some())
        .map(|p| EarlyStopper::new(p, model));

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    let mut stopped_early = false;
    model.training = true;

    'epochs: for epoch in 0..cfg.epochs {
        let _ = epoch;
        order.shuffle(&mut shuffle_rng);
        for rows in order.chunks(cfg.batch_size) {
            let (bx, by) = train.batch(rows);
            let adv = fgsm_generate(model, &bx, &by, adv_epsilon, adv_cfg)?;
            let onehot = one_hot(&by, num_classes)?;

            let mut tape = Tape::new();
            let pnodes = model.lease_params(&mut tape, true);
            let clean_in = tape.constant(&bx);
            let clean_logits =
                model.forward_from(&mut tape, clean_in, &pnodes, true, Some(&mut dropout_rng))?;
            let clean_probs = tape.softmax_rows(clean_logits)?;
            let cce_clean = cce_loss(&mut tape, clean_probs, &onehot)?;

            let adv_in = tape.constant(&adv);
            let adv_logits =
                model.forward_from(&mut tape, adv_in, &pnodes, true, Some(&mut dropout_rng))?;
            let adv_probs = tape.softmax_rows(adv_logits)?;
            let cce_adv = cce_loss(&mut tape, adv_probs, &onehot)?;

            let loss = tape.add(cce_clean, cce_adv)?;
            check_finite(tape.value(loss)[0], step, "cce")?;
            tape.backward(loss)?;
            model.collect_grads(&tape, &pnodes)?;
            opt.step(model)?;
            step += 1;
        }
        if let (Some(stopper_ref), Some(val_set)) = (stopper.as_mut(), val) {
            let acc = accuracy(model, val_set)?;
            if stopper_ref.observe(acc, model) {
                stopped_early = true;
                break 'epochs;
            }
        }
    }
    if let Some(s) = stopper {
        if stopped_early {
            s.restore(model)?;
        }
    }
    model.training = false;
    Ok(())
}

/// Anything that yields class probabilities for a batch.
pub trait Classifier {
    fn predict_probs(&self, batch: &Tensor) -> Result<Tensor>;
    fn num_classes(&self) -> usize;
}

impl Classifier for Model {
    fn predict_probs(&self, batch: &Tensor) -> Result<Tensor> {
        Model::predict_probs(self, batch)
    }

    fn num_classes(&self) -> usize {
        Model::num_classes(self)
    }
}

impl Classifier for Ensemble {
    fn predict_probs(&self, batch: &Tensor) -> Result<Tensor> {
        let mut acc: Option<Vec<f64>> = None;
        let mut shape = Vec::new();
        for m in &self.members {
            let p = m.predict_probs(batch)?;
            shape = p.shape().to_vec();
            match &mut acc {
                Some(buf) => {
                    for (slot, &v) in buf.iter_mut().zip(p.data()) {
                        *slot += v;
                    }
                }
                None => acc = Some(p.data().to_vec()),
            }
        }
        let k = self.members.len() as f64;
        let mut data = acc.expect("ensemble has members");
        for v in &mut data {
            *v /= k;
        }
        Tensor::new(shape, data)
    }

    fn num_classes(&self) -> usize {
        Ensemble::num_classes(self)
    }
}

const EVAL_CHUNK: usize = 2048;

/// Eval-mode probabilities over a whole input tensor, in fixed-size chunks
/// (per-row results are independent of the chunking).
pub fn predict_probs_chunked<C: Classifier + ?Sized>(clf: &C, inputs: &Tensor) -> Result<Tensor> {
    let n = inputs.shape()[0];
    let mut out = Vec::with_capacity(n * clf.num_classes());
    let mut shape = Vec::new();
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let batch = inputs.gather_rows(chunk);
        let p = clf.predict_probs(&batch)?;
        shape = p.shape().to_vec();
        out.extend_from_slice(p.data());
    }
    shape[0] = n;
    Tensor::new(shape, out)
}

/// Eval-mode accuracy of a classifier on a dataset.
pub fn accuracy<C: Classifier + ?Sized>(clf: &C, data: &Dataset) -> Result<f64> {
    let probs = predict_probs_chunked(clf, &data.inputs)?;
    let c = clf.num_classes();
    let correct = probs
        .data()
        .chunks(c)
        .zip(&data.labels)
        .filter(|(row, &y)| crate::metrics::argmax(row) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Metrics of one (perturbation, level) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub perturbation: String,
    pub level: u32,
    pub accuracy: f64,
    pub ece: f64,
    pub mean_entropy: f64,
    pub nll: f64,
    pub mean_confidence: f64,
    pub bins: Vec<BinStatistics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroEce {
    pub perturbation: String,
    pub micro_ece: f64,
}

/// The principal evaluation artifact: per-cell metrics, per-perturbation
/// micro-averaged ECE, and in-domain summary, with full provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub schema_version: u32,
    pub model_tag: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub num_bins: usize,
    pub test_accuracy: f64,
    pub in_domain_ece: f64,
    pub cells: Vec<CellReport>,
    pub micro_ece: Vec<MicroEce>,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn cell_metrics(
    records: &[PredictionRecord],
    perturbation: &str,
    level: u32,
    num_bins: usize,
) -> Result<CellReport> {
    let n = records.len() as f64;
    let accuracy = records.iter().filter(|r| r.correct()).count() as f64 / n;
    let mean_entropy = records
        .iter()
        .map(|r| predictive_entropy(&r.probs))
        .sum::<f64>()
        / n;
    let mean_confidence = records.iter().map(|r| r.confidence()).sum::<f64>() / n;
    Ok(CellReport {
        perturbation: perturbation.to_string(),
        level,
        accuracy,
        ece: ece(records, num_bins)?,
        mean_entropy,
        nll: nll(records)?,
        mean_confidence,
        bins: bin_predictions(records, num_bins)?,
    })
}

/// Run the full (kind x level) suite over a test set in eval mode.
///
/// Returns the report plus the raw prediction records in deterministic
/// (kind, level, sample) order; the records back the prediction-log CSV.
/// The classifier is read-only throughout.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_under_shift<C: Classifier + ?Sized>(
    clf: &C,
    test: &Dataset,
    kinds: &[PerturbationKind],
    levels: &[u32],
    num_bins: usize,
    pert_cfg: &PerturbationConfig,
    seed: u64,
    model_tag: &str,
    config_snapshot: serde_json::Value,
) -> Result<(CalibrationReport, Vec<PredictionRecord>)> {
    if kinds.is_empty() || levels.is_empty() {
        return Err(Error::Contract("evaluation suite must be non-empty".into()));
    }
    pert_cfg.validate()?;

    // Unperturbed pass drives the in-domain summary and every level-0 cell
    // (level 0 is a bit-exact identity for all kinds).
    let clean_probs = predict_probs_chunked(clf, &test.inputs)?;
    let c = clf.num_classes();
    let make_records = |probs: &Tensor, tag: &str, level: u32| -> Result<Vec<PredictionRecord>> {
        probs
            .data()
            .chunks(c)
            .zip(&test.labels)
            .map(|(row, &y)| PredictionRecord::new(row.to_vec(), y, tag, level))
            .collect()
    };

    let in_domain = make_records(&clean_probs, "identity", 0)?;
    let test_accuracy = in_domain.iter().filter(|r| r.correct()).count() as f64 / test.len() as f64;
    let in_domain_ece = ece(&in_domain, num_bins)?;

    let mut cells = Vec::new();
    let mut micro = Vec::new();
    let mut all_records = Vec::new();
    for &kind in kinds {
        let mut kind_records: Vec<PredictionRecord> = Vec::new();
        for &level in levels {
            let spec = PerturbationSpec::new(kind, level, pert_cfg)?;
            let records = if level == 0 {
                make_records(&clean_probs, kind.name(), 0)?
            } else {
                let perturbed = perturb_dataset(test, &spec, seed).map_err(|e| {
                    Error::Contract(format!("{} level {level}: {e}", kind.name()))
                })?;
                let probs = predict_probs_chunked(clf, &perturbed)?;
                make_records(&probs, kind.name(), level)?
            };
            cells.push(cell_metrics(&records, kind.name(), level, num_bins)?);
            kind_records.extend(records.iter().cloned());
            all_records.extend(records);
        }
        micro.push(MicroEce {
            perturbation: kind.name().to_string(),
            micro_ece: micro_averaged_ece(&kind_records, num_bins)?,
        });
    }

    let report = CalibrationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        model_tag: model_tag.to_string(),
        seed,
        config: config_snapshot,
        num_bins,
        test_accuracy,
        in_domain_ece,
        cells,
        micro_ece: micro,
    };
    Ok((report, all_records))
}

/// Sweep parameter of the sensitivity runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    LambdaS,
    LambdaAdv,
}

impl SweepParam {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "lambda_s" | "lambda-s" => Ok(SweepParam::LambdaS),
            "lambda_adv" | "lambda-adv" => Ok(SweepParam::LambdaAdv),
            other => Err(Error::Config(format!(
                "sweep parameter must be lambda_s or lambda_adv, got {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub accuracy: f64,
    pub micro_ece: f64,
}

/// Retrain per sweep value under the shared seed and report test accuracy
/// plus mean micro-averaged ECE over the given suites.
#[allow(clippy::too_many_arguments)]
pub fn run_sensitivity(
    base_cfg: &TrainConfig,
    param: SweepParam,
    values: &[f64],
    build: impl Fn(&mut ChaCha8Rng) -> Result<Model>,
    train: &Dataset,
    test: &Dataset,
    kinds: &[PerturbationKind],
    levels: &[u32],
    pert_cfg: &PerturbationConfig,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Contract("sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base_cfg.clone();
        match param {
            SweepParam::LambdaS => cfg.lambda_s = value,
            SweepParam::LambdaAdv => cfg.lambda_adv = value,
        }
        let mut init_rng = stream_rng(cfg.seed, crate::rng::STREAM_INIT);
        let mut model = build(&mut init_rng)?;
        train_falcon(&mut model, train, None, &cfg)?;
        let (report, _) = evaluate_under_shift(
            &model,
            test,
            kinds,
            levels,
            cfg.num_bins,
            pert_cfg,
            cfg.seed,
            "sweep",
            serde_json::to_value(&cfg).map_err(|e| Error::Schema(e.to_string()))?,
        )?;
        let mean_micro =
            report.micro_ece.iter().map(|m| m.micro_ece).sum::<f64>() / report.micro_ece.len() as f64;
        rows.push(SweepRow {
            value,
            accuracy: report.test_accuracy,
            micro_ece: mean_micro,
        });
    }
    Ok(rows)
}

/// Mean softmax confidence and entropy of a classifier over raw inputs.
pub fn confidence_entropy_summary<C: Classifier + ?Sized>(
    clf: &C,
    inputs: &Tensor,
) -> Result<(f64, f64)> {
    let probs = predict_probs_chunked(clf, inputs)?;
    let c = clf.num_classes();
    let n = inputs.shape()[0] as f64;
    let mut conf_sum = 0.0;
    let mut ent_sum = 0.0;
    for row in probs.data().chunks(c) {
        conf_sum += row[crate::metrics::argmax(row)];
        ent_sum += predictive_entropy(row);
    }
    Ok((conf_sum / n, ent_sum / n))
}

/// Logits of a model over a dataset (used for temperature fitting).
pub fn logits_chunked(model: &Model, inputs: &Tensor) -> Result<Tensor> {
    let n = inputs.shape()[0];
    let mut out = Vec::with_capacity(n * model.num_classes());
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let batch = inputs.gather_rows(chunk);
        let l = model.predict_logits(&batch)?;
        out.extend_from_slice(l.data());
    }
    Tensor::new(vec![n, model.num_classes()], out)
}

/// A model with a fitted temperature applied to its logits.
pub struct TemperedModel {
    pub model: Model,
    pub scaler: crate::metrics::TemperatureScaler,
}

impl Classifier for TemperedModel {
    fn predict_probs(&self, batch: &Tensor) -> Result<Tensor> {
        let logits = self.model.predict_logits(batch)?;
        crate::metrics::apply_temperature(&self.scaler, &logits)
    }

    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }
}

/// Softmax probabilities as plain tensors for one batch of logits.
pub fn probs_of_logits(logits: &Tensor) -> Result<Tensor> {
    softmax_confidences(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::preset;
    use crate::rng::STREAM_INIT;

    fn synth_cfg(mode: TrainMode, seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            mode,
            epochs,
            batch_size: 32,
            learning_rate: 5e-3,
            dropout: 0.0,
            clip_min: -50.0,
            clip_max: 50.0,
            seed,
            early_stopping_patience: None,
            ..Default::default()
        }
    }

    fn build_2d(seed: u64) -> Model {
        let mut rng = stream_rng(seed, STREAM_INIT);
        preset("mlp-2d", 2, &mut rng).unwrap()
    }

    #[test]
    fn degenerate_falcon_equals_baseline_bitwise() {
        let (train, _) = crate::data::gen_synthetic_shift(1, 200, 0.0).unwrap();
        let mut cfg = synth_cfg(TrainMode::Falcon, 5, 3);
        cfg.lambda_s = 0.0;
        cfg.lambda_adv = 0.0;
        cfg.epsilon_set = vec![0.0];

        let mut falcon_model = build_2d(9);
        train_falcon(&mut falcon_model, &train, None, &cfg).unwrap();

        let mut base_cfg = cfg.clone();
        base_cfg.mode = TrainMode::L2Baseline;
        let mut baseline_model = build_2d(9);
        train_baseline(&mut baseline_model, &train, None, &base_cfg).unwrap();

        assert_eq!(falcon_model.flat_params(), baseline_model.flat_params());
    }

    #[test]
    fn same_seed_reproduces_final_parameters() {
        let (train, _) = crate::data::gen_synthetic_shift(2, 128, 0.0).unwrap();
        let cfg = synth_cfg(TrainMode::Falcon, 11, 2);
        let run = || {
            let mut model = build_2d(4);
            train_falcon(&mut model, &train, None, &cfg).unwrap();
            model.flat_params()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn smoke_run_reaches_train_accuracy() {
        let (train, _) = crate::data::gen_synthetic_shift(3, 2000, 0.0).unwrap();
        let mut model = build_2d(7);
        let mut cfg = synth_cfg(TrainMode::Falcon, 3, 4);
        cfg.batch_size = 40; // 200 steps total
        train_falcon(&mut model, &train, None, &cfg).unwrap();
        let acc = accuracy(&model, &train).unwrap();
        assert!(acc >= 0.9, "train accuracy {acc}");
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let (train, _) = crate::data::gen_synthetic_shift(4, 64, 0.0).unwrap();
        let mut model = build_2d(5);
        let before = model.flat_params();
        let cfg = synth_cfg(TrainMode::L2Baseline, 1, 0);
        train_baseline(&mut model, &train, None, &cfg).unwrap();
        assert_eq!(model.flat_params(), before);
    }

    #[test]
    fn baseline_loss_decreases_on_moving_average() {
        let (train, _) = crate::data::gen_synthetic_shift(5, 1600, 0.0).unwrap();
        let mut model = build_2d(6);
        let mut cfg = synth_cfg(TrainMode::L2Baseline, 6, 1);
        cfg.batch_size = 32; // 50 steps
        let hist = train_baseline(&mut model, &train, None, &cfg).unwrap();
        let losses: Vec<f64> = hist.steps.iter().map(|s| s.l_cce).collect();
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(
            tail <= head,
            "loss moving average should not increase: head {head}, tail {tail}"
        );
    }

    #[test]
    fn falcon_history_logs_all_terms_per_step() {
        let (train, _) = crate::data::gen_synthetic_shift(6, 96, 0.0).unwrap();
        let mut model = build_2d(8);
        let cfg = synth_cfg(TrainMode::Falcon, 7, 1);
        let hist = train_falcon(&mut model, &train, None, &cfg).unwrap();
        assert!(!hist.steps.is_empty());
        for (i, s) in hist.steps.iter().enumerate() {
            assert_eq!(s.step, i);
            assert!(s.l_s.is_some());
            assert!(s.l_adv.is_some());
            assert!(s.epsilon.is_some());
        }
    }

    #[test]
    fn ls_only_mode_never_generates_adversarial_batches() {
        let (train, _) = crate::data::gen_synthetic_shift(7, 96, 0.0).unwrap();
        let mut model = build_2d(9);
        let cfg = synth_cfg(TrainMode::FalconLsOnly, 8, 1);
        let hist = train_falcon(&mut model, &train, None, &cfg).unwrap();
        for s in &hist.steps {
            assert!(s.l_adv.is_none());
            assert!(s.epsilon.is_none());
            assert!(s.l_s.is_some());
        }
    }

    #[test]
    fn ensemble_of_one_without_adversary_equals_baseline() {
        let (train, _) = crate::data::gen_synthetic_shift(8, 128, 0.0).unwrap();
        let cfg = synth_cfg(TrainMode::L2Baseline, 21, 2);
        let ens = train_ensemble(1, |rng| preset("mlp-2d", 2, rng), &train, None, &cfg, 0.0)
            .unwrap();
        let mut base = {
            let mut rng = stream_rng(cfg.seed, STREAM_INIT);
            preset("mlp-2d", 2, &mut rng).unwrap()
        };
        train_baseline(&mut base, &train, None, &cfg).unwrap();
        assert_eq!(ens.members[0].flat_params(), base.flat_params());
    }

    #[test]
    fn ensemble_probabilities_sum_to_one() {
        let (train, test) = crate::data::gen_synthetic_shift(9, 64, 1.0).unwrap();
        let cfg = synth_cfg(TrainMode::L2Baseline, 31, 1);
        let ens = train_ensemble(3, |rng| preset("mlp-2d", 2, rng), &train, None, &cfg, 0.01)
            .unwrap();
        let probs = predict_probs_chunked(&ens, &test.inputs).unwrap();
        for row in probs.data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn evaluation_is_read_only_on_the_model() {
        let (train, test) = crate::data::gen_synthetic_shift(10, 64, 0.0).unwrap();
        let mut model = build_2d(10);
        let cfg = synth_cfg(TrainMode::L2Baseline, 41, 1);
        train_baseline(&mut model, &train, None, &cfg).unwrap();
        let before = model.flat_params();
        let _ = accuracy(&model, &test).unwrap();
        let _ = confidence_entropy_summary(&model, &test.inputs).unwrap();
        assert_eq!(model.flat_params(), before);
    }

    #[test]
    fn singleton_sweep_matches_direct_run() {
        // Level 0 is an identity for every kind, so a level-0-only suite
        // works on non-image data too.
        let (train, test) = crate::data::gen_synthetic_shift(11, 96, 0.0).unwrap();
        let cfg = synth_cfg(TrainMode::Falcon, 51, 1);
        let kinds = [PerturbationKind::Rotation];
        let rows = run_sensitivity(
            &cfg,
            SweepParam::LambdaAdv,
            &[cfg.lambda_adv],
            |rng| preset("mlp-2d", 2, rng),
            &train,
            &test,
            &kinds,
            &[0],
            &PerturbationConfig::default(),
        )
        .unwrap();
        assert_eq!(rows.len(), 1);

        let mut model = build_2d(cfg.seed);
        let mut direct = {
            let mut rng = stream_rng(cfg.seed, STREAM_INIT);
            preset("mlp-2d", 2, &mut rng).unwrap()
        };
        train_falcon(&mut direct, &train, None, &cfg).unwrap();
        let direct_acc = accuracy(&direct, &test).unwrap();
        assert_eq!(rows[0].accuracy, direct_acc);
        let _ = &mut model;
    }
}
