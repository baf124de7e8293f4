//! Windowing, normalization, metrics, Adam, and the training loop.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_value, unknown_key};
use crate::data::RawSeries;
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Horizon steps reported individually (1-based).
pub const REPORT_STEPS: [usize; 3] = [3, 6, 12];

/// Targets with smaller magnitude are left out of MAPE.
pub const MAPE_FLOOR: f64 = 1e-3;

/// Z-score statistics fit on observed training entries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
            return Err(Error::Numerical(format!("invalid normalizer mean {mean}, std {std}")));
        }
        Ok(Self { mean, std })
    }

    /// Fits on observed entries of time steps `start..end`.
    pub fn fit(series: &RawSeries, start: usize, end: usize) -> Result<Self> {
        let values: Vec<f64> = (0..series.n_nodes())
            .flat_map(|i| (start..end).filter_map(move |t| series.get(i, t)))
            .collect();
        if values.is_empty() {
            return Err(Error::Config("training split has no observed values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if var.sqrt() <= 1e-12 * mean.abs().max(1.0) {
            return Err(Error::Numerical("training split is constant; cannot normalize".into()));
        }
        Self::new(mean, var.sqrt())
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must be in [0, 1] and sum to 1, got {}/{}/{}",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

/// Chronological split of `total` items; the test part takes the remainder.
pub fn split_sizes(total: usize, ratios: &SplitRatios) -> (usize, usize, usize) {
    let train = ((total as f64 * ratios.train).round() as usize).min(total);
    let val = ((total as f64 * ratios.val).round() as usize).min(total - train);
    (train, val, total - train - val)
}

/// Sliding windows over one contiguous time segment.
///
/// Inputs are normalized with missing entries set to 0; targets stay in
/// original units.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedDataset {
    n_nodes: usize,
    input_steps: usize,
    horizon: usize,
    /// `[W, N, T]`.
    inputs: Vec<f64>,
    input_mask: Vec<bool>,
    /// `[W, N, H]`.
    targets: Vec<f64>,
    masks: Vec<bool>,
    /// Series time index of each window's first input step.
    starts: Vec<usize>,
}

impl WindowedDataset {
    pub fn empty(n_nodes: usize, input_steps: usize, horizon: usize) -> Self {
        Self {
            n_nodes,
            input_steps,
            horizon,
            inputs: Vec::new(),
            input_mask: Vec::new(),
            targets: Vec::new(),
            masks: Vec::new(),
            starts: Vec::new(),
        }
    }

    /// All windows lying inside time steps `start..end`.
    pub fn from_segment(
        series: &RawSeries,
        start: usize,
        end: usize,
        input_steps: usize,
        horizon: usize,
        normalizer: &Normalizer,
    ) -> Self {
        let n = series.n_nodes();
        let mut ds = Self::empty(n, input_steps, horizon);
        let span = input_steps + horizon;
        if end <= start || end - start < span {
            return ds;
        }
        for s in start..=end - span {
            ds.starts.push(s);
            for i in 0..n {
                for t in s..s + input_steps {
                    let v = series.get(i, t);
                    ds.input_mask.push(v.is_some());
                    ds.inputs.push(v.map_or(0.0, |v| normalizer.normalize(v)));
                }
            }
            for i in 0..n {
                for t in s + input_steps..s + span {
                    let v = series.get(i, t);
                    ds.masks.push(v.is_some());
                    ds.targets.push(v.unwrap_or(0.0));
                }
            }
        }
        ds
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn input_steps(&self) -> usize {
        self.input_steps
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn input_mask(&self) -> &[bool] {
        &self.input_mask
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn masks(&self) -> &[bool] {
        &self.masks
    }

    /// Windows of `self` followed by those of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if (self.n_nodes, self.input_steps, self.horizon) != (other.n_nodes, other.input_steps, other.horizon) {
            return Err(Error::shape("concat", "window datasets have different layouts"));
        }
        let mut out = self.clone();
        out.inputs.extend_from_slice(&other.inputs);
        out.input_mask.extend_from_slice(&other.input_mask);
        out.targets.extend_from_slice(&other.targets);
        out.masks.extend_from_slice(&other.masks);
        out.starts.extend_from_slice(&other.starts);
        Ok(out)
    }

    /// Gathers windows `idx` into model input and normalized targets.
    pub fn batch<S: Scalar>(&self, idx: &[usize], normalizer: &Normalizer) -> Result<Batch<S>> {
        let (n, t, h) = (self.n_nodes, self.input_steps, self.horizon);
        let mut x = Vec::with_capacity(idx.len() * n * t);
        let mut target = Vec::with_capacity(idx.len() * n * h);
        let mut mask = Vec::with_capacity(idx.len() * n * h);
        for &w in idx {
            x.extend(self.inputs[w * n * t..(w + 1) * n * t].iter().map(|&v| S::of(v)));
            let range = w * n * h..(w + 1) * n * h;
            for (&v, &m) in self.targets[range.clone()].iter().zip(&self.masks[range]) {
                target.push(S::of(if m { normalizer.normalize(v) } else { 0.0 }));
                mask.push(m);
            }
        }
        Ok(Batch {
            x: Tensor::new([idx.len(), n, t, 1], x)?,
            target: Tensor::new([idx.len(), n, h], target)?,
            mask,
        })
    }
}

pub struct Batch<S> {
    /// `[B, N, T, 1]`.
    pub x: Tensor<S>,
    /// Normalized `[B, N, H]`, 0 where unobserved.
    pub target: Tensor<S>,
    pub mask: Vec<bool>,
}

impl<S> Batch<S> {
    pub fn observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Normalizer and the three chronological window sets.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub normalizer: Normalizer,
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
    /// Time-step boundaries `[0, train_end, val_end, L]`.
    pub bounds: [usize; 4],
}

/// Splits the timeline chronologically, fits the normalizer on the training
/// part, then windows each part separately.
pub fn make_windows(
    series: &RawSeries,
    input_steps: usize,
    horizon: usize,
    ratios: &SplitRatios,
) -> Result<PreparedData> {
    ratios.validate()?;
    let len = series.len();
    if len < input_steps + horizon {
        return Err(Error::Config(format!(
            "series length {len} is shorter than input + horizon = {}",
            input_steps + horizon
        )));
    }
    let (a, b, _) = split_sizes(len, ratios);
    let bounds = [0, a, a + b, len];
    let normalizer = Normalizer::fit(series, 0, a)?;
    let window = |lo, hi| WindowedDataset::from_segment(series, lo, hi, input_steps, horizon, &normalizer);
    Ok(PreparedData {
        normalizer,
        train: window(bounds[0], bounds[1]),
        val: window(bounds[1], bounds[2]),
        test: window(bounds[2], bounds[3]),
        bounds,
    })
}

/// Errors in original units; `None` when no entry qualifies.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    /// Percent.
    pub mape: Option<f64>,
}

pub fn metrics(pred: &[f64], target: &[f64], mask: &[bool]) -> Metrics {
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0usize);
    let (mut pct, mut np) = (0.0, 0usize);
    for ((&p, &t), &m) in pred.iter().zip(target).zip(mask) {
        if !m {
            continue;
        }
        let e = p - t;
        abs += e.abs();
        sq += e * e;
        n += 1;
        if t.abs() >= MAPE_FLOOR {
            pct += (e / t).abs();
            np += 1;
        }
    }
    let mean = |s: f64, c: usize| (c > 0).then(|| s / c as f64);
    Metrics {
        mae: mean(abs, n),
        rmse: mean(sq, n).map(f64::sqrt),
        mape: mean(pct, np).map(|v| 100.0 * v),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    /// `(step, metrics)` for each reported 1-based horizon step.
    pub horizons: Vec<(usize, Metrics)>,
    /// Over all horizon steps.
    pub average: Metrics,
}

/// Per-step and all-step metrics of `[W, N, H]` arrays. Steps beyond `H`
/// are skipped.
pub fn horizon_report(pred: &[f64], target: &[f64], mask: &[bool], horizon: usize, steps: &[usize]) -> Report {
    let horizons = steps
        .iter()
        .filter(|&&s| s >= 1 && s <= horizon)
        .map(|&s| {
            let pick = |v: &[f64]| -> Vec<f64> { v.iter().skip(s - 1).step_by(horizon).copied().collect() };
            let m: Vec<bool> = mask.iter().skip(s - 1).step_by(horizon).copied().collect();
            (s, metrics(&pick(pred), &pick(target), &m))
        })
        .collect();
    Report {
        horizons,
        average: metrics(pred, target, mask),
    }
}

/// Adam with bias correction and an exponentially decaying learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S> {
    pub lr0: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, lr0: f64, decay: f64) -> Self {
        let zeros = || store.entries().iter().map(|e| Tensor::zeros(e.value.shape().to_vec())).collect();
        Self {
            lr0,
            decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay.powi(epoch as i32)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every parameter with learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Tensor<S>], lr: f64) -> Result<()> {
        if grads.len() != self.first.len() || store.len() != self.first.len() {
            return Err(Error::shape("adam", "gradient count does not match parameters"));
        }
        for (entry, g) in store.entries().iter().zip(grads) {
            if g.shape() != entry.value.shape() {
                return Err(Error::shape("adam", format!("gradient shape mismatch for {}", entry.name)));
            }
            if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in parameter '{}' at flat index {pos}",
                    entry.name
                )));
            }
        }
        self.steps += 1;
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let c1 = S::of(1.0 - self.beta1.powi(self.steps as i32));
        let c2 = S::of(1.0 - self.beta2.powi(self.steps as i32));
        let (lr, eps) = (S::of(lr), S::of(self.eps));
        for (((entry, g), m), v) in store
            .entries_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let p = entry.value.data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub fine_tune_epochs: usize,
    pub seed: u64,
    pub ratios: SplitRatios,
    pub report_steps: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 0.002,
            lr_decay: 0.99,
            fine_tune_epochs: 3,
            seed: 0,
            ratios: SplitRatios::default(),
            report_steps: REPORT_STEPS.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "lr_decay" => self.lr_decay = parse_value(key, value)?,
            "fine_tune_epochs" => self.fine_tune_epochs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "train_ratio" => self.ratios.train = parse_value(key, value)?,
            "val_ratio" => self.ratios.val = parse_value(key, value)?,
            "test_ratio" => self.ratios.test = parse_value(key, value)?,
            "report_steps" => {
                self.report_steps = value
                    .split(',')
                    .map(|s| parse_value(key, s))
                    .collect::<Result<Vec<usize>>>()?
            }
            _ => return Err(unknown_key("training", key)),
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        let steps: Vec<String> = self.report_steps.iter().map(usize::to_string).collect();
        [
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("fine_tune_epochs", self.fine_tune_epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("train_ratio", self.ratios.train.to_string()),
            ("val_ratio", self.ratios.val.to_string()),
            ("test_ratio", self.ratios.test.to_string()),
            ("report_steps", steps.join(",")),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr must be positive and lr_decay in (0, 1]".into()));
        }
        self.ratios.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    FineTune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::FineTune => "fine-tune",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Report,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
}

struct Snapshot<S> {
    model: Model<S>,
    adam: Adam<S>,
}

/// One pass over `data` in a seeded random order; returns the mean batch loss.
fn run_epoch<S: Scalar>(
    model: &mut Model<S>,
    adam: &mut Adam<S>,
    data: &WindowedDataset,
    normalizer: &Normalizer,
    batch_size: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let (mut total, mut batches) = (0.0, 0usize);
    for (step, idx) in order.chunks(batch_size).enumerate() {
        let batch = data.batch::<S>(idx, normalizer)?;
        if batch.observed() == 0 {
            debug!("epoch {epoch} step {step}: every target masked, batch skipped");
            continue;
        }
        let mut tape = Tape::new();
        let params = model.params().bind(&mut tape);
        let x = tape.constant(batch.x);
        let fwd = model.forward(&mut tape, &params, x, ForwardOptions::training())?;
        let loss = tape.masked_mae(fwd.output, &batch.target, &batch.mask)?;
        let value = tape.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step,
                detail: format!("loss is {value}"),
            });
        }
        tape.backward(loss)?;
        let grads = params.grads(&tape);
        adam.step(model.params_mut(), &grads, lr).map_err(|e| Error::Divergence {
            epoch,
            step,
            detail: e.to_string(),
        })?;
        model.commit(fwd.updates)?;
        total += value;
        batches += 1;
    }
    Ok(if batches == 0 { f64::NAN } else { total / batches as f64 })
}

/// Trains `model`, keeps the best-validation state, fine-tunes it on
/// train+val, and freezes the cluster assignment.
///
/// On divergence `model` is reset to the last good state before the error
/// is returned.
pub fn train<S: Scalar>(model: &mut Model<S>, data: &PreparedData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("training split has no windows".into()));
    }
    if data.train.n_nodes() != model.n_nodes() {
        return Err(Error::shape(
            "train",
            format!("data has {} nodes, model {}", data.train.n_nodes(), model.n_nodes()),
        ));
    }
    let norm = &data.normalizer;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params(), cfg.lr, cfg.lr_decay);
    let mut best = Snapshot {
        model: model.clone(),
        adam: adam.clone(),
    };
    let mut outcome = TrainOutcome::default();

    let restore = |model: &mut Model<S>, best: &Snapshot<S>, e: Error| -> Error {
        *model = best.model.clone();
        e
    };

    for epoch in 0..cfg.epochs {
        let lr = adam.lr_at(epoch);
        let loss = match run_epoch(model, &mut adam, &data.train, norm, cfg.batch_size, lr, &mut rng, epoch) {
            Ok(l) => l,
            Err(e) => return Err(restore(model, &best, e)),
        };
        let val = if data.val.is_empty() {
            Report::default()
        } else {
            evaluate(model, &data.val, norm, &cfg.report_steps, cfg.batch_size)?.report
        };
        let score = val.average.mae;
        info!("epoch {epoch}: lr {lr:.6} train loss {loss:.5} val MAE {score:?}");
        let improved = match (score, outcome.best_val_mae) {
            (Some(s), Some(b)) => s < b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            outcome.best_epoch = Some(epoch);
            outcome.best_val_mae = score;
            best = Snapshot {
                model: model.clone(),
                adam: adam.clone(),
            };
        }
        outcome.history.push(EpochRecord {
            epoch,
            phase: Phase::Train,
            lr,
            train_loss: loss,
            val,
        });
    }

    *model = best.model.clone();
    adam = best.adam.clone();
    if cfg.fine_tune_epochs > 0 {
        let combined = data.train.concat(&data.val)?;
        let first = outcome.best_epoch.map_or(0, |b| b + 1);
        for k in 0..cfg.fine_tune_epochs {
            let epoch = first + k;
            let lr = adam.lr_at(epoch);
            let loss = match run_epoch(model, &mut adam, &combined, norm, cfg.batch_size, lr, &mut rng, epoch) {
                Ok(l) => l,
                Err(e) => return Err(restore(model, &best, e)),
            };
            let val = if data.val.is_empty() {
                Report::default()
            } else {
                evaluate(model, &data.val, norm, &cfg.report_steps, cfg.batch_size)?.report
            };
            info!("fine-tune epoch {epoch}: train loss {loss:.5}");
            outcome.history.push(EpochRecord {
                epoch,
                phase: Phase::FineTune,
                lr,
                train_loss: loss,
                val,
            });
        }
    }
    if let Some(a) = model.assignment_mut() {
        a.freeze();
    }
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Denormalized `[W, N, H]`.
    pub predictions: Vec<f64>,
    pub report: Report,
}

/// Inference over every window, denormalized, scored on observed targets.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    data: &WindowedDataset,
    normalizer: &Normalizer,
    steps: &[usize],
    batch_size: usize,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Config("evaluation split has no windows".into()));
    }
    if data.n_nodes() != model.n_nodes() {
        return Err(Error::shape(
            "evaluate",
            format!("data has {} nodes, model {}", data.n_nodes(), model.n_nodes()),
        ));
    }
    let mut predictions = Vec::with_capacity(data.targets().len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = data.batch::<S>(chunk, normalizer)?;
        let y = model.predict(&batch.x)?;
        predictions.extend(y.data().iter().map(|v| normalizer.denormalize(v.as_f64())));
    }
    let report = horizon_report(&predictions, data.targets(), data.masks(), data.horizon(), steps);
    Ok(Evaluation { predictions, report })
}

/// Per-node, per-time-of-day mean of the training part.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoricalAverage {
    slots: usize,
    /// `[N, slots]`.
    table: Vec<f64>,
}

impl HistoricalAverage {
    /// Fits on time steps `start..end`. Slots never observed fall back to the
    /// node mean, then to the overall mean.
    pub fn fit(series: &RawSeries, start: usize, end: usize) -> Result<Self> {
        let slots = series.slots_per_day();
        let n = series.n_nodes();
        let mut sum = vec![0.0; n * slots];
        let mut count = vec![0usize; n * slots];
        for i in 0..n {
            for t in start..end {
                if let Some(v) = series.get(i, t) {
                    sum[i * slots + t % slots] += v;
                    count[i * slots + t % slots] += 1;
                }
            }
        }
        let total: usize = count.iter().sum();
        if total == 0 {
            return Err(Error::Config("training split has no observed values".into()));
        }
        let overall = sum.iter().sum::<f64>() / total as f64;
        let mut table = vec![0.0; n * slots];
        for i in 0..n {
            let row = i * slots..(i + 1) * slots;
            let (ns, nc) = (sum[row.clone()].iter().sum::<f64>(), count[row.clone()].iter().sum::<usize>());
            let node_mean = if nc > 0 { ns / nc as f64 } else { overall };
            for k in row {
                table[k] = if count[k] > 0 { sum[k] / count[k] as f64 } else { node_mean };
            }
        }
        Ok(Self { slots, table })
    }

    pub fn predict(&self, data: &WindowedDataset) -> Vec<f64> {
        let (n, t, h) = (data.n_nodes(), data.input_steps(), data.horizon());
        let mut out = Vec::with_capacity(data.len() * n * h);
        for &s in data.starts() {
            for i in 0..n {
                for j in 0..h {
                    out.push(self.table[i * self.slots + (s + t + j) % self.slots]);
                }
            }
        }
        out
    }
}

/// Repeats each node's last observed input for every horizon step, or the
/// training mean when the window has no observation.
pub fn last_value_forecast(data: &WindowedDataset, normalizer: &Normalizer) -> Vec<f64> {
    let (n, t, h) = (data.n_nodes(), data.input_steps(), data.horizon());
    let mut out = Vec::with_capacity(data.len() * n * h);
    for w in 0..data.len() {
        for i in 0..n {
            let base = (w * n + i) * t;
            let last = (0..t)
                .rev()
                .find(|&k| data.input_mask()[base + k])
                .map_or(normalizer.mean, |k| normalizer.denormalize(data.inputs()[base + k]));
            out.extend(std::iter::repeat_n(last, h));
        }
    }
    out
}
