//! Mini-batch training with Adam, a plateau learning-rate schedule and
//! best-validation model selection.

use std::fmt::Write as _;

use crate::dataset::{batches, Dataset};
use crate::error::{Error, Result};
use crate::models::Forecaster;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut [f32],
    grads: &[f32],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} is {}", grads[i])));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let g = *g as f64;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let update = lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        *p = (*p as f64 - update) as f32;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    /// Relative improvement needed to reset the patience counter.
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.1,
            patience: 10,
            threshold: 1e-4,
            min_lr: 1e-7,
        }
    }
}

/// Reduce-on-plateau schedule driven by validation loss.
#[derive(Debug, Clone)]
pub struct Plateau {
    cfg: PlateauConfig,
    lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl Plateau {
    pub fn new(lr: f64, cfg: PlateauConfig) -> Self {
        Self {
            cfg,
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's validation loss, returns the learning rate for
    /// the next epoch.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best * (1.0 - self.cfg.threshold) {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.cfg.patience {
                self.lr = (self.lr * self.cfg.factor).max(self.cfg.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Replays a whole validation history through a fresh schedule.
pub fn plateau_scheduler(history: &[f64], lr0: f64, cfg: &PlateauConfig) -> f64 {
    let mut s = Plateau::new(lr0, *cfg);
    for v in history {
        s.step(*v);
    }
    s.lr()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a new best validation loss.
    pub early_stop: usize,
    pub scheduler: PlateauConfig,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            batch_size: 30,
            max_epochs: 100,
            early_stop: 25,
            scheduler: PlateauConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid("lr0 must be a nonnegative number"));
        }
        if !(self.scheduler.factor > 0.0 && self.scheduler.factor < 1.0) {
            return Err(Error::invalid("scheduler factor must lie in (0, 1)"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("batch_size and max_epochs must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_mse,val_mse,lr\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.train_mse, e.val_mse, e.lr);
        }
        out
    }
}

fn to_f32(xs: &[f64]) -> Vec<f32> {
    xs.iter().map(|v| *v as f32).collect()
}

fn check_compatible(model: &Forecaster<f32>, ds: &Dataset, what: &str) -> Result<()> {
    let cfg = model.config();
    let spec = ds.spec();
    if ds.is_empty() {
        return Err(Error::invalid(format!("{what} set is empty")));
    }
    if spec.context_len != cfg.context_len
        || spec.horizon != cfg.horizon
        || ds.n_channels() != cfg.n_channels
    {
        return Err(Error::Shape {
            op: "train",
            lhs: vec![cfg.context_len, cfg.horizon, cfg.n_channels],
            rhs: vec![spec.context_len, spec.horizon, ds.n_channels()],
        });
    }
    Ok(())
}

/// Gathers `(contexts, targets)` for the listed windows.
fn gather(ds: &Dataset, idx: &[usize]) -> (Vec<f32>, Vec<f32>) {
    let mut ctx = Vec::new();
    let mut tgt = Vec::new();
    for &k in idx {
        ctx.extend(to_f32(ds.context(k)));
        tgt.extend(to_f32(ds.target(k)));
    }
    (ctx, tgt)
}

/// Mean squared error of the model over a dataset, averaged over windows,
/// steps and channels, in the units the model sees.
pub fn evaluate(model: &Forecaster<f32>, ds: &Dataset, batch_size: usize) -> Result<f64> {
    squared_error(model, ds, batch_size, None)
}

/// As [`evaluate`], with errors mapped back through the dataset's
/// standardization when it has one.
pub fn evaluate_raw(model: &Forecaster<f32>, ds: &Dataset, batch_size: usize) -> Result<f64> {
    squared_error(model, ds, batch_size, ds.normalization.as_ref().map(|a| a.std.as_slice()))
}

fn squared_error(
    model: &Forecaster<f32>,
    ds: &Dataset,
    batch_size: usize,
    scale: Option<&[f64]>,
) -> Result<f64> {
    check_compatible(model, ds, "evaluation")?;
    let n = ds.n_channels();
    let mut total = 0.0;
    let mut count = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (ctx, tgt) = gather(ds, chunk);
        let pred = model.predict(&ctx, chunk.len())?;
        total += pred
            .data()
            .iter()
            .zip(&tgt)
            .enumerate()
            .map(|(i, (p, t))| {
                let d = (*p as f64 - *t as f64) * scale.map_or(1.0, |s| s[i % n]);
                d * d
            })
            .sum::<f64>();
        count += tgt.len();
    }
    Ok(total / count as f64)
}

pub fn train(
    model: Forecaster<f32>,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Forecaster<f32>, TrainReport)> {
    train_with(model, train_ds, val_ds, cfg, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    mut model: Forecaster<f32>,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Forecaster<f32>, TrainReport)> {
    cfg.validate()?;
    check_compatible(&model, train_ds, "training")?;
    check_compatible(&model, val_ds, "validation")?;
    let mcfg = model.config().clone();
    let mut states: Vec<AdamState> = model.params().iter().map(|p| AdamState::new(p.numel())).collect();
    let mut schedule = Plateau::new(cfg.lr0, cfg.scheduler);
    let mut best = (model.clone(), 0usize, f64::INFINITY);
    let mut epochs = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let lr = schedule.lr();
        let mut sum = 0.0;
        let mut seen = 0usize;
        for batch in batches(train_ds.len(), cfg.batch_size, cfg.seed, epoch as u64) {
            let (ctx, tgt) = gather(train_ds, &batch);
            let b = batch.len();
            let g = Graph::new();
            let bound = model.bind(&g);
            let x = g.constant_owned(Tensor::new(vec![b, mcfg.context_len, mcfg.n_channels], ctx)?);
            let y = g.constant_owned(Tensor::new(vec![b, mcfg.horizon, mcfg.n_channels], tgt)?);
            let pred = model.forward(&g, &bound, x)?;
            let loss = g.mse(pred, y)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            sum += value * b as f64;
            seen += b;
            let grads = g.backward(loss)?;
            for (i, var) in bound.iter().enumerate() {
                let grad = grads.get(*var)?;
                let name = model.names()[i].clone();
                adam_step(model.params_mut()[i].data_mut(), grad.data(), &mut states[i], lr, &cfg.adam)
                    .map_err(|e| Error::NonFinite(format!("{name} at epoch {epoch}: {e}")))?;
            }
        }
        let val = evaluate(&model, val_ds, cfg.batch_size)?;
        if !val.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        let record = EpochRecord {
            epoch,
            train_mse: sum / seen as f64,
            val_mse: val,
            lr,
        };
        on_epoch(&record);
        epochs.push(record);
        if val < best.2 {
            best = (model.clone(), epoch, val);
        }
        schedule.step(val);
        if epoch - best.1 >= cfg.early_stop {
            break;
        }
    }
    let (best_model, best_epoch, best_val_loss) = best;
    Ok((
        best_model,
        TrainReport {
            epochs,
            best_epoch,
            best_val_loss,
        },
    ))
}
