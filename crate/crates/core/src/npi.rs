//! Perturbational inference: effective connectivity read off a trained
//! forecaster by differencing its predictions for clean and perturbed
//! contexts.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Affine;
use crate::ec::{EcMode, EcTensor};
use crate::error::{Error, Result};
use crate::jansen_rit::TwinSet;
use crate::models::Forecaster;
use crate::series::TimeSeries;
use crate::tensor::Scalar;

pub const PAIRS_META: &str = "pairs.json";
pub const PAIRS_BASELINE: &str = "baseline.bin";

/// Clean contexts and, per source region, their perturbed counterparts.
/// Contexts are stored back to back, `context_len` rows each.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationPairs {
    pub clean: TimeSeries,
    pub perturbed: Vec<TimeSeries>,
    pub context_len: usize,
    pub magnitude: f64,
    pub mode: EcMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PairsMeta {
    context_len: usize,
    n_windows: usize,
    n_sources: usize,
    magnitude: f64,
    mode: String,
}

fn contexts(series: &TimeSeries, n_windows: usize, window_len: usize, context_len: usize) -> Result<TimeSeries> {
    let n = series.n_channels();
    let mut data = Vec::with_capacity(n_windows * context_len * n);
    for w in 0..n_windows {
        data.extend_from_slice(series.rows(w * window_len, context_len));
    }
    TimeSeries::new(n, data, series.rate, series.seed)
}

impl PerturbationPairs {
    /// Contexts cut from twin simulations; the kick must fall inside the
    /// context.
    pub fn from_twins(twins: &TwinSet, context_len: usize) -> Result<Self> {
        if context_len < twins.template.step_index || context_len > twins.window_len() {
            return Err(Error::invalid(format!(
                "context of {context_len} steps does not contain the perturbation at step {}",
                twins.template.step_index
            )));
        }
        let cut = |s: &TimeSeries| contexts(s, twins.n_windows, twins.window_len(), context_len);
        Ok(Self {
            clean: cut(&twins.baseline)?,
            perturbed: twins.perturbed.iter().map(cut).collect::<Result<_>>()?,
            context_len,
            magnitude: twins.template.magnitude,
            mode: EcMode::Generative,
        })
    }

    /// Adds `magnitude` to channel `a` at one-based context step `step` for
    /// every source `a`.
    pub fn direct(clean: TimeSeries, context_len: usize, magnitude: f64, step: usize) -> Result<Self> {
        if step == 0 || step > context_len {
            return Err(Error::invalid(format!("step {step} outside 1..={context_len}")));
        }
        if clean.n_steps() == 0 || !clean.n_steps().is_multiple_of(context_len) {
            return Err(Error::invalid(format!(
                "{} rows do not split into contexts of {context_len}",
                clean.n_steps()
            )));
        }
        let n = clean.n_channels();
        let perturbed = (0..n)
            .map(|a| {
                let mut data = clean.data().to_vec();
                for w in 0..clean.n_steps() / context_len {
                    data[(w * context_len + step - 1) * n + a] += magnitude;
                }
                TimeSeries::new(n, data, clean.rate, clean.seed)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            clean,
            perturbed,
            context_len,
            magnitude,
            mode: EcMode::Direct,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.clean.n_channels()
    }

    pub fn n_windows(&self) -> usize {
        self.clean.n_steps() / self.context_len
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_channels();
        if self.perturbed.len() != n {
            return Err(Error::invalid(format!(
                "pairs cover {} of {n} source regions",
                self.perturbed.len()
            )));
        }
        if self.n_windows() == 0 || !self.clean.n_steps().is_multiple_of(self.context_len) {
            return Err(Error::invalid("pairs hold no complete context"));
        }
        for p in &self.perturbed {
            if p.n_channels() != n || p.n_steps() != self.clean.n_steps() {
                return Err(Error::Shape {
                    op: "perturbation pairs",
                    lhs: vec![self.clean.n_steps(), n],
                    rhs: vec![p.n_steps(), p.n_channels()],
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.clean.save(dir.join(PAIRS_BASELINE))?;
        for (s, p) in self.perturbed.iter().enumerate() {
            p.save(dir.join(format!("perturbed_{s}.bin")))?;
        }
        let meta = PairsMeta {
            context_len: self.context_len,
            n_windows: self.n_windows(),
            n_sources: self.perturbed.len(),
            magnitude: self.magnitude,
            mode: self.mode.to_string(),
        };
        let path = dir.join(PAIRS_META);
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::invalid(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(PAIRS_META);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: PairsMeta =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let perturbed = (0..meta.n_sources)
            .map(|s| TimeSeries::load(dir.join(format!("perturbed_{s}.bin"))))
            .collect::<Result<_>>()?;
        let pairs = Self {
            clean: TimeSeries::load(dir.join(PAIRS_BASELINE))?,
            perturbed,
            context_len: meta.context_len,
            magnitude: meta.magnitude,
            mode: meta.mode.parse().map_err(|e: Error| Error::format(&path, e.to_string()))?,
        };
        pairs.validate().map_err(|e| Error::format(dir, e.to_string()))?;
        Ok(pairs)
    }
}

/// Windows pushed through the model per forward pass.
const CHUNK: usize = 100;

fn predict_chunk<T: Scalar>(
    model: &Forecaster<T>,
    rows: &[f64],
    batch: usize,
    norm: Option<&Affine>,
) -> Result<Vec<f64>> {
    let mut input = rows.to_vec();
    if let Some(aff) = norm {
        aff.apply(&mut input);
    }
    let input: Vec<T> = input.into_iter().map(T::from_f64).collect();
    let out = model.predict(&input, batch)?;
    Ok(out.data().iter().map(|v| Scalar::to_f64(*v)).collect())
}

/// Mean over windows of `model(perturbed) - model(clean)` for every source.
/// With `norm`, contexts are standardized before the forward pass and the
/// differences mapped back to raw units.
pub fn infer_ec<T: Scalar>(
    model: &Forecaster<T>,
    pairs: &PerturbationPairs,
    norm: Option<&Affine>,
) -> Result<EcTensor> {
    pairs.validate()?;
    let cfg = model.config();
    let n = pairs.n_channels();
    if cfg.context_len != pairs.context_len || cfg.n_channels != n {
        return Err(Error::Shape {
            op: "infer_ec",
            lhs: vec![cfg.context_len, cfg.n_channels],
            rhs: vec![pairs.context_len, n],
        });
    }
    if let Some(aff) = norm {
        if aff.mean.len() != n {
            return Err(Error::invalid("normalization does not match the channel count"));
        }
    }
    let horizon = cfg.horizon;
    let windows = pairs.n_windows();
    let stride = pairs.context_len * n;
    let mut sums = vec![0.0; horizon * n * n];
    let mut start = 0;
    while start < windows {
        let batch = CHUNK.min(windows - start);
        let span = start * stride..(start + batch) * stride;
        let clean = predict_chunk(model, &pairs.clean.data()[span.clone()], batch, norm)?;
        for (a, pert) in pairs.perturbed.iter().enumerate() {
            let out = predict_chunk(model, &pert.data()[span.clone()], batch, norm)?;
            for w in 0..batch {
                for t in 0..horizon {
                    for b in 0..n {
                        let i = (w * horizon + t) * n + b;
                        let scale = norm.map_or(1.0, |aff| aff.std[b]);
                        sums[(t * n + b) * n + a] += (out[i] - clean[i]) * scale;
                    }
                }
            }
        }
        start += batch;
    }
    let delta = sums.into_iter().map(|s| s / windows as f64).collect();
    let mut ec = EcTensor::from_values(horizon, n, delta, pairs.magnitude, pairs.mode)?;
    ec.n_samples = windows;
    Ok(ec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectome::three_node_sc;
    use crate::jansen_rit::{twin_windows, JrParams, PerturbationSpec};
    use crate::models::{ForecasterConfig, ModelKind};

    fn twins(n_windows: usize, magnitude: f64) -> TwinSet {
        let spec = PerturbationSpec {
            magnitude,
            ..PerturbationSpec::default()
        };
        twin_windows(&JrParams::default(), &three_node_sc(), n_windows, &spec, 5).unwrap()
    }

    fn model() -> Forecaster<f32> {
        Forecaster::new(ForecasterConfig::new(ModelKind::Cnn, 8, 3), 1).unwrap()
    }

    #[test]
    fn generative_pairs_differ_only_at_kick() {
        let p = PerturbationPairs::from_twins(&twins(4, 0.1), 76).unwrap();
        assert_eq!(p.n_windows(), 4);
        for (a, pert) in p.perturbed.iter().enumerate() {
            for row in 0..p.clean.n_steps() {
                for c in 0..3 {
                    let d = pert.row(row)[c] - p.clean.row(row)[c];
                    if row % 76 == 75 && c == a {
                        assert!((d - 10.8).abs() < 1e-9, "{d}");
                    } else {
                        assert_eq!(d, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_delta_gives_zero_ec() {
        let pairs = PerturbationPairs::from_twins(&twins(3, 0.0), 76).unwrap();
        let ec = infer_ec(&model(), &pairs, None).unwrap();
        assert!(ec.values().iter().all(|v| *v == 0.0));
        let direct = PerturbationPairs::direct(pairs.clean.clone(), 76, 0.0, 76).unwrap();
        let ec = infer_ec(&model(), &direct, None).unwrap();
        assert!(ec.values().iter().all(|v| *v == 0.0));
        assert_eq!(ec.mode, EcMode::Direct);
    }

    #[test]
    fn zero_readout_gives_zero_ec() {
        let mut m = model();
        m.param_mut("readout.weight").unwrap().data_mut().fill(0.0);
        let pairs = PerturbationPairs::from_twins(&twins(2, 0.1), 76).unwrap();
        let ec = infer_ec(&m, &pairs, None).unwrap();
        assert!(ec.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn repeated_calls_agree_bitwise() {
        let pairs = PerturbationPairs::from_twins(&twins(120, 0.1), 76).unwrap();
        let a = infer_ec(&model(), &pairs, None).unwrap();
        let b = infer_ec(&model(), &pairs, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_samples, 120);
        assert!(a.values().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn normalization_maps_back_to_raw_units() {
        // For a linear readout on the last context row, scaling inputs by
        // 1/s and outputs by s must leave the EC unchanged.
        let pairs = PerturbationPairs::from_twins(&twins(5, 0.1), 76).unwrap();
        let m = Forecaster::<f64>::new(ForecasterConfig::new(ModelKind::Rnn, 8, 3), 2).unwrap();
        let id = Affine {
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
        };
        assert_eq!(
            infer_ec(&m, &pairs, Some(&id)).unwrap(),
            infer_ec(&m, &pairs, None).unwrap()
        );
    }

    #[test]
    fn direct_pairs_layout() {
        let clean = TimeSeries::new(2, vec![0.0; 2 * 4 * 3], 100.0, 0).unwrap();
        let p = PerturbationPairs::direct(clean, 4, 0.5, 4).unwrap();
        assert_eq!(p.perturbed[1].row(3), &[0.0, 0.5]);
        assert_eq!(p.perturbed[1].row(7), &[0.0, 0.5]);
        assert_eq!(p.perturbed[0].row(2), &[0.0, 0.0]);
        let clean = TimeSeries::new(2, vec![0.0; 10], 100.0, 0).unwrap();
        assert!(PerturbationPairs::direct(clean.clone(), 4, 0.1, 4).is_err());
        assert!(PerturbationPairs::direct(clean, 5, 0.1, 6).is_err());
    }

    #[test]
    fn rejects_missing_sources_and_shapes() {
        let mut pairs = PerturbationPairs::from_twins(&twins(2, 0.1), 76).unwrap();
        let wrong = Forecaster::<f32>::new(ForecasterConfig::new(ModelKind::Cnn, 8, 2), 1).unwrap();
        assert!(matches!(infer_ec(&wrong, &pairs, None), Err(Error::Shape { .. })));
        pairs.perturbed.pop();
        assert!(infer_ec(&model(), &pairs, None).is_err());
    }

    #[test]
    fn pairs_roundtrip_on_disk() {
        let pairs = PerturbationPairs::from_twins(&twins(3, 0.1), 76).unwrap();
        let dir = tempfile::tempdir().unwrap();
        pairs.save(dir.path()).unwrap();
        assert!(dir.path().join("perturbed_2.bin").exists());
        let back = PerturbationPairs::load(dir.path()).unwrap();
        assert_eq!(back.n_windows(), 3);
        assert_eq!(back.mode, EcMode::Generative);
        let (a, b) = (
            infer_ec(&model(), &pairs, None).unwrap(),
            infer_ec(&model(), &back, None).unwrap(),
        );
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-3);
        }
    }
}
