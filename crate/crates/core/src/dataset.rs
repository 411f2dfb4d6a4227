//! Fixed-length windows cut from a simulated series.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::TimeSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub total_len: usize,
    pub context_len: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            total_len: 100,
            context_len: 76,
            horizon: 24,
            stride: 100,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.context_len + self.horizon != self.total_len {
            return Err(Error::invalid(format!(
                "context {} + horizon {} != window {}",
                self.context_len, self.horizon, self.total_len
            )));
        }
        if self.stride == 0 || self.context_len == 0 || self.horizon == 0 {
            return Err(Error::invalid("stride, context and horizon must be positive"));
        }
        Ok(())
    }

    /// Parses `context:horizon:stride`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let nums = parts
            .iter()
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::invalid(format!("bad window spec {s:?}")))?;
        let spec = match nums.as_slice() {
            [c, h, stride] => WindowSpec {
                total_len: c + h,
                context_len: *c,
                horizon: *h,
                stride: *stride,
            },
            _ => return Err(Error::invalid(format!("window spec {s:?} is not context:horizon:stride"))),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn count(&self, series_len: usize) -> usize {
        if series_len < self.total_len {
            0
        } else {
            (series_len - self.total_len) / self.stride + 1
        }
    }
}

/// Per-channel affine map `z = (v - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Affine {
    pub fn apply(&self, rows: &mut [f64]) {
        let n = self.mean.len();
        for (i, v) in rows.iter_mut().enumerate() {
            *v = (*v - self.mean[i % n]) / self.std[i % n];
        }
    }

    pub fn invert(&self, rows: &mut [f64]) {
        let n = self.mean.len();
        for (i, v) in rows.iter_mut().enumerate() {
            *v = *v * self.std[i % n] + self.mean[i % n];
        }
    }

    /// Scales a difference of two mapped values back to raw units.
    pub fn invert_delta(&self, rows: &mut [f64]) {
        let n = self.std.len();
        for (i, v) in rows.iter_mut().enumerate() {
            *v *= self.std[i % n];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    spec: WindowSpec,
    n_channels: usize,
    /// Windows of `total_len` rows, back to back.
    data: Vec<f64>,
    /// First source row of each window.
    starts: Vec<usize>,
    pub normalization: Option<Affine>,
    pub source_seed: u64,
}

impl Dataset {
    pub fn from_windows(
        spec: WindowSpec,
        n_channels: usize,
        data: Vec<f64>,
        starts: Vec<usize>,
        source_seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        if data.len() != starts.len() * spec.total_len * n_channels {
            return Err(Error::Shape {
                op: "Dataset::from_windows",
                lhs: vec![starts.len(), spec.total_len, n_channels],
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset sample".into()));
        }
        Ok(Self {
            spec,
            n_channels,
            data,
            starts,
            normalization: None,
            source_seed,
        })
    }

    pub fn spec(&self) -> &WindowSpec {
        &self.spec
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn window(&self, k: usize) -> &[f64] {
        let sz = self.spec.total_len * self.n_channels;
        &self.data[k * sz..(k + 1) * sz]
    }

    /// `context_len x n` rows of window `k`.
    pub fn context(&self, k: usize) -> &[f64] {
        &self.window(k)[..self.spec.context_len * self.n_channels]
    }

    /// `horizon x n` rows of window `k`.
    pub fn target(&self, k: usize) -> &[f64] {
        &self.window(k)[self.spec.context_len * self.n_channels..]
    }

    fn subset(&self, range: std::ops::Range<usize>) -> Dataset {
        let sz = self.spec.total_len * self.n_channels;
        Dataset {
            spec: self.spec,
            n_channels: self.n_channels,
            data: self.data[range.start * sz..range.end * sz].to_vec(),
            starts: self.starts[range].to_vec(),
            normalization: self.normalization.clone(),
            source_seed: self.source_seed,
        }
    }

    fn map_values(&mut self, f: impl Fn(&mut [f64])) {
        f(&mut self.data);
    }
}

/// Cuts `floor((len - total_len) / stride) + 1` windows; window `k`
/// starts at row `k * stride`.
pub fn make_windows(ts: &TimeSeries, spec: &WindowSpec) -> Result<Dataset> {
    spec.validate()?;
    let count = spec.count(ts.n_steps());
    if count == 0 {
        return Err(Error::invalid(format!(
            "series of {} steps is shorter than one window of {}",
            ts.n_steps(),
            spec.total_len
        )));
    }
    let mut data = Vec::with_capacity(count * spec.total_len * ts.n_channels());
    let starts: Vec<usize> = (0..count).map(|k| k * spec.stride).collect();
    for &s in &starts {
        data.extend_from_slice(ts.rows(s, spec.total_len));
    }
    Dataset::from_windows(*spec, ts.n_channels(), data, starts, ts.seed)
}

/// Temporal split: the first `ceil(train_frac * N)` windows train.
pub fn split(ds: &Dataset, train_frac: f64) -> Result<(Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::invalid(format!("train fraction {train_frac} outside (0, 1)")));
    }
    let n = ds.len();
    // Guard against 0.7 * 10 = 7.000000000000001.
    let n_train = ((train_frac * n as f64) - 1e-9).ceil().max(0.0) as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::invalid(format!(
            "split of {n} windows at {train_frac} leaves an empty partition"
        )));
    }
    Ok((ds.subset(0..n_train), ds.subset(n_train..n)))
}

/// Per-channel z-scoring with statistics from `train` only.
pub fn standardize(train: &Dataset, others: &[&Dataset]) -> Result<(Dataset, Vec<Dataset>, Affine)> {
    let n = train.n_channels;
    let mut sum = vec![0.0; n];
    let mut sq = vec![0.0; n];
    let rows = train.data.len() / n;
    for row in train.data.chunks(n) {
        for c in 0..n {
            sum[c] += row[c];
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / rows as f64).collect();
    for row in train.data.chunks(n) {
        for c in 0..n {
            sq[c] += (row[c] - mean[c]).powi(2);
        }
    }
    let std: Vec<f64> = sq.iter().map(|s| (s / rows as f64).sqrt()).collect();
    if let Some(c) = std.iter().position(|s| !(*s > 1e-12)) {
        return Err(Error::ZeroVariance(c));
    }
    let affine = Affine { mean, std };
    let norm = |ds: &Dataset| -> Result<Dataset> {
        if ds.n_channels != n {
            return Err(Error::Shape {
                op: "standardize",
                lhs: vec![n],
                rhs: vec![ds.n_channels],
            });
        }
        let mut out = ds.clone();
        out.map_values(|d| affine.apply(d));
        out.normalization = Some(affine.clone());
        Ok(out)
    };
    let train_out = norm(train)?;
    let others_out = others.iter().map(|d| norm(d)).collect::<Result<_>>()?;
    Ok((train_out, others_out, affine))
}

/// Shuffled mini-batches of window indices. The order depends only on
/// `(seed, epoch)`; the final short batch is kept.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Batches {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Batches {
        order,
        batch_size: batch_size.max(1),
        pos: 0,
    }
}

#[derive(Debug, Clone)]
pub struct Batches {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }
}

/// Sidecar written next to the series in a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub window: WindowSpec,
    pub split: f64,
    pub normalization: Option<Affine>,
    pub source_seed: u64,
}

pub const DATASET_SERIES: &str = "series.bin";
pub const DATASET_META: &str = "dataset.json";

/// Train/validation windows plus their recipe.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub val: Dataset,
    pub meta: DatasetMeta,
}

impl DatasetSplit {
    pub fn build(ts: &TimeSeries, window: &WindowSpec, split_frac: f64, normalize: bool) -> Result<Self> {
        let all = make_windows(ts, window)?;
        let (train, val) = split(&all, split_frac)?;
        let (train, val, normalization) = if normalize {
            let (t, mut others, aff) = standardize(&train, &[&val])?;
            (t, others.remove(0), Some(aff))
        } else {
            (train, val, None)
        };
        Ok(Self {
            train,
            val,
            meta: DatasetMeta {
                window: *window,
                split: split_frac,
                normalization,
                source_seed: ts.seed,
            },
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>, ts: &TimeSeries) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        ts.save(dir.join(DATASET_SERIES))?;
        let meta = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| Error::invalid(e.to_string()))?;
        let path = dir.join(DATASET_META);
        fs::write(&path, meta + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Rebuilds the split from a dataset directory. Normalization is
    /// re-applied with the stored parameters.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(DATASET_META);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: DatasetMeta =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let ts = TimeSeries::load(dir.join(DATASET_SERIES))?;
        let all = make_windows(&ts, &meta.window)?;
        let (mut train, mut val) = split(&all, meta.split)?;
        if let Some(aff) = &meta.normalization {
            for ds in [&mut train, &mut val] {
                ds.map_values(|d| aff.apply(d));
                ds.normalization = Some(aff.clone());
            }
        }
        Ok(Self { train, val, meta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(steps: usize, n: usize) -> TimeSeries {
        let data = (0..steps * n).map(|i| i as f64).collect();
        TimeSeries::new(n, data, 100.0, 3).unwrap()
    }

    #[test]
    fn window_counts() {
        let spec = WindowSpec::default();
        assert_eq!(spec.count(900_000), 9_000);
        assert_eq!(make_windows(&ramp(100, 2), &spec).unwrap().len(), 1);
        assert_eq!(make_windows(&ramp(199, 2), &spec).unwrap().len(), 1);
        assert!(make_windows(&ramp(99, 2), &spec).is_err());
    }

    #[test]
    fn window_spec_parsing() {
        assert_eq!(WindowSpec::parse("76:24:100").unwrap(), WindowSpec::default());
        assert!(WindowSpec::parse("76:24").is_err());
        assert!(WindowSpec::parse("76:24:0").is_err());
        assert!(WindowSpec {
            total_len: 99,
            ..WindowSpec::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn split_counts() {
        let spec = WindowSpec::default();
        let ds = make_windows(&ramp(1000, 1), &spec).unwrap();
        let (train, val) = split(&ds, 0.7).unwrap();
        assert_eq!((train.len(), val.len()), (7, 3));
        assert!(train.starts().iter().max() < val.starts().iter().min());
        assert!(split(&ds, 0.0).is_err());
        assert!(split(&ds, 0.99).is_err());

        let big = Dataset::from_windows(
            spec,
            1,
            vec![0.0; 9_000 * 100],
            (0..9_000).map(|k| k * 100).collect(),
            0,
        )
        .unwrap();
        let (train, val) = split(&big, 0.7).unwrap();
        assert_eq!((train.len(), val.len()), (6_300, 2_700));
    }

    #[test]
    fn standardize_behaviour() {
        // Alternating +-1 per channel: zero mean, unit variance already.
        let data: Vec<f64> = (0..200 * 2).map(|i| if (i / 2) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let ts = TimeSeries::new(2, data, 100.0, 0).unwrap();
        let ds = make_windows(&ts, &WindowSpec::default()).unwrap();
        let (_, _, aff) = standardize(&ds, &[]).unwrap();
        for c in 0..2 {
            assert!(aff.mean[c].abs() < 1e-12);
            assert!((aff.std[c] - 1.0).abs() < 1e-12);
        }

        let constant = TimeSeries::new(2, (0..400).map(|i| if i % 2 == 0 { 1.0 } else { i as f64 }).collect(), 100.0, 0).unwrap();
        let ds = make_windows(&constant, &WindowSpec::default()).unwrap();
        assert!(matches!(standardize(&ds, &[]), Err(Error::ZeroVariance(0))));

        let ds = make_windows(&ramp(300, 3), &WindowSpec::default()).unwrap();
        let (normed, _, aff) = standardize(&ds, &[]).unwrap();
        let mut back = normed.window(1).to_vec();
        aff.invert(&mut back);
        for (a, b) in back.iter().zip(ds.window(1)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_examples() {
        let sizes: Vec<usize> = batches(90, 30, 1, 0).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![30, 30, 30]);
        let sizes: Vec<usize> = batches(31, 30, 1, 0).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![30, 1]);
        let a: Vec<_> = batches(50, 7, 9, 3).collect();
        let b: Vec<_> = batches(50, 7, 9, 3).collect();
        let c: Vec<_> = batches(50, 7, 9, 4).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut all: Vec<usize> = a.into_iter().flatten().collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ts = ramp(1000, 2);
        let built = DatasetSplit::build(&ts, &WindowSpec::default(), 0.7, true).unwrap();
        built.save(dir.path(), &ts).unwrap();
        let loaded = DatasetSplit::load(dir.path()).unwrap();
        assert_eq!(loaded.meta, built.meta);
        assert_eq!(loaded.train.len(), 7);
        for (a, b) in loaded.val.window(2).iter().zip(built.val.window(2)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn windows_reassemble_source(steps in 100usize..600, stride in 1usize..150, n in 1usize..4) {
            let ts = ramp(steps, n);
            let spec = WindowSpec { stride, ..WindowSpec::default() };
            let ds = make_windows(&ts, &spec).unwrap();
            prop_assert_eq!(ds.len(), (steps - 100) / stride + 1);
            for k in 0..ds.len() {
                let mut joined = ds.context(k).to_vec();
                joined.extend_from_slice(ds.target(k));
                prop_assert_eq!(&joined[..], ts.rows(k * stride, 100));
            }
        }
    }
}
