//! Time-resolved effective connectivity tensors.
//!
//! `delta[t][target][source]` is the mean response of `target` at horizon
//! step `t + 1` to a perturbation of `source`. The `NPIEC` container
//! stores magic, `u32` version, `u32` horizon, `u32` region count, `f64`
//! perturbation magnitude, `u32` mode tag, then the tensor as `f32`.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::series::{read_array, read_u32};

pub const EC_MAGIC: &[u8; 5] = b"NPIEC";
pub const EC_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EcMode {
    /// Twin simulations of the generative model.
    GroundTruth,
    /// Model fed contexts from perturbed twin simulations.
    Generative,
    /// Impulse added to the observed channel of the context.
    Direct,
}

impl EcMode {
    fn tag(self) -> u32 {
        match self {
            EcMode::GroundTruth => 0,
            EcMode::Generative => 1,
            EcMode::Direct => 2,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(EcMode::GroundTruth),
            1 => Some(EcMode::Generative),
            2 => Some(EcMode::Direct),
            _ => None,
        }
    }
}

impl fmt::Display for EcMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EcMode::GroundTruth => "ground-truth",
            EcMode::Generative => "generative",
            EcMode::Direct => "direct",
        })
    }
}

impl FromStr for EcMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground-truth" => Ok(EcMode::GroundTruth),
            "generative" => Ok(EcMode::Generative),
            "direct" => Ok(EcMode::Direct),
            other => Err(Error::invalid(format!("unknown EC mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcTensor {
    horizon: usize,
    n: usize,
    delta: Vec<f64>,
    pub magnitude: f64,
    pub mode: EcMode,
    pub n_samples: usize,
}

impl EcTensor {
    pub fn zeros(horizon: usize, n: usize, magnitude: f64, mode: EcMode) -> Self {
        Self {
            horizon,
            n,
            delta: vec![0.0; horizon * n * n],
            magnitude,
            mode,
            n_samples: 0,
        }
    }

    pub fn from_values(
        horizon: usize,
        n: usize,
        delta: Vec<f64>,
        magnitude: f64,
        mode: EcMode,
    ) -> Result<Self> {
        if delta.len() != horizon * n * n {
            return Err(Error::Shape {
                op: "EcTensor::from_values",
                lhs: vec![horizon, n, n],
                rhs: vec![delta.len()],
            });
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("EC tensor entry".into()));
        }
        Ok(Self {
            horizon,
            n,
            delta,
            magnitude,
            mode,
            n_samples: 0,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.delta
    }

    #[inline]
    fn index(&self, t: usize, target: usize, source: usize) -> usize {
        (t * self.n + target) * self.n + source
    }

    /// `t` is zero-based (horizon step `t + 1`).
    pub fn get(&self, t: usize, target: usize, source: usize) -> f64 {
        self.delta[self.index(t, target, source)]
    }

    pub fn set(&mut self, t: usize, target: usize, source: usize, value: f64) {
        let i = self.index(t, target, source);
        self.delta[i] = value;
    }

    /// The `n x n` slice at zero-based horizon step `t`.
    pub fn slice(&self, t: usize) -> &[f64] {
        let sz = self.n * self.n;
        &self.delta[t * sz..(t + 1) * sz]
    }

    /// Response curve `target <- source` over the horizon.
    pub fn curve(&self, target: usize, source: usize) -> Vec<f64> {
        (0..self.horizon)
            .map(|t| self.get(t, target, source))
            .collect()
    }

    /// Mean of `|delta|` over the horizon for one pair.
    pub fn pooled_abs(&self, target: usize, source: usize) -> f64 {
        self.curve(target, source).iter().map(|v| v.abs()).sum::<f64>() / self.horizon as f64
    }

    /// Collapses the horizon. With `t_pick` (one-based) the slice at that
    /// step is returned; otherwise each pair keeps the signed value of
    /// largest magnitude across the horizon.
    pub fn summary(&self, t_pick: Option<usize>) -> Result<Vec<f64>> {
        match t_pick {
            Some(t) if t == 0 || t > self.horizon => Err(Error::invalid(format!(
                "time step {t} outside 1..={}",
                self.horizon
            ))),
            Some(t) => Ok(self.slice(t - 1).to_vec()),
            None => {
                let mut out = vec![0.0; self.n * self.n];
                for t in 0..self.horizon {
                    for (o, &v) in out.iter_mut().zip(self.slice(t)) {
                        if v.abs() > f64::abs(*o) {
                            *o = v;
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(29 + self.delta.len() * 4);
        out.extend_from_slice(EC_MAGIC);
        out.extend_from_slice(&EC_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.horizon as u32).to_le_bytes());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&self.magnitude.to_le_bytes());
        out.extend_from_slice(&self.mode.tag().to_le_bytes());
        for v in &self.delta {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> std::result::Result<Self, String> {
        let magic: [u8; 5] = read_array(&mut bytes)?;
        if &magic != EC_MAGIC {
            return Err("bad magic".into());
        }
        let version = read_u32(&mut bytes)?;
        if version != EC_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let horizon = read_u32(&mut bytes)? as usize;
        let n = read_u32(&mut bytes)? as usize;
        let magnitude = f64::from_le_bytes(read_array(&mut bytes)?);
        let tag = read_u32(&mut bytes)?;
        let mode = EcMode::from_tag(tag).ok_or_else(|| format!("unknown mode tag {tag}"))?;
        if bytes.len() != horizon * n * n * 4 {
            return Err(format!("payload has {} bytes", bytes.len()));
        }
        let delta = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        EcTensor::from_values(horizon, n, delta, magnitude, mode).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::format(path, reason))
    }
}

/// Writes an `n x n` matrix as CSV, rows are targets and columns sources.
pub fn matrix_to_csv(n: usize, values: &[f64]) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..n).map(|j| format!("from{j}")).collect();
    let _ = writeln!(out, "target,{}", header.join(","));
    for (i, row) in values.chunks(n).enumerate() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{i},{}", fields.join(","));
    }
    out
}

/// Reads a matrix written by [`matrix_to_csv`].
pub fn parse_matrix_csv(text: &str) -> Result<(usize, Vec<f64>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::invalid("empty matrix CSV"))?;
    let n = header.split(',').count().saturating_sub(1);
    if n == 0 {
        return Err(Error::invalid("matrix CSV header has no source columns"));
    }
    let mut values = Vec::with_capacity(n * n);
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != n + 1 {
            return Err(Error::invalid(format!("matrix row {i} has {} fields", fields.len())));
        }
        for f in &fields[1..] {
            values.push(
                f.parse::<f64>()
                    .map_err(|_| Error::invalid(format!("matrix row {i}: bad number {f:?}")))?,
            );
        }
    }
    if values.len() != n * n {
        return Err(Error::invalid(format!("expected {n} matrix rows")));
    }
    Ok((n, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(horizon: usize, n: usize) -> EcTensor {
        let delta = (0..horizon * n * n).map(|i| (i as f64 - 7.0) * 0.25).collect();
        EcTensor::from_values(horizon, n, delta, 0.1, EcMode::Direct).unwrap()
    }

    #[test]
    fn summary_single_step_is_slice() {
        let ec = ramp(1, 3);
        assert_eq!(ec.summary(None).unwrap(), ec.slice(0));
        assert_eq!(ec.summary(Some(1)).unwrap(), ec.slice(0));
    }

    #[test]
    fn summary_of_zero_is_zero() {
        let ec = EcTensor::zeros(24, 3, 0.1, EcMode::GroundTruth);
        assert!(ec.summary(None).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn summary_keeps_sign_of_peak() {
        let mut ec = EcTensor::zeros(3, 2, 0.1, EcMode::Direct);
        ec.set(0, 1, 0, 0.5);
        ec.set(2, 1, 0, -0.9);
        assert_eq!(ec.summary(None).unwrap()[2], -0.9);
    }

    #[test]
    fn summary_rejects_bad_step() {
        let ec = ramp(4, 2);
        assert!(ec.summary(Some(0)).is_err());
        assert!(ec.summary(Some(5)).is_err());
    }

    #[test]
    fn binary_roundtrip() {
        let ec = ramp(24, 3);
        let back = EcTensor::from_bytes(&ec.to_bytes()).unwrap();
        assert_eq!(back.values(), ec.values());
        assert_eq!(back.mode, EcMode::Direct);
        assert_eq!(back.magnitude, 0.1);
        assert_eq!(&ec.to_bytes()[..5], b"NPIEC");
    }

    #[test]
    fn csv_layout() {
        assert_eq!(
            matrix_to_csv(2, &[0.0, 1.0, 2.0, 0.0]),
            "target,from0,from1\n0,0,1\n1,2,0\n"
        );
        let m = [0.0, -1.5, 2.25, 0.0];
        assert_eq!(parse_matrix_csv(&matrix_to_csv(2, &m)).unwrap(), (2, m.to_vec()));
        assert!(parse_matrix_csv("target,from0\n0,x\n").is_err());
        assert!(parse_matrix_csv("target,from0,from1\n0,1,2\n").is_err());
    }
}
