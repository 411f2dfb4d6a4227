//! Multichannel observable series and the `NPITS` binary container.
//!
//! Layout (little-endian): magic `NPITS`, `u32` version, `u32` channel
//! count, `u64` step count, `f64` sample rate, `u64` seed, then the
//! samples as row-major `f32`.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const TS_MAGIC: &[u8; 5] = b"NPITS";
pub const TS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    n_channels: usize,
    data: Vec<f64>,
    pub rate: f64,
    pub seed: u64,
}

impl TimeSeries {
    pub fn new(n_channels: usize, data: Vec<f64>, rate: f64, seed: u64) -> Result<Self> {
        if n_channels == 0 || !data.len().is_multiple_of(n_channels) {
            return Err(Error::Shape {
                op: "TimeSeries::new",
                lhs: vec![n_channels],
                rhs: vec![data.len()],
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "sample {} channel {}",
                pos / n_channels,
                pos % n_channels
            )));
        }
        Ok(Self {
            n_channels,
            data,
            rate,
            seed,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_steps(&self) -> usize {
        self.data.len() / self.n_channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, step: usize) -> &[f64] {
        &self.data[step * self.n_channels..(step + 1) * self.n_channels]
    }

    /// Rows `start..start + len` as a contiguous row-major slice.
    pub fn rows(&self, start: usize, len: usize) -> &[f64] {
        &self.data[start * self.n_channels..(start + len) * self.n_channels]
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.n_channels)
            .copied()
            .collect()
    }

    /// Keeps the rows `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> TimeSeries {
        TimeSeries {
            n_channels: self.n_channels,
            data: self.rows(start, len).to_vec(),
            rate: self.rate,
            seed: self.seed,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(33 + self.data.len() * 4);
        out.extend_from_slice(TS_MAGIC);
        out.extend_from_slice(&TS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_steps() as u64).to_le_bytes());
        out.extend_from_slice(&self.rate.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut magic = [0u8; 5];
        bytes.read_exact(&mut magic).map_err(|e| e.to_string())?;
        if &magic != TS_MAGIC {
            return Err("bad magic".into());
        }
        let version = read_u32(&mut bytes)?;
        if version != TS_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let n_channels = read_u32(&mut bytes)? as usize;
        let n_steps = read_u64(&mut bytes)? as usize;
        let rate = f64::from_le_bytes(read_array(&mut bytes)?);
        let seed = read_u64(&mut bytes)?;
        let count = n_channels
            .checked_mul(n_steps)
            .ok_or("sample count overflows")?;
        if bytes.len() != count * 4 {
            return Err(format!(
                "payload has {} bytes, header promises {}",
                bytes.len(),
                count * 4
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        TimeSeries::new(n_channels, data, rate, seed).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::format(path, reason))
    }

    /// One column per channel with a `ch0,ch1,...` header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.n_channels).map(|c| format!("ch{c}")).collect();
        let _ = writeln!(out, "{}", header.join(","));
        for row in self.data.chunks(self.n_channels) {
            let fields: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{}", fields.join(","));
        }
        out
    }
}

pub(crate) fn read_array<const N: usize>(
    bytes: &mut &[u8],
) -> std::result::Result<[u8; N], String> {
    let mut buf = [0u8; N];
    bytes
        .read_exact(&mut buf)
        .map_err(|_| "truncated header".to_string())?;
    Ok(buf)
}

pub(crate) fn read_u32(bytes: &mut &[u8]) -> std::result::Result<u32, String> {
    Ok(u32::from_le_bytes(read_array(bytes)?))
}

pub(crate) fn read_u64(bytes: &mut &[u8]) -> std::result::Result<u64, String> {
    Ok(u64::from_le_bytes(read_array(bytes)?))
}
