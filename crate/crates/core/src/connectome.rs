//! Structural connectivity matrices.
//!
//! `m[i][j]` holds the strength of the projection from region `j` onto
//! region `i`. The simulator consumes the row-normalized form, where the
//! in-weights of every region with at least one afferent sum to one.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScMatrix {
    n: usize,
    weights: Vec<f64>,
    labels: Option<Vec<String>>,
}

impl ScMatrix {
    /// Builds a matrix from row-major weights, validating the invariants.
    pub fn from_rows(n: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != n * n {
            return Err(Error::Shape {
                op: "ScMatrix::from_rows",
                lhs: vec![n, n],
                rhs: vec![weights.len()],
            });
        }
        let sc = Self {
            n,
            weights,
            labels: None,
        };
        sc.validate()?;
        Ok(sc)
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            weights: vec![0.0; n * n],
            labels: None,
        }
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n {
            return Err(Error::invalid(format!(
                "{} labels for {} regions",
                labels.len(),
                self.n
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            for j in 0..self.n {
                let w = self.get(i, j);
                if !w.is_finite() {
                    return Err(Error::invalid(format!("non-finite weight at ({i}, {j})")));
                }
                if w < 0.0 {
                    return Err(Error::invalid(format!("negative weight {w} at ({i}, {j})")));
                }
                if i == j && w != 0.0 {
                    return Err(Error::invalid(format!("nonzero diagonal at ({i}, {i})")));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Weight of the projection `source -> target`.
    #[inline]
    pub fn get(&self, target: usize, source: usize) -> f64 {
        self.weights[target * self.n + source]
    }

    pub fn row(&self, target: usize) -> &[f64] {
        &self.weights[target * self.n..(target + 1) * self.n]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn nonzero_count(&self) -> usize {
        self.weights.iter().filter(|w| **w != 0.0).count()
    }

    pub fn in_degree(&self, target: usize) -> usize {
        self.row(target).iter().filter(|w| **w != 0.0).count()
    }

    pub fn out_degree(&self, source: usize) -> usize {
        (0..self.n).filter(|&i| self.get(i, source) != 0.0).count()
    }

    /// Row normalization: every row with a nonzero in-weight sums to one,
    /// rows without afferents stay zero.
    pub fn normalize(&self) -> ScMatrix {
        let mut weights = self.weights.clone();
        for row in weights.chunks_mut(self.n) {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|w| *w /= total);
            }
        }
        ScMatrix {
            n: self.n,
            weights,
            labels: self.labels.clone(),
        }
    }

    /// Reads an `n x n` comma-separated matrix. Lines starting with `#` are
    /// comments; the first such line, if it carries `n` comma-separated
    /// names, is taken as the region labels.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text).map_err(|e| match e {
            Error::Invalid(reason) => Error::format(path, reason),
            other => other,
        })
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut header = None;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if header.is_none() && rows.is_empty() {
                    header = Some(rest.trim().to_string());
                }
                continue;
            }
            let row = line
                .split(',')
                .map(|field| {
                    field.trim().parse::<f64>().map_err(|_| {
                        Error::invalid(format!(
                            "line {}: non-numeric field {:?}",
                            lineno + 1,
                            field.trim()
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let n = rows.len();
        if n == 0 {
            return Err(Error::invalid("empty connectome"));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::Shape {
                op: "ScMatrix::load",
                lhs: vec![n, n],
                rhs: vec![n, bad.len()],
            });
        }
        let sc = Self::from_rows(n, rows.into_iter().flatten().collect())?;
        let labels = header
            .map(|h| h.split(',').map(|s| s.trim().to_string()).collect::<Vec<_>>())
            .filter(|l| l.len() == n && l.iter().all(|s| !s.is_empty()));
        match labels {
            Some(l) => sc.with_labels(l),
            None => Ok(sc),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if let Some(labels) = &self.labels {
            let _ = writeln!(out, "# {}", labels.join(","));
        }
        for row in self.weights.chunks(self.n) {
            let fields: Vec<String> = row.iter().map(|w| format!("{w}")).collect();
            let _ = writeln!(out, "{}", fields.join(","));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// The three-region toy topology: region 0 projects onto regions 1 and 2.
pub fn three_node_sc() -> ScMatrix {
    let mut sc = ScMatrix::zeros(3);
    sc.weights[3] = 1.0;
    sc.weights[2 * 3] = 1.0;
    sc
}

/// Random sparse connectome: each off-diagonal entry is present with
/// probability `density`, weights drawn from `(0, 1]`.
pub fn random_sc(n: usize, density: f64, seed: u64) -> Result<ScMatrix> {
    if n < 2 {
        return Err(Error::invalid(format!("random_sc needs n >= 2, got {n}")));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::invalid(format!("density {density} outside (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sc = ScMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if rng.random::<f64>() < density {
                // random::<f64>() is in [0, 1); flip to (0, 1].
                sc.weights[i * n + j] = 1.0 - rng.random::<f64>();
            }
        }
    }
    if sc.nonzero_count() == 0 {
        let i = rng.random_range(0..n);
        let j = (i + 1 + rng.random_range(0..n - 1)) % n;
        sc.weights[i * n + j] = 1.0 - rng.random::<f64>();
    }
    Ok(sc)
}
