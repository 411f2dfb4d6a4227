//! Vector autoregression with a constant, BIC order selection and
//! conditional Granger causality.
//!
//! Every fit goes through one triangular factor `R` of the augmented
//! design `[1, y_{t-1}, .., y_{t-p} | y_t]`, accumulated block by block.
//! Nested lag orders are leading column blocks of `R`, so all candidate
//! orders share one effective sample and one factorization.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::series::TimeSeries;

const BLOCK: usize = 2048;

/// Upper-triangular factor of the lagged design over rows `first..`, with
/// `p` lags and the targets appended as the last `n` columns.
struct Design {
    r: DMatrix<f64>,
    n: usize,
    p: usize,
    t_eff: usize,
}

impl Design {
    fn new(ts: &TimeSeries, p: usize, first: usize) -> Result<Self> {
        let n = ts.n_channels();
        let k = 1 + n * p;
        let cols = k + n;
        let steps = ts.n_steps();
        if first < p || steps <= first || steps - first <= k {
            return Err(Error::invalid(format!(
                "{steps} steps are too few for a VAR({p}) on {n} channels"
            )));
        }
        let mut r = DMatrix::<f64>::zeros(0, cols);
        let mut t = first;
        while t < steps {
            let end = (t + BLOCK).min(steps);
            let mut m = DMatrix::<f64>::zeros(r.nrows() + end - t, cols);
            m.view_mut((0, 0), (r.nrows(), cols)).copy_from(&r);
            for (row, s) in (r.nrows()..).zip(t..end) {
                m[(row, 0)] = 1.0;
                for l in 0..p {
                    for (j, v) in ts.row(s - l - 1).iter().enumerate() {
                        m[(row, 1 + l * n + j)] = *v;
                    }
                }
                for (j, v) in ts.row(s).iter().enumerate() {
                    m[(row, k + j)] = *v;
                }
            }
            r = m.qr().r();
            t = end;
        }
        let scale = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
        if (0..k).any(|i| r[(i, i)].abs() <= 1e-10 * scale) {
            return Err(Error::Singular(format!(
                "VAR({p}) regressors are rank deficient; try a smaller order"
            )));
        }
        Ok(Self {
            r,
            n,
            p,
            t_eff: steps - first,
        })
    }

    fn k(&self) -> usize {
        1 + self.n * self.p
    }

    /// Residual covariance (ML, divided by `t_eff`) using the first `m`
    /// regressors.
    fn sigma(&self, m: usize) -> DMatrix<f64> {
        let k = self.k();
        let tail = self.r.view((m, k), (self.r.nrows() - m, self.n));
        tail.transpose() * tail / self.t_eff as f64
    }

    /// Residual sum of squares of target `i` regressed on the columns in
    /// `keep`.
    fn ssr(&self, i: usize, keep: &[usize]) -> Result<f64> {
        let k = self.k();
        let full: f64 = (k..self.r.nrows()).map(|r| self.r[(r, k + i)].powi(2)).sum();
        if keep.len() == k {
            return Ok(full);
        }
        let a = DMatrix::from_fn(k, keep.len(), |r, c| self.r[(r, keep[c])]);
        let b = DVector::from_fn(k, |r, _| self.r[(r, k + i)]);
        let x = a
            .clone()
            .svd(true, true)
            .solve(&b, 1e-12)
            .map_err(|e| Error::Singular(format!("restricted fit: {e}")))?;
        Ok(full + (b - a * x).norm_squared())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarModel {
    pub n: usize,
    pub p: usize,
    /// Intercept per equation.
    pub c: Vec<f64>,
    /// `a[l][i * n + j]`: weight of `y_{t-l-1}[j]` in equation `i`.
    pub a: Vec<Vec<f64>>,
    /// Standard errors, laid out as `c` followed by `a`.
    pub c_se: Vec<f64>,
    pub a_se: Vec<Vec<f64>>,
    /// Residual covariance, `n x n`, maximum-likelihood scaling.
    pub sigma: Vec<f64>,
    pub t_eff: usize,
    pub log_likelihood: f64,
    pub bic: f64,
}

fn log_det(m: &DMatrix<f64>) -> Result<f64> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("residual covariance is not positive definite".into()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

fn bic(log_det: f64, t_eff: usize, p: usize, n: usize) -> f64 {
    let t = t_eff as f64;
    log_det + t.ln() / t * (p * n * n + n) as f64
}

/// Ordinary least squares per equation over rows `p..`.
pub fn fit_var(ts: &TimeSeries, p: usize) -> Result<VarModel> {
    let d = Design::new(ts, p, p)?;
    let (n, k) = (d.n, d.k());
    let rxx = d.r.view((0, 0), (k, k)).into_owned();
    let rxy = d.r.view((0, k), (k, n)).into_owned();
    let coef = rxx
        .solve_upper_triangular(&rxy)
        .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
    let sigma = d.sigma(k);
    let rinv = rxx
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| Error::Singular("triangular inverse failed".into()))?;
    // (X'X)^-1 = R^-1 R^-T; residual variance uses the unbiased divisor.
    let xtx_inv_diag: Vec<f64> = (0..k).map(|r| rinv.row(r).norm_squared()).collect();
    let dof = (d.t_eff - k) as f64;
    let se = |row: usize, eq: usize| (sigma[(eq, eq)] * d.t_eff as f64 / dof * xtx_inv_diag[row]).sqrt();
    let ld = log_det(&sigma)?;
    let t = d.t_eff as f64;
    Ok(VarModel {
        n,
        p,
        c: (0..n).map(|i| coef[(0, i)]).collect(),
        a: (0..p)
            .map(|l| (0..n * n).map(|e| coef[(1 + l * n + e % n, e / n)]).collect())
            .collect(),
        c_se: (0..n).map(|i| se(0, i)).collect(),
        a_se: (0..p)
            .map(|l| (0..n * n).map(|e| se(1 + l * n + e % n, e / n)).collect())
            .collect(),
        sigma: sigma.iter().copied().collect(),
        t_eff: d.t_eff,
        log_likelihood: -0.5 * t * (n as f64 * (2.0 * std::f64::consts::PI).ln() + ld + n as f64),
        bic: bic(ld, d.t_eff, p, n),
    })
}

impl VarModel {
    /// One-step prediction of row `t` from the `p` rows before it.
    pub fn predict(&self, ts: &TimeSeries, t: usize) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| {
                let mut v = self.c[i];
                for l in 0..self.p {
                    let prev = ts.row(t - l - 1);
                    v += (0..n).map(|j| self.a[l][i * n + j] * prev[j]).sum::<f64>();
                }
                v
            })
            .collect()
    }

    pub fn residuals(&self, ts: &TimeSeries) -> Vec<f64> {
        (self.p..ts.n_steps())
            .flat_map(|t| {
                let pred = self.predict(ts, t);
                ts.row(t).iter().zip(pred).map(|(y, f)| y - f).collect::<Vec<_>>()
            })
            .collect()
    }
}

/// BIC of every order `1..=max_p` on the common sample `max_p..`.
pub fn bic_curve(ts: &TimeSeries, max_p: usize) -> Result<Vec<f64>> {
    if max_p == 0 {
        return Err(Error::invalid("max_p must be at least 1"));
    }
    let d = Design::new(ts, max_p, max_p)?;
    (1..=max_p)
        .map(|p| Ok(bic(log_det(&d.sigma(1 + d.n * p))?, d.t_eff, p, d.n)))
        .collect()
}

/// Order with the smallest BIC; ties go to the smaller order.
pub fn select_order(ts: &TimeSeries, max_p: usize) -> Result<usize> {
    let curve = bic_curve(ts, max_p)?;
    let mut best = 0;
    for (i, v) in curve.iter().enumerate() {
        if *v < curve[best] {
            best = i;
        }
    }
    Ok(best + 1)
}

/// `gc[i * n + j]` = ln(restricted / full residual variance of `i` when
/// the lags of `j` are dropped). The diagonal is zero.
pub fn gc_matrix(ts: &TimeSeries, p: usize) -> Result<Vec<f64>> {
    if p == 0 {
        return Err(Error::invalid("Granger causality needs at least one lag"));
    }
    let d = Design::new(ts, p, p)?;
    let (n, k) = (d.n, d.k());
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let full = d.ssr(i, &(0..k).collect::<Vec<_>>())?;
        for j in (0..n).filter(|j| *j != i) {
            let keep: Vec<usize> = (0..k).filter(|c| *c == 0 || (c - 1) % n != j).collect();
            out[i * n + j] = (d.ssr(i, &keep)? / full).ln();
        }
    }
    Ok(out)
}

/// Simulates `y_t = c + sum_l A_l y_{t-l} + e_t`, `e_t ~ N(0, noise_sd^2 I)`,
/// from a zero start, discarding `burn` leading steps.
pub fn simulate_var(
    c: &[f64],
    a: &[Vec<f64>],
    noise_sd: f64,
    steps: usize,
    burn: usize,
    seed: u64,
) -> Result<TimeSeries> {
    let n = c.len();
    let p = a.len();
    if a.iter().any(|m| m.len() != n * n) {
        return Err(Error::invalid("coefficient matrices must be n x n"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = steps + burn + p;
    let mut y = vec![0.0; total * n];
    for t in p..total {
        for i in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            let mut v = c[i] + noise_sd * e;
            for (l, m) in a.iter().enumerate() {
                let prev = &y[(t - l - 1) * n..(t - l) * n];
                v += (0..n).map(|j| m[i * n + j] * prev[j]).sum::<f64>();
            }
            y[t * n + i] = v;
        }
    }
    TimeSeries::new(n, y[(burn + p) * n..].to_vec(), 1.0, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var1() -> (Vec<f64>, Vec<Vec<f64>>) {
        (vec![0.5, -0.2], vec![vec![0.5, 0.1, -0.2, 0.3]])
    }

    fn var2() -> (Vec<f64>, Vec<Vec<f64>>) {
        (
            vec![0.0, 0.1, -0.1],
            vec![
                vec![0.4, 0.1, 0.0, 0.0, 0.3, 0.2, 0.1, 0.0, 0.2],
                vec![-0.3, 0.0, 0.1, 0.2, -0.2, 0.0, 0.0, 0.1, 0.25],
            ],
        )
    }

    #[test]
    fn recovers_var1() {
        let (c, a) = var1();
        let ts = simulate_var(&c, &a, 1.0, 100_000, 100, 1).unwrap();
        let m = fit_var(&ts, 1).unwrap();
        for (x, y) in m.a[0].iter().zip(&a[0]) {
            assert!((x - y).abs() < 1e-2, "{x} vs {y}");
        }
        for (x, y) in m.c.iter().zip(&c) {
            assert!((x - y).abs() < 2e-2, "{x} vs {y}");
        }
    }

    #[test]
    fn residuals_orthogonal_to_regressors() {
        let (c, a) = var2();
        let ts = simulate_var(&c, &a, 0.5, 5_000, 50, 2).unwrap();
        let m = fit_var(&ts, 2).unwrap();
        let e = m.residuals(&ts);
        let n = 3;
        for i in 0..n {
            let ei: Vec<f64> = e.iter().skip(i).step_by(n).copied().collect();
            let scale = ei.iter().map(|v| v.abs()).sum::<f64>();
            assert!(ei.iter().sum::<f64>().abs() < 1e-8 * scale);
            for l in 0..2 {
                for j in 0..n {
                    let dot: f64 = ei.iter().enumerate().map(|(t, v)| v * ts.row(t + 2 - l - 1)[j]).sum();
                    assert!(dot.abs() < 1e-8 * scale.max(1.0), "{dot}");
                }
            }
        }
    }

    #[test]
    fn replayed_residuals_reconstruct_series() {
        let (c, a) = var2();
        let ts = simulate_var(&c, &a, 0.5, 2_000, 50, 3).unwrap();
        let m = fit_var(&ts, 2).unwrap();
        let e = m.residuals(&ts);
        for t in 2..ts.n_steps() {
            let pred = m.predict(&ts, t);
            for i in 0..3 {
                assert!((pred[i] + e[(t - 2) * 3 + i] - ts.row(t)[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn white_noise_has_small_coefficients() {
        let ts = simulate_var(&[0.0; 3], &[], 1.0, 20_000, 0, 4).unwrap();
        let m = fit_var(&ts, 2).unwrap();
        for (coef, se) in m.a.iter().flatten().zip(m.a_se.iter().flatten()) {
            assert!(coef.abs() < 4.0 * se, "{coef} {se}");
        }
        assert_eq!(select_order(&ts, 6).unwrap(), 1);
    }

    #[test]
    fn order_zero_is_the_mean() {
        let ts = simulate_var(&[1.0, 2.0], &[vec![0.3, 0.0, 0.0, 0.3]], 1.0, 1000, 10, 5).unwrap();
        let m = fit_var(&ts, 0).unwrap();
        for ch in 0..2 {
            let x = ts.channel(ch);
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
            assert!((m.c[ch] - mean).abs() < 1e-10);
            assert!((m.sigma[ch * 2 + ch] - var).abs() < 1e-10);
        }
    }

    #[test]
    fn selects_true_order() {
        let (c, a) = var2();
        let ts = simulate_var(&c, &a, 1.0, 20_000, 100, 6).unwrap();
        assert_eq!(select_order(&ts, 8).unwrap(), 2);
        assert_eq!(select_order(&ts, 1).unwrap(), 1);
        assert!(select_order(&ts, 0).is_err());
    }

    #[test]
    fn selection_is_permutation_invariant() {
        let (c, a) = var2();
        let ts = simulate_var(&c, &a, 1.0, 5_000, 100, 7).unwrap();
        let perm = [2, 0, 1];
        let data = (0..ts.n_steps()).flat_map(|t| perm.map(|j| ts.row(t)[j])).collect();
        let shuffled = TimeSeries::new(3, data, 1.0, 0).unwrap();
        let (x, y) = (bic_curve(&ts, 6).unwrap(), bic_curve(&shuffled, 6).unwrap());
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).abs() < 1e-9);
        }
        assert_eq!(select_order(&ts, 6).unwrap(), select_order(&shuffled, 6).unwrap());
    }

    #[test]
    fn gc_finds_the_driver() {
        let ts = simulate_var(&[0.0, 0.0], &[vec![0.5, 0.0, 0.6, 0.3]], 1.0, 20_000, 100, 8).unwrap();
        let gc = gc_matrix(&ts, 2).unwrap();
        assert_eq!((gc[0], gc[3]), (0.0, 0.0));
        // gc[1 * 2 + 0]: channel 0 -> channel 1.
        assert!(gc[2] > 10.0 * gc[1].max(1e-6), "{gc:?}");
        assert!(gc.iter().all(|v| *v >= -1e-10));
    }

    #[test]
    fn gc_of_independent_channels_is_small() {
        let a = vec![vec![0.5, 0.0, 0.0, 0.0, -0.3, 0.0, 0.0, 0.0, 0.2]];
        let ts = simulate_var(&[0.0; 3], &a, 1.0, 10_000, 100, 9).unwrap();
        let gc = gc_matrix(&ts, 3).unwrap();
        assert!(gc.iter().all(|v| *v < 0.01 && *v >= -1e-10), "{gc:?}");
    }

    #[test]
    fn too_short_or_degenerate() {
        let ts = simulate_var(&[0.0; 3], &[], 1.0, 10, 0, 1).unwrap();
        assert!(fit_var(&ts, 4).is_err());
        let flat = TimeSeries::new(2, vec![1.0; 200], 1.0, 0).unwrap();
        assert!(matches!(fit_var(&flat, 1), Err(Error::Singular(_))));
    }
}
