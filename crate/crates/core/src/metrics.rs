//! Prediction error, EC agreement, ERPs and the benchmark report.

use std::fmt::Write as _;

use crate::ec::EcTensor;
use crate::error::{Error, Result};

/// Mean squared difference over all entries.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape {
            op: "mse",
            lhs: vec![pred.len()],
            rhs: vec![target.len()],
        });
    }
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::invalid(format!(
            "correlation needs two equal-length vectors of at least 3 entries, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let len = x.len() as f64;
    let mx = x.iter().sum::<f64>() / len;
    let my = y.iter().sum::<f64>() / len;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("correlation of a constant vector is undefined"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Off-diagonal entries of a stack of `n x n` matrices.
pub fn off_diagonal(values: &[f64], n: usize) -> Vec<f64> {
    values
        .iter()
        .enumerate()
        .filter(|(i, _)| (i / n) % n != i % n)
        .map(|(_, v)| *v)
        .collect()
}

/// Pearson correlation over all off-diagonal entries of one or more
/// stacked `n x n` matrices.
pub fn ec_correlation(est: &[f64], real: &[f64], n: usize) -> Result<f64> {
    if est.len() != real.len() || n == 0 || !est.len().is_multiple_of(n * n) {
        return Err(Error::Shape {
            op: "ec_correlation",
            lhs: vec![est.len()],
            rhs: vec![real.len()],
        });
    }
    pearson(&off_diagonal(est, n), &off_diagonal(real, n))
}

fn check_pair(est: &EcTensor, real: &EcTensor) -> Result<()> {
    if est.n() != real.n() || est.horizon() != real.horizon() {
        return Err(Error::Shape {
            op: "ec_correlation",
            lhs: vec![est.horizon(), est.n(), est.n()],
            rhs: vec![real.horizon(), real.n(), real.n()],
        });
    }
    Ok(())
}

/// Correlation pooled over every horizon step.
pub fn ec_correlation_pooled(est: &EcTensor, real: &EcTensor) -> Result<f64> {
    check_pair(est, real)?;
    ec_correlation(est.values(), real.values(), est.n())
}

/// One correlation per horizon step.
pub fn ec_correlation_per_step(est: &EcTensor, real: &EcTensor) -> Result<Vec<f64>> {
    check_pair(est, real)?;
    (0..est.horizon())
        .map(|t| ec_correlation(est.slice(t), real.slice(t), est.n()))
        .collect()
}

/// Pointwise mean of equal-length response trials.
pub fn erp(trials: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = trials.first().ok_or_else(|| Error::invalid("no trials"))?;
    let mut out = vec![0.0; first.len()];
    for trial in trials {
        if trial.len() != out.len() {
            return Err(Error::Shape {
                op: "erp",
                lhs: vec![out.len()],
                rhs: vec![trial.len()],
            });
        }
        for (o, v) in out.iter_mut().zip(trial) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= trials.len() as f64);
    Ok(out)
}

/// `(m - min) / (max - min)`; for display only.
pub fn rescale01(m: &[f64]) -> Result<Vec<f64>> {
    let min = m.iter().copied().fold(f64::INFINITY, f64::min);
    let max = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Err(Error::invalid("cannot rescale a constant matrix"));
    }
    Ok(m.iter().map(|v| (v - min) / (max - min)).collect())
}

/// One benchmark row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub model: String,
    pub hidden: usize,
    pub prediction_mse: f64,
    pub ec_correlation_pooled: f64,
    pub ec_correlation_per_step: Vec<f64>,
}

impl MetricsRow {
    pub fn from_ec(model: &str, hidden: usize, prediction_mse: f64, est: &EcTensor, real: &EcTensor) -> Result<Self> {
        Ok(Self {
            model: model.to_string(),
            hidden,
            prediction_mse,
            ec_correlation_pooled: ec_correlation_pooled(est, real)?,
            ec_correlation_per_step: ec_correlation_per_step(est, real)?,
        })
    }
}

pub fn report_csv(rows: &[MetricsRow]) -> String {
    let steps = rows.iter().map(|r| r.ec_correlation_per_step.len()).max().unwrap_or(0);
    let mut out = String::from("model,hidden,prediction_mse,ec_correlation_pooled");
    for t in 1..=steps {
        let _ = write!(out, ",ec_correlation_t{t}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{}",
            r.model, r.hidden, r.prediction_mse, r.ec_correlation_pooled
        );
        for t in 0..steps {
            match r.ec_correlation_per_step.get(t) {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ec::EcMode;
    use proptest::prelude::*;

    #[test]
    fn mse_examples() {
        let t = [0.5, -1.0, 2.0];
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
        let shifted: Vec<f64> = t.iter().map(|v| v + 1.0).collect();
        assert!((mse(&shifted, &t).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 5.0);
        assert!(mse(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn correlation_examples() {
        let real = [0.0, 1.0, 2.0, 3.0, 0.0, 5.0, 6.0, -7.0, 0.0];
        assert!((ec_correlation(&real, &real, 3).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = real.iter().map(|v| -v).collect();
        assert!((ec_correlation(&neg, &real, 3).unwrap() + 1.0).abs() < 1e-12);
        let aff: Vec<f64> = real.iter().map(|v| 2.5 * v - 4.0).collect();
        assert!((ec_correlation(&aff, &real, 3).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_is_ignored() {
        let real = [0.0, 1.0, 2.0, 3.0, 0.0, 5.0, 6.0, -7.0, 0.0];
        let mut est = real;
        est[0] = 1e6;
        est[4] = -3e5;
        est[8] = 42.0;
        assert!((ec_correlation(&est, &real, 3).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(off_diagonal(&real, 3), vec![1.0, 2.0, 3.0, 5.0, 6.0, -7.0]);
    }

    #[test]
    fn correlation_rejects_degenerate_input() {
        let flat = [0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        let real = [0.0, 1.0, 2.0, 3.0, 0.0, 5.0, 6.0, -7.0, 0.0];
        assert!(ec_correlation(&flat, &real, 3).is_err());
        assert!(ec_correlation(&real[..4], &real[..4], 2).is_err());
        assert!(ec_correlation(&real, &real[..8], 3).is_err());
    }

    #[test]
    fn pooled_and_per_step() {
        let values: Vec<f64> = (0..2 * 9).map(|i| ((i * 5) % 7) as f64).collect();
        let a = EcTensor::from_values(2, 3, values.clone(), 0.1, EcMode::GroundTruth).unwrap();
        let b = EcTensor::from_values(2, 3, values.iter().map(|v| 3.0 * v + 1.0).collect(), 0.1, EcMode::Generative)
            .unwrap();
        assert!((ec_correlation_pooled(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let steps = ec_correlation_per_step(&a, &b).unwrap();
        assert_eq!(steps.len(), 2);
        assert!(steps.iter().all(|r| (r - 1.0).abs() < 1e-12));
        let c = EcTensor::zeros(3, 3, 0.1, EcMode::Direct);
        assert!(ec_correlation_pooled(&a, &c).is_err());
    }

    #[test]
    fn erp_examples() {
        let x = vec![1.0, -2.0, 0.5];
        assert_eq!(erp(std::slice::from_ref(&x)).unwrap(), x);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!(erp(&[x.clone(), neg]).unwrap().iter().all(|v| *v == 0.0));
        assert!(erp(&[]).is_err());
        assert!(erp(&[x, vec![1.0]]).is_err());
    }

    #[test]
    fn rescale_examples() {
        assert_eq!(rescale01(&[0.0, 5.0, 10.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(rescale01(&[0.0, 0.3, 1.0]).unwrap(), vec![0.0, 0.3, 1.0]);
        assert_eq!(rescale01(&[-2.0, 0.0, 2.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(rescale01(&[1.0, 1.0]).is_err());
    }

    #[test]
    fn report_layout() {
        let row = MetricsRow {
            model: "cnn".into(),
            hidden: 128,
            prediction_mse: 5.5,
            ec_correlation_pooled: 0.9,
            ec_correlation_per_step: vec![0.8, 0.7],
        };
        assert_eq!(
            report_csv(&[row]),
            "model,hidden,prediction_mse,ec_correlation_pooled,ec_correlation_t1,ec_correlation_t2\n\
             cnn,128,5.5,0.9,0.8,0.7\n"
        );
    }

    proptest! {
        #[test]
        fn correlation_symmetric_and_affine_invariant(
            x in prop::collection::vec(-10.0f64..10.0, 9),
            y in prop::collection::vec(-10.0f64..10.0, 9),
            a in 0.1f64..5.0,
            b in -5.0f64..5.0,
        ) {
            if let (Ok(r), Ok(s)) = (ec_correlation(&x, &y, 3), ec_correlation(&y, &x, 3)) {
                prop_assert!((r - s).abs() < 1e-12);
                let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
                prop_assert!((ec_correlation(&ax, &y, 3).unwrap() - r).abs() < 1e-9);
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn rescale_keeps_extremes(m in prop::collection::vec(-100.0f64..100.0, 2..30)) {
            if let Ok(s) = rescale01(&m) {
                let arg = |v: &[f64], max: bool| {
                    let mut best = 0;
                    for i in 1..v.len() {
                        if (max && v[i] > v[best]) || (!max && v[i] < v[best]) {
                            best = i;
                        }
                    }
                    best
                };
                prop_assert_eq!(arg(&m, true), arg(&s, true));
                prop_assert_eq!(arg(&m, false), arg(&s, false));
            }
        }
    }
}
