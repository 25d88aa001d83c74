//! Summary statistics over seeds and regret-curve fits.

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Linear-interpolated quantile, `q` in `[0, 1]`.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

pub fn iqr(xs: &[f64]) -> f64 {
    quantile(xs, 0.75) - quantile(xs, 0.25)
}

/// Least-squares slope of `log y_T` against `log T` over `T = from..=y.len()`,
/// where `y[T - 1]` is the value after `T` steps.
pub fn loglog_slope(y: &[f64], from: usize) -> Result<f64> {
    let from = from.max(1);
    let pts: Vec<(f64, f64)> = (from..=y.len())
        .map(|t| (t as f64, y[t - 1]))
        .filter(|&(_, v)| v > 0.0 && v.is_finite())
        .map(|(t, v)| (t.ln(), v.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Degenerate(
            "fewer than two positive points to fit".into(),
        ));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Per-index mean, median and IQR across equally long series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesSummary {
    pub mean: Vec<f64>,
    pub median: Vec<f64>,
    pub iqr: Vec<f64>,
}

pub fn summarize_series(series: &[Vec<f64>]) -> Result<SeriesSummary> {
    let len = series
        .first()
        .ok_or_else(|| Error::InvalidValue("no series to summarize".into()))?
        .len();
    if series.iter().any(|s| s.len() != len) {
        return Err(Error::Dimension("series of different lengths".into()));
    }
    let mut out = SeriesSummary {
        mean: Vec::with_capacity(len),
        median: Vec::with_capacity(len),
        iqr: Vec::with_capacity(len),
    };
    for i in 0..len {
        let col: Vec<f64> = series.iter().map(|s| s[i]).collect();
        out.mean.push(mean(&col));
        out.median.push(median(&col));
        out.iqr.push(iqr(&col));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let y: Vec<f64> = (1..=500).map(|t| 3.0 / (t as f64).sqrt()).collect();
        assert!((loglog_slope(&y, 10).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn quantiles_interpolate() {
        let xs = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(median(&xs), 2.5);
        assert_eq!(quantile(&xs, 0.0), 1.0);
        assert_eq!(quantile(&xs, 1.0), 4.0);
        assert_eq!(iqr(&xs), 1.5);
    }

    #[test]
    fn single_and_identical_series() {
        let s = vec![vec![1.0, 2.0, 3.0]];
        let one = summarize_series(&s).unwrap();
        assert_eq!(one.mean, s[0]);
        let two = summarize_series(&[s[0].clone(), s[0].clone()]).unwrap();
        assert!(two.iqr.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(summarize_series(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
