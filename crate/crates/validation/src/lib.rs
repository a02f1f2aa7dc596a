//! Small statistics helpers and the PASS/FAIL report used by the
//! acceptance binary.

use std::time::Duration;

/// Median of `values`; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trailing average of `window` values ending at 1-based `step`.
pub fn trailing_average(series: &[f64], step: usize, window: usize) -> f64 {
    assert!(step >= window && step <= series.len(), "window out of range");
    series[step - window..step].iter().sum::<f64>() / window as f64
}

/// Smallest trailing `window`-average over the first `limit` values, with
/// the 1-based step where it occurs.
pub fn best_trailing_average(series: &[f64], limit: usize, window: usize) -> (f64, usize) {
    (window..=limit.min(series.len()))
        .map(|s| (trailing_average(series, s, window), s))
        .fold((f64::INFINITY, 0), |best, x| if x.0 < best.0 { x } else { best })
}

#[derive(Debug, Default)]
pub struct Report {
    lines: Vec<(String, bool)>,
}

impl Report {
    pub fn record(&mut self, name: &str, pass: bool, detail: &str, elapsed: Duration) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("{verdict} {name}: {detail} [{:.1}s]", elapsed.as_secs_f64());
        self.lines.push((name.to_owned(), pass));
    }

    pub fn failures(&self) -> Vec<&str> {
        self.lines.iter().filter(|l| !l.1).map(|l| l.0.as_str()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn mean_std_of_known_sample() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!((m, s), (5.0, 2.0));
    }

    #[test]
    fn trailing_windows() {
        let s: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(trailing_average(&s, 10, 10), 5.5);
        assert_eq!(trailing_average(&s, 20, 10), 15.5);
        let falling: Vec<f64> = (0..20).map(|i| 20.0 - i as f64).collect();
        assert_eq!(best_trailing_average(&falling, 12, 3), (10.0, 12));
    }
}
