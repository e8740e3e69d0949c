//! Summary statistics over runs.

use statrs::distribution::{ContinuousCDF, StudentsT};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero below two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Half-width of the two-sided 95% Student-t interval for the mean.
pub fn ci95_half_width(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    t * sample_std(xs) / (n as f64).sqrt()
}

/// Linear-interpolation quantile of sorted data (`q` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub mean: f64,
    /// Most extreme values within 1.5 IQR of the box.
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub n: usize,
}

pub fn box_stats(xs: &[f64]) -> Option<BoxStats> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&v, 0.25);
    let q3 = quantile_sorted(&v, 0.75);
    let iqr = q3 - q1;
    let whisker_lo = *v.iter().find(|&&x| x >= q1 - 1.5 * iqr).expect("q1 is inside");
    let whisker_hi = *v.iter().rev().find(|&&x| x <= q3 + 1.5 * iqr).expect("q3 is inside");
    Some(BoxStats {
        q1,
        median: quantile_sorted(&v, 0.5),
        q3,
        mean: mean(&v),
        whisker_lo,
        whisker_hi,
        n: v.len(),
    })
}

/// The fastest `round(0.8 n_runs)` convergence times, ascending.
pub fn best_fraction(times: &[f64], n_runs: usize, fraction: f64) -> Vec<f64> {
    let keep = (n_runs as f64 * fraction).round() as usize;
    let mut v = times.to_vec();
    v.sort_by(f64::total_cmp);
    v.truncate(keep);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_interval_known_value() {
        // t(0.975, 4) = 2.776445105..., s = sqrt(2.5)
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let expect = 2.776_445_105_197_793 * 2.5f64.sqrt() / 5f64.sqrt();
        assert!((ci95_half_width(&xs) - expect).abs() < 1e-9);
        assert_eq!(ci95_half_width(&[3.0]), 0.0);
    }

    #[test]
    fn quartiles_match_sorting() {
        let xs = [7.0, 1.0, 3.0, 9.0, 5.0];
        let b = box_stats(&xs).unwrap();
        assert_eq!((b.q1, b.median, b.q3), (3.0, 5.0, 7.0));
        assert_eq!(b.mean, 5.0);
        let b = box_stats(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!(b.whisker_hi, 4.0);
        assert_eq!(quantile_sorted(&[0.0, 10.0], 0.25), 2.5);
    }

    #[test]
    fn best_eighty_percent() {
        let times: Vec<f64> = (0..10).rev().map(f64::from).collect();
        let kept = best_fraction(&times, 10, 0.8);
        assert_eq!(kept, (0..8).map(f64::from).collect::<Vec<_>>());
        assert_eq!(best_fraction(&[5.0, 1.0], 10, 0.8).len(), 2);
    }
}
