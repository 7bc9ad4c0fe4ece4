//! Order statistics and distribution distances used by the harness.

use serde::Serialize;

/// Sorted copy with NaNs removed.
fn sorted_finite(v: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = v.iter().copied().filter(|x| !x.is_nan()).collect();
    s.sort_by(f64::total_cmp);
    s
}

/// Linear-interpolation quantile (type 7) of the non-NaN values.
pub fn quantile(v: &[f64], p: f64) -> Option<f64> {
    let s = sorted_finite(v);
    quantile_sorted(&s, p)
}

fn quantile_sorted(s: &[f64], p: f64) -> Option<f64> {
    if s.is_empty() {
        return None;
    }
    let pos = p.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(s[lo] + (pos - lo as f64) * (s[hi] - s[lo]))
}

pub fn median(v: &[f64]) -> Option<f64> {
    quantile(v, 0.5)
}

/// Lower median: an element of the sample, so a median of grid values stays
/// on the grid.
pub fn lower_median(v: &[f64]) -> Option<f64> {
    let s = sorted_finite(v);
    (!s.is_empty()).then(|| s[(s.len() - 1) / 2])
}

pub fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Sample standard deviation (denominator `n − 1`).
pub fn sd(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v)?;
    let ss: f64 = v.iter().map(|x| (x - m).powi(2)).sum();
    Some((ss / (v.len() - 1) as f64).sqrt())
}

/// Five-number summary of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn summarize(v: &[f64]) -> Option<Summary> {
    let s = sorted_finite(v);
    Some(Summary {
        count: s.len(),
        min: *s.first()?,
        q1: quantile_sorted(&s, 0.25)?,
        median: quantile_sorted(&s, 0.5)?,
        q3: quantile_sorted(&s, 0.75)?,
        max: *s.last()?,
    })
}

/// One-sample Kolmogorov–Smirnov distance to a continuous CDF.
pub fn ks_distance(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let s = sorted_finite(sample);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    d
}

/// Two-sample Kolmogorov–Smirnov distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let a = sorted_finite(a);
    let b = sorted_finite(b);
    if a.is_empty() || b.is_empty() {
        return 1.0;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Gaussian kernel density estimate on `grid` with Silverman's bandwidth.
pub fn gaussian_kde(sample: &[f64], grid: &[f64]) -> Vec<f64> {
    let s = sorted_finite(sample);
    let n = s.len() as f64;
    let spread = match (sd(&s), quantile_sorted(&s, 0.75), quantile_sorted(&s, 0.25)) {
        (Some(sd), Some(q3), Some(q1)) => sd.min((q3 - q1) / 1.34),
        _ => return vec![0.0; grid.len()],
    };
    let h = 0.9 * spread.max(f64::MIN_POSITIVE) * n.powf(-0.2);
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|&x| {
            let lo = s.partition_point(|&v| v < x - 8.0 * h);
            let hi = s.partition_point(|&v| v <= x + 8.0 * h);
            norm * s[lo..hi]
                .iter()
                .map(|v| (-0.5 * ((x - v) / h).powi(2)).exp())
                .sum::<f64>()
        })
        .collect()
}
