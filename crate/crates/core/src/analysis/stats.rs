use serde::{Deserialize, Serialize};

use super::AnalysisError;

pub const DEFAULT_BINS: usize = 10;

/// Shannon entropy (nats) of the histogram of `samples` over `bins` equal
/// bins on `[0, 1]`. A sample of exactly 1 falls in the last bin.
pub fn histogram_entropy(samples: &[f64], bins: usize) -> Result<f64, AnalysisError> {
    if samples.is_empty() {
        return Err(AnalysisError::Empty("entropy samples"));
    }
    if bins < 2 {
        return Err(AnalysisError::Invalid(format!("bins must be at least 2, got {bins}")));
    }
    let mut counts = vec![0usize; bins];
    for &s in samples {
        if !(0.0..=1.0).contains(&s) {
            return Err(AnalysisError::Invalid(format!("sample {s} outside [0, 1]")));
        }
        counts[((s * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let n = samples.len() as f64;
    let h = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / n;
            -q * q.ln()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub d: f64,
    pub p_value: f64,
}

/// Supremum distance between the two empirical CDFs, from one merged scan.
pub fn ks_statistic(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    if x.is_empty() || y.is_empty() {
        return Err(AnalysisError::Empty("KS sample"));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(AnalysisError::Invalid("NaN in KS sample".into()));
    }
    let mut a = x.to_vec();
    let mut b = y.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] == v {
            i += 1;
        }
        while j < b.len() && b[j] == v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Kolmogorov distribution tail `Q(lambda) = 2 sum (-1)^(j-1) exp(-2 j^2 lambda^2)`.
///
/// The alternating series converges slowly for small `lambda`; below 1.18 the
/// equivalent Jacobi theta form `1 - sqrt(2 pi)/lambda sum exp(-(2j-1)^2 pi^2 / (8 lambda^2))`
/// is summed instead. Both stop once a term drops below 1e-12.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    const EPS: f64 = 1e-12;
    if lambda <= 0.0 {
        return 1.0;
    }
    let q = if lambda < 1.18 {
        let pi = std::f64::consts::PI;
        let mut s = 0.0;
        for j in 1..=1000 {
            let k = (2 * j - 1) as f64;
            let term = (-(k * k) * pi * pi / (8.0 * lambda * lambda)).exp();
            s += term;
            if term < EPS {
                break;
            }
        }
        1.0 - (2.0 * pi).sqrt() / lambda * s
    } else {
        let mut s = 0.0;
        let mut sign = 1.0;
        for j in 1..=1000 {
            let jf = j as f64;
            let term = (-2.0 * jf * jf * lambda * lambda).exp();
            s += sign * term;
            sign = -sign;
            if term < EPS {
                break;
            }
        }
        2.0 * s
    };
    q.clamp(0.0, 1.0)
}

/// Asymptotic p-value with the effective-size correction
/// `lambda = (sqrt(n_e) + 0.12 + 0.11 / sqrt(n_e)) * d`.
pub fn ks_p_value(d: f64, nx: usize, ny: usize) -> f64 {
    if d <= 0.0 {
        return 1.0;
    }
    let ne = (nx * ny) as f64 / (nx + ny) as f64;
    let s = ne.sqrt();
    kolmogorov_q((s + 0.12 + 0.11 / s) * d)
}

pub fn ks_two_sample(x: &[f64], y: &[f64]) -> Result<KsResult, AnalysisError> {
    let d = ks_statistic(x, y)?;
    Ok(KsResult {
        d,
        p_value: ks_p_value(d, x.len(), y.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_edge_cases() {
        assert_eq!(histogram_entropy(&[0.3; 17], 10).unwrap(), 0.0);
        let balanced: Vec<f64> = (0..100).map(|i| (i / 10) as f64 / 10.0 + 0.05).collect();
        assert!((histogram_entropy(&balanced, 10).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((histogram_entropy(&[0.0, 1.0], 2).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(histogram_entropy(&[], 10).is_err());
        assert!(histogram_entropy(&[0.5], 1).is_err());
        assert!(histogram_entropy(&[1.5], 10).is_err());
    }

    #[test]
    fn ks_edge_cases() {
        let x = [0.1, 0.4, 0.4, 0.9];
        let r = ks_two_sample(&x, &[0.9, 0.4, 0.1, 0.4]).unwrap();
        assert_eq!((r.d, r.p_value), (0.0, 1.0));
        let lo: Vec<f64> = (0..20).map(|i| i as f64 * 0.005).collect();
        let hi: Vec<f64> = (0..30).map(|i| 0.9 + i as f64 * 0.003).collect();
        let r = ks_two_sample(&lo, &hi).unwrap();
        assert_eq!(r.d, 1.0);
        assert!(r.p_value < 1e-6);
        assert!(ks_two_sample(&[], &[1.0]).is_err());
    }

    #[test]
    fn kolmogorov_tail_reference_values() {
        // Q(1) = 0.26999967..., Q(0.5) = 0.96394..., Q(1.36) ~ 0.0494
        assert!((kolmogorov_q(1.0) - 0.2699996716735717).abs() < 1e-9);
        assert!((kolmogorov_q(0.5) - 0.9639452436648751).abs() < 1e-9);
        assert!((kolmogorov_q(1.36) - 0.04948).abs() < 1e-4);
        // both branches agree at the switch point
        let pi = std::f64::consts::PI;
        let l: f64 = 1.18;
        let theta = 1.0 - (2.0 * pi).sqrt() / l * (1..50).map(|j| {
            let k = (2 * j - 1) as f64;
            (-(k * k) * pi * pi / (8.0 * l * l)).exp()
        }).sum::<f64>();
        assert!((kolmogorov_q(l) - theta).abs() < 1e-12);
    }
}
