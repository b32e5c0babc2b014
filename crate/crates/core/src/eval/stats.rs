//! Pearson correlation with a two-sided Student-t p-value.
//!
//! The p-value is `I_{1-r^2}(df/2, 1/2)` with `df = n - 2`, the regularised
//! incomplete beta function evaluated by Lentz's continued fraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CF_EPS: f64 = 1e-16;
const CF_TINY: f64 = 1e-300;
const CF_MAX_ITER: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub metric: String,
    pub r: f64,
    pub p: f64,
    pub n: usize,
}

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection keeps the series in its accurate range.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let guard = |v: f64| if v.abs() < CF_TINY { CF_TINY } else { v };
    let mut c = 1.0;
    let mut d = 1.0 / guard(1.0 - qab * x / qap);
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 / guard(1.0 + aa * d);
        c = guard(1.0 + aa / c);
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 / guard(1.0 + aa * d);
        c = guard(1.0 + aa / c);
        let step = d * c;
        h *= step;
        if (step - 1.0).abs() < CF_EPS {
            break;
        }
    }
    h
}

/// Regularised incomplete beta `I_x(a, b)` where `y = 1 - x` is supplied
/// separately so callers can avoid cancellation near `x = 1`.
fn inc_beta_split(a: f64, b: f64, x: f64, y: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if y <= 0.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * y.ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, y) / b
    }
}

/// Regularised incomplete beta function `I_x(a, b)` for `a, b > 0`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "shape parameters must be positive");
    let x = x.clamp(0.0, 1.0);
    inc_beta_split(a, b, x, 1.0 - x)
}

/// Two-sided p-value of Student's t statistic with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let t2 = t * t;
    inc_beta_split(df / 2.0, 0.5, df / (df + t2), t2 / (df + t2)).clamp(0.0, 1.0)
}

/// Sample Pearson correlation and its two-sided p-value.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() {
        return Err(Error::Stats(format!(
            "paired samples differ in length ({} vs {})",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len();
    if n < 3 {
        return Err(Error::Stats(format!("need at least 3 pairs, got {n}")));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Stats("non-finite sample value".into()));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Stats(
            "correlation undefined for zero-variance input".into(),
        ));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok((r, p_value(r, n)))
}

/// Two-sided p-value of a sample correlation `r` over `n >= 3` pairs.
pub fn p_value(r: f64, n: usize) -> f64 {
    let df = n.saturating_sub(2).max(1) as f64;
    let r2 = r * r;
    if r2 >= 1.0 {
        0.0
    } else {
        // df / (df + t^2) = 1 - r^2
        inc_beta_split(df / 2.0, 0.5, 1.0 - r2, r2).clamp(0.0, 1.0)
    }
}

/// [`pearson`] packaged with a metric name.
pub fn correlate(metric: &str, xs: &[f64], ys: &[f64]) -> Result<CorrelationResult> {
    let (r, p) = pearson(xs, ys)?;
    Ok(CorrelationResult {
        metric: metric.to_string(),
        r,
        p,
        n: xs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!(ln_gamma(2.0).abs() < 1e-14);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
        // ln(10!) = ln 3628800
        assert!((ln_gamma(11.0) - 3_628_800f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn incomplete_beta_closed_forms() {
        // I_x(1, 1) = x; I_x(a, 1) = x^a; I_x(1, b) = 1 - (1 - x)^b
        for x in [0.0, 0.1, 0.37, 0.5, 0.93, 1.0] {
            assert!((regularized_incomplete_beta(1.0, 1.0, x) - x).abs() < 1e-14);
            assert!((regularized_incomplete_beta(3.0, 1.0, x) - x.powi(3)).abs() < 1e-13);
            assert!(
                (regularized_incomplete_beta(1.0, 2.5, x) - (1.0 - (1.0 - x).powf(2.5))).abs()
                    < 1e-13
            );
        }
    }

    #[test]
    fn t_with_one_df_is_cauchy() {
        // P(|T| > t) = 1 - 2 atan(t) / pi for df = 1
        for t in [0.1, 1.0, 3.0, 40.0] {
            let expect = 1.0 - 2.0 * f64::atan(t) / std::f64::consts::PI;
            assert!((student_t_two_sided(t, 1.0) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_correlation() {
        let xs = [1.0, 2.5, 3.0, 7.0, 11.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        let (r, p) = pearson(&xs, &ys).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        assert!(p < 1e-12);
    }

    #[test]
    fn symmetric_zero_correlation() {
        let (r, p) = pearson(&[-1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap();
        assert_eq!(r, 0.0);
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn worked_p_value() {
        // n = 12, r = 0.6325
        let xs: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let r_target = 0.6325f64;
        let df = 10.0;
        let t = r_target * (df / (1.0 - r_target * r_target)).sqrt();
        let p = student_t_two_sided(t, df);
        assert!((p - 0.027_308_740_359_887_8).abs() < 1e-9, "{p}");
        assert!(pearson(&xs, &xs).is_ok());
    }

    #[test]
    fn errors() {
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(pearson(&[1.0, 2.0, 3.0], &[1.0, f64::NAN, 3.0]).is_err());
        assert!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }
}
