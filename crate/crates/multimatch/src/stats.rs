//! Scalar distribution functions used for tests and intervals.
//!
//! Self-contained: regularized incomplete gamma for the chi-square tail, and
//! a rational-approximation inverse normal refined by one Halley step.

/// ln Γ(x) via the Lanczos approximation.
pub fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        return std::f64::consts::PI.ln() - (std::f64::consts::PI * x).sin().abs().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 7.5;
    for (i, &g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma P(a, x).
pub fn gamma_p(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        gamma_p_series(a, x)
    } else {
        1.0 - gamma_q_cf(a, x)
    }
}

/// Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x).
pub fn gamma_q(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_cf(a, x)
    }
}

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut sum = 1.0 / a;
    let mut del = sum;
    for _ in 0..500 {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * 1e-16 {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn gamma_q_cf(a: f64, x: f64) -> f64 {
    // Modified Lentz continued fraction.
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Chi-square CDF with `df` degrees of freedom.
pub fn chi2_cdf(x: f64, df: usize) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_p(df as f64 / 2.0, x / 2.0)
    }
}

/// Upper-tail probability of the chi-square distribution.
pub fn chi2_sf(x: f64, df: usize) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        gamma_q(df as f64 / 2.0, x / 2.0)
    }
}

/// Chi-square quantile: smallest x with CDF(x) >= p.
pub fn chi2_quantile(p: f64, df: usize) -> f64 {
    assert!((0.0..1.0).contains(&p));
    if p == 0.0 {
        return 0.0;
    }
    // Bracket then bisect; Newton polish at the end.
    let mut lo = 0.0;
    let mut hi = df as f64 + 10.0;
    while chi2_cdf(hi, df) < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(mid, df) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * hi.max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Standard normal CDF via the incomplete gamma relation to erfc.
pub fn normal_cdf(x: f64) -> f64 {
    let half_erfc = 0.5 * gamma_q(0.5, x * x / 2.0);
    if x >= 0.0 {
        1.0 - half_erfc
    } else {
        half_erfc
    }
}

/// Standard normal quantile (Acklam rational approximation plus one Halley
/// refinement step; absolute error well below 1e-10).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "p must lie in (0,1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // Halley refinement.
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x - u / (1.0 + x * u / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn chi2_quantile_reference_values() {
        assert_abs_diff_eq!(chi2_quantile(0.95, 3), 7.814727903, epsilon = 1e-6);
        assert_abs_diff_eq!(chi2_quantile(0.95, 1), 3.841458821, epsilon = 1e-6);
        assert_abs_diff_eq!(chi2_quantile(0.99, 6), 16.811893829, epsilon = 1e-6);
    }

    #[test]
    fn chi2_cdf_quantile_round_trip() {
        for df in [1, 2, 3, 5, 10, 30] {
            for &p in &[0.01, 0.1, 0.5, 0.9, 0.95, 0.999] {
                let q = chi2_quantile(p, df);
                assert_abs_diff_eq!(chi2_cdf(q, df), p, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn normal_quantile_reference_values() {
        assert_abs_diff_eq!(normal_quantile(0.975), 1.959963985, epsilon = 1e-8);
        assert_abs_diff_eq!(normal_quantile(0.5), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(normal_quantile(0.99), 2.326347874, epsilon = 1e-8);
        // Bonferroni level for three pairs at alpha = 0.05.
        assert_abs_diff_eq!(
            normal_quantile(1.0 - 0.05 / 6.0),
            2.393979800,
            epsilon = 1e-6
        );
    }

    #[test]
    fn normal_cdf_symmetry() {
        for &x in &[0.3, 1.0, 2.5, 4.0] {
            assert_abs_diff_eq!(normal_cdf(x) + normal_cdf(-x), 1.0, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(normal_cdf(1.959963985), 0.975, epsilon = 1e-9);
    }

    #[test]
    fn chi2_sf_complements_cdf() {
        for &x in &[0.5, 2.0, 7.8, 20.0] {
            assert_abs_diff_eq!(chi2_sf(x, 3) + chi2_cdf(x, 3), 1.0, epsilon = 1e-12);
        }
    }
}
