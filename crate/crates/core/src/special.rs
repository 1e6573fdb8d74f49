//! Special functions not provided by `std`.

use std::f64::consts::PI;

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Inverse error function on (-1, 1).
///
/// Giles' single-precision rational approximation as the starting point,
/// then two Newton steps on `erf(x) - y`, which brings the relative error
/// down to roughly machine precision.
pub fn erfinv(y: f64) -> f64 {
    if y.is_nan() || !(-1.0..=1.0).contains(&y) {
        return f64::NAN;
    }
    if y == 1.0 {
        return f64::INFINITY;
    }
    if y == -1.0 {
        return f64::NEG_INFINITY;
    }
    let w = -((1.0 - y) * (1.0 + y)).ln();
    let mut x = if w < 5.0 {
        let w = w - 2.5;
        let mut p = 2.810_226_36e-08;
        p = 3.432_739_39e-07 + p * w;
        p = -3.523_387_7e-06 + p * w;
        p = -4.391_506_54e-06 + p * w;
        p = 0.000_218_580_87 + p * w;
        p = -0.001_253_725_03 + p * w;
        p = -0.004_177_681_64 + p * w;
        p = 0.246_640_727 + p * w;
        p = 1.501_409_41 + p * w;
        p * y
    } else {
        let w = w.sqrt() - 3.0;
        let mut p = -0.000_200_214_257;
        p = 0.000_100_950_558 + p * w;
        p = 0.001_349_343_22 + p * w;
        p = -0.003_673_428_44 + p * w;
        p = 0.005_739_507_73 + p * w;
        p = -0.007_622_461_3 + p * w;
        p = 0.009_438_870_47 + p * w;
        p = 1.001_674_06 + p * w;
        p = 2.832_976_82 + p * w;
        p * y
    };
    let two_over_sqrt_pi = 2.0 / PI.sqrt();
    for _ in 0..2 {
        // Near |y| -> 1 the residual is better expressed through erfc.
        let err = if y.abs() > 0.9 {
            let s = y.signum();
            s * ((1.0 - s * y) - erfc(s * x))
        } else {
            erf(x) - y
        };
        x -= err / (two_over_sqrt_pi * (-x * x).exp());
    }
    x
}

/// Standard Normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// log-sum-exp of a slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erfinv_inverts_erf() {
        for i in 1..2000 {
            let x = -4.0 + 8.0 * i as f64 / 2000.0;
            let y = erf(x);
            if y.abs() >= 1.0 {
                continue;
            }
            let back = erfinv(y);
            // Near the tails erf is flat, so compare in y-space there.
            let ok = (back - x).abs() <= 1e-13 * x.abs().max(1.0)
                || (erf(back) - y).abs() <= 4.0 * f64::EPSILON;
            assert!(ok, "x={x} back={back}");
        }
    }

    #[test]
    fn erfinv_known_values() {
        assert_eq!(erfinv(0.0), 0.0);
        assert!((erfinv(0.5) - 0.476_936_276_204_469_9).abs() < 1e-15);
        assert!((erfinv(-0.9) + 1.163_087_153_676_674_2).abs() < 1e-14);
        assert!((erfinv(0.999_999) - 3.458_910_737_275_498_8).abs() < 1e-11);
        assert!(erfinv(1.0).is_infinite());
        assert!(erfinv(1.5).is_nan());
    }

    #[test]
    fn logsumexp_is_stable() {
        let v = [1000.0, 1000.0];
        assert!((log_sum_exp(&v) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
