//! Binary64 references with the same approximation structure as the
//! kernels: Taylor exponential, seeded Newton square root.

use crate::kernels::{newton_seed, EXP_ORDER, SQRT_ITERATIONS};
use crate::numerics::Bf16;

/// Horner evaluation of the degree-`order` Taylor polynomial of `exp(x)`.
pub fn exp_taylor(x: f64, order: u16) -> f64 {
    (1..=order).rev().fold(1.0, |v, k| v * x / k as f64 + 1.0)
}

pub fn exp(x: f64) -> f64 {
    exp_taylor(x, EXP_ORDER)
}

/// Newton square root from the controller's seed.
pub fn sqrt(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    if x.is_nan() || x < 0.0 {
        return f64::NAN;
    }
    let mut y = newton_seed(Bf16::from_f64(x)).0.to_f64();
    for _ in 0..SQRT_ITERATIONS {
        y = 0.5 * (x / y + y);
    }
    y
}

pub fn softmax(xs: &[f64], shift: f64) -> Vec<f64> {
    let e: Vec<f64> = xs.iter().map(|&x| exp(x - shift)).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

pub fn rmsnorm(xs: &[f64], gains: &[f64], eps: f64) -> Vec<f64> {
    let ms = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64 + eps;
    let r = sqrt(ms);
    xs.iter().zip(gains).map(|(x, g)| x / r * g).collect()
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + exp(-x))
}

/// Interleaved-pair rotary embedding at `pos`.
pub fn rope(xs: &[f64], pos: usize, base: f64) -> Vec<f64> {
    let d = xs.len();
    (0..d)
        .map(|i| {
            let theta = pos as f64 * base.powf(-((i / 2 * 2) as f64) / d as f64);
            let rot = if i % 2 == 0 { -xs[i + 1] } else { xs[i - 1] };
            xs[i] * theta.cos() + rot * theta.sin()
        })
        .collect()
}

/// Largest absolute difference divided by the largest reference magnitude.
pub fn normalized_error(got: &[Bf16], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |m, w| m.max(w.abs())).max(f64::MIN_POSITIVE);
    got.iter().zip(want).map(|(g, w)| (g.to_f64() - w).abs()).fold(0.0, f64::max) / scale
}

/// Largest element-wise relative error.
pub fn max_relative_error(got: &[Bf16], want: &[f64]) -> f64 {
    got.iter()
        .zip(want)
        .map(|(g, w)| if *w == 0.0 { g.to_f64().abs() } else { ((g.to_f64() - w) / w).abs() })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taylor_matches_closed_form_sum() {
        let x = 1.3f64;
        let direct: f64 = (0..=6).map(|k| x.powi(k) / (1..=k).map(|j| j as f64).product::<f64>()).sum();
        assert!((exp_taylor(x, 6) - direct).abs() < 1e-12);
        assert!((exp(1.0) - 2.718_055_555_555_555).abs() < 1e-12);
    }

    #[test]
    fn newton_sqrt_converges() {
        for x in [0.01, 0.5, 2.0, 4.0, 9.0, 1234.0] {
            assert!((sqrt(x) - x.sqrt()).abs() / x.sqrt() < 1e-6, "{x}");
        }
        assert_eq!(sqrt(0.0), 0.0);
        assert!(sqrt(-1.0).is_nan());
    }

    #[test]
    fn rope_rotates_pairs() {
        let out = rope(&[1.0, 0.0, 0.0, 1.0], 1, 10000.0);
        assert!((out[0] - 1f64.cos()).abs() < 1e-12);
        assert!((out[1] - 1f64.sin()).abs() < 1e-12);
    }
}
