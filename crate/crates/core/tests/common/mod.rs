//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use flute_core::numerics::Half;
use flute_core::{Matrix, QuantizedMatrix, Real};

const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

fn density(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

/// `f` holds the density at `a`, the midpoint and `b`.
fn adaptive(a: f64, b: f64, f: (f64, f64, f64), whole: f64, eps: f64, depth: u32) -> f64 {
    let (fa, fm, fb) = f;
    let m = 0.5 * (a + b);
    let (flm, frm) = (density(0.5 * (a + m)), density(0.5 * (m + b)));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * eps {
        return left + right + delta / 15.0;
    }
    adaptive(a, m, (fa, flm, fm), left, eps / 2.0, depth - 1)
        + adaptive(m, b, (fm, frm, fb), right, eps / 2.0, depth - 1)
}

/// Standard normal CDF by adaptive Simpson integration of the density.
pub fn normal_cdf(x: f64) -> f64 {
    if x == 0.0 {
        return 0.5;
    }
    let (a, b) = (0.0f64.min(x), 0.0f64.max(x));
    let (fa, fb, fm) = (density(a), density(b), density(0.5 * (a + b)));
    let whole = simpson(a, b, fa, fm, fb);
    let area = adaptive(a, b, (fa, fm, fb), whole, 1e-15, 40);
    if x > 0.0 {
        0.5 + area
    } else {
        0.5 - area
    }
}

/// Inverse CDF by bisection on [`normal_cdf`].
pub fn normal_quantile(p: f64) -> f64 {
    let (mut lo, mut hi) = (-12.0f64, 12.0f64);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// NormalFloat table rebuilt from the probability grid with the oracle quantile.
pub fn nf_table(bits: u8) -> Vec<f64> {
    let delta = 0.5 * (1.0 / 30.0 + 1.0 / 32.0);
    let half = 1usize << (bits - 1);
    let mut probs: Vec<f64> = (0..half)
        .map(|i| delta + (0.5 - delta) * i as f64 / (half - 1) as f64)
        .collect();
    probs.extend((1..=half).map(|i| 0.5 + (0.5 - delta) * i as f64 / half as f64));
    let q: Vec<f64> = probs.iter().map(|&p| normal_quantile(p)).collect();
    let top = *q.last().unwrap();
    q.iter().map(|v| v / top).collect()
}

/// Exhaustive nearest-value search, lower index on ties.
pub fn brute_argmin(values: &[f64], x: f64) -> u8 {
    let mut best = 0;
    for c in 1..values.len() {
        if (values[c] - x).abs() < (values[best] - x).abs() {
            best = c;
        }
    }
    best as u8
}

pub fn half_to_f64(h: Half) -> f64 {
    half::f16::from_bits(h.to_bits()).to_f64()
}

/// `f16(a * b)` computed through the reference binary16 implementation.
pub fn half_mul(a: Half, b: Half) -> Half {
    let p = half::f16::from_bits(a.to_bits()).to_f32() * half::f16::from_bits(b.to_bits()).to_f32();
    Half::from_bits(half::f16::from_f32(p).to_bits())
}

/// Dense binary64 `X * W_hat`, with `W_hat` rebuilt from indices, Half
/// scales and the oracle table.
pub fn reference_matmul<T: Real>(x: &Matrix<Half>, q: &QuantizedMatrix<T>) -> Vec<f64> {
    let table = nf_table(q.config().bits());
    let (m, k, n) = (x.rows(), q.k(), q.n());
    let w: Vec<f64> = (0..k * n)
        .map(|e| {
            let (i, j) = (e / n, e % n);
            half_to_f64(q.scale_at(i, j)) * table[q.index(i, j) as usize]
        })
        .collect();
    let mut y = vec![0.0; m * n];
    for r in 0..m {
        for i in 0..k {
            let xv = half_to_f64(x[(r, i)]);
            for j in 0..n {
                y[r * n + j] += xv * w[i * n + j];
            }
        }
    }
    y
}
