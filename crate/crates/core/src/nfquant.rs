//! NormalFloat lookup tables, group-wise absmax quantization and
//! calibration-driven scale refinement.
//!
//! Weight matrices are `k x n` (K is the reduction dimension). Group `g`
//! holds `B` consecutive entries down K of one column:
//! `g(i, j) = j * (k / B) + i / B`.

use crate::error::{FluteError, Result};
use crate::matrix::Matrix;
use crate::numerics::{f16_to_f32, f32_to_f16, Half};
use crate::scalar::{to_f32, Real};

/// `delta = (1/30 + 1/32) / 2`, the tail probability trimmed off both ends.
pub const NF_DELTA: f64 = 0.5 * (1.0 / 30.0 + 1.0 / 32.0);

pub const SUPPORTED_BITS: [u8; 3] = [2, 3, 4];
pub const SUPPORTED_GROUPS: [u32; 4] = [32, 64, 128, 256];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantConfig {
    bits: u8,
    group_size: u32,
}

impl QuantConfig {
    pub fn new(bits: u8, group_size: u32) -> Result<Self> {
        if !SUPPORTED_BITS.contains(&bits) {
            return Err(FluteError::Config(format!("unsupported bit width {bits}")));
        }
        if !SUPPORTED_GROUPS.contains(&group_size) {
            return Err(FluteError::Config(format!(
                "unsupported group size {group_size}"
            )));
        }
        Ok(Self { bits, group_size })
    }

    /// 16-bit dense weights: no indices, no scales.
    pub const fn unquantized() -> Self {
        Self {
            bits: 16,
            group_size: 0,
        }
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn group_size(&self) -> u32 {
        self.group_size
    }

    pub fn is_quantized(&self) -> bool {
        self.group_size != 0
    }

    pub fn levels(&self) -> usize {
        1 << self.bits
    }

    /// Index of the exact-zero quantile.
    pub fn zero_index(&self) -> u8 {
        ((1u32 << (self.bits - 1)) - 1) as u8
    }

    pub fn check_k(&self, k: usize) -> Result<()> {
        if !self.is_quantized() || !k.is_multiple_of(self.group_size as usize) || k == 0 {
            return Err(FluteError::Config(format!(
                "k = {k} is not a positive multiple of group size {}",
                self.group_size
            )));
        }
        Ok(())
    }
}

/// Standard normal quantile `Phi^-1(p)`.
///
/// Rational approximation (Acklam) followed by one Halley step on the exact
/// CDF; absolute error is at the 1e-15 level across `(0, 1)`.
pub fn inverse_normal_cdf<T: Real>(p: T) -> Result<T> {
    let p = p.to_f64_lossy();
    if !(p > 0.0 && p < 1.0) {
        return Err(FluteError::Domain(format!(
            "probability {p} outside (0, 1)"
        )));
    }
    Ok(T::from_f64_lossy(normal_quantile(p)))
}

fn normal_quantile(p: f64) -> f64 {
    if p == 0.5 {
        return 0.0;
    }
    // Solve in the lower tail so that Phi^-1(p) = -Phi^-1(1 - p) holds bitwise
    // whenever 1 - p is exact.
    if p > 0.5 {
        -lower_quantile(1.0 - p)
    } else {
        lower_quantile(p)
    }
}

/// Quantile for `p <= 0.5`.
fn lower_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383_577_518_672_69e2,
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
        -2.400758276161838e+00,
        -2.549671010366565e+00,
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
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };

    // Halley refinement against Phi(x) = erfc(-x / sqrt 2) / 2.
    let e = 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// NormalFloat lookup table.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable<T> {
    bits: u8,
    /// Normalized quantiles in `[-1, 1]`.
    values: Vec<T>,
    /// Unnormalized Gaussian quantiles.
    raw_quantiles: Vec<T>,
    delta: T,
}

impl<T: Real> LookupTable<T> {
    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn raw_quantiles(&self) -> &[T] {
        &self.raw_quantiles
    }

    pub fn delta(&self) -> T {
        self.delta
    }

    pub fn zero_index(&self) -> u8 {
        ((1u32 << (self.bits - 1)) - 1) as u8
    }

    /// `sigma = 1 / Phi^-1(1 - delta)`, the standard deviation whose
    /// quantiles are the normalized table.
    pub fn sigma(&self) -> T {
        T::one() / self.raw_quantiles[self.raw_quantiles.len() - 1]
    }

    /// Largest distance between adjacent normalized values.
    pub fn max_gap(&self) -> T {
        self.values
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(T::zero(), |a, b| a.max(b))
    }

    /// The table as stored on the kernel side.
    pub fn to_half(&self) -> Vec<Half> {
        self.values.iter().map(|&v| f32_to_f16(to_f32(v))).collect()
    }

    /// Index of the normalized value nearest to `x`, ties to the smaller index.
    pub fn nearest(&self, x: T) -> u8 {
        nearest_index(&self.values, x)
    }
}

/// Argmin of `|values[i] - x|` over a strictly increasing table, ties toward
/// the smaller index. `x` must not be NaN.
pub fn nearest_index<T: Real>(values: &[T], x: T) -> u8 {
    let hi = values.partition_point(|&v| v < x);
    if hi == 0 {
        return 0;
    }
    if hi == values.len() {
        return (values.len() - 1) as u8;
    }
    let lo = hi - 1;
    if (x - values[lo]).abs() <= (values[hi] - x).abs() {
        lo as u8
    } else {
        hi as u8
    }
}

/// Build the `2^b`-entry NormalFloat table.
///
/// `2^(b-1)` probabilities evenly spaced on `[delta, 1/2]` and
/// `2^(b-1) + 1` on `[1/2, 1 - delta]` share the midpoint, giving `2^b`
/// quantiles that are then divided by the largest one.
pub fn build_nf_table<T: Real>(bits: u8) -> Result<LookupTable<T>> {
    if !SUPPORTED_BITS.contains(&bits) {
        return Err(FluteError::Config(format!("unsupported bit width {bits}")));
    }
    let half_levels = 1usize << (bits - 1);
    let mut raw = Vec::with_capacity(2 * half_levels);

    let low_step = (0.5 - NF_DELTA) / (half_levels - 1) as f64;
    for i in 0..half_levels - 1 {
        raw.push(lower_quantile(NF_DELTA + i as f64 * low_step));
    }
    raw.push(0.0);

    // Upper grid expressed through its complementary probabilities, ending
    // exactly at delta so that q_last = -q_0.
    let high_step = (0.5 - NF_DELTA) / half_levels as f64;
    for j in 1..=half_levels {
        let tail = if j == half_levels {
            NF_DELTA
        } else {
            0.5 - j as f64 * high_step
        };
        raw.push(-lower_quantile(tail));
    }

    let top = raw[raw.len() - 1];
    let values = raw.iter().map(|&q| T::from_f64_lossy(q / top)).collect();
    Ok(LookupTable {
        bits,
        values,
        raw_quantiles: raw.iter().map(|&q| T::from_f64_lossy(q)).collect(),
        delta: T::from_f64_lossy(NF_DELTA),
    })
}

/// Index matrix, per-group Half scales and the shared table.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix<T> {
    k: usize,
    n: usize,
    cfg: QuantConfig,
    /// Row-major `k x n`.
    indices: Vec<u8>,
    scales: Vec<Half>,
    table: LookupTable<T>,
}

impl<T: Real> QuantizedMatrix<T> {
    pub fn from_parts(
        k: usize,
        n: usize,
        cfg: QuantConfig,
        indices: Vec<u8>,
        scales: Vec<Half>,
        table: LookupTable<T>,
    ) -> Result<Self> {
        cfg.check_k(k)?;
        if table.bits() != cfg.bits() {
            return Err(FluteError::Config(
                "table bit width does not match config".into(),
            ));
        }
        if indices.len() != k * n {
            return Err(FluteError::Input(format!(
                "{} indices for a {k}x{n} matrix",
                indices.len()
            )));
        }
        if let Some(bad) = indices.iter().find(|&&q| q as usize >= cfg.levels()) {
            return Err(FluteError::Input(format!(
                "index {bad} out of range for {} bits",
                cfg.bits()
            )));
        }
        if scales.len() != k * n / cfg.group_size() as usize {
            return Err(FluteError::Input(format!(
                "{} scales, expected {}",
                scales.len(),
                k * n / cfg.group_size() as usize
            )));
        }
        if let Some(bad) = scales
            .iter()
            .find(|s| !s.is_finite() || f16_to_f32(**s) < 0.0)
        {
            return Err(FluteError::Input(format!("invalid scale {bad:?}")));
        }
        Ok(Self {
            k,
            n,
            cfg,
            indices,
            scales,
            table,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn config(&self) -> QuantConfig {
        self.cfg
    }

    pub fn indices(&self) -> &[u8] {
        &self.indices
    }

    pub fn index(&self, i: usize, j: usize) -> u8 {
        self.indices[i * self.n + j]
    }

    pub fn scales(&self) -> &[Half] {
        &self.scales
    }

    pub fn table(&self) -> &LookupTable<T> {
        &self.table
    }

    pub fn group_of(&self, i: usize, j: usize) -> usize {
        group_of(self.k, self.cfg.group_size() as usize, i, j)
    }

    pub fn scale_at(&self, i: usize, j: usize) -> Half {
        self.scales[self.group_of(i, j)]
    }
}

pub fn group_of(k: usize, group: usize, i: usize, j: usize) -> usize {
    j * (k / group) + i / group
}

/// Per-group absmax of a `k x n` matrix, in group order.
pub fn group_absmax<T: Real>(w: &Matrix<T>, cfg: QuantConfig) -> Result<Vec<T>> {
    let (k, n) = (w.rows(), w.cols());
    cfg.check_k(k)?;
    let b = cfg.group_size() as usize;
    let mut out = vec![T::zero(); k * n / b];
    for i in 0..k {
        for j in 0..n {
            let v = w[(i, j)];
            if !v.is_finite() {
                return Err(FluteError::Input(format!(
                    "non-finite weight at ({i}, {j})"
                )));
            }
            let g = group_of(k, b, i, j);
            out[g] = out[g].max(v.abs());
        }
    }
    Ok(out)
}

/// Nearest-quantile indices given one effective scale per group.
fn assign_indices<T: Real>(
    w: &Matrix<T>,
    cfg: QuantConfig,
    table: &LookupTable<T>,
    scales: &[T],
) -> Vec<u8> {
    let (k, n) = (w.rows(), w.cols());
    let b = cfg.group_size() as usize;
    let zero = table.zero_index();
    let mut out = vec![zero; k * n];
    for i in 0..k {
        for j in 0..n {
            let s = scales[group_of(k, b, i, j)];
            if s != T::zero() {
                out[i * n + j] = table.nearest(w[(i, j)] / s);
            }
        }
    }
    out
}

fn scales_to_half<T: Real>(scales: &[T]) -> Result<Vec<Half>> {
    scales
        .iter()
        .enumerate()
        .map(|(g, &s)| {
            let h = f32_to_f16(to_f32(s));
            if !h.is_finite() || s < T::zero() {
                Err(FluteError::Input(format!(
                    "group {g} scale {s} not representable as a non-negative half"
                )))
            } else {
                Ok(h)
            }
        })
        .collect()
}

/// Absmax group quantization onto the NormalFloat table.
pub fn quantize_matrix<T: Real>(w: &Matrix<T>, cfg: QuantConfig) -> Result<QuantizedMatrix<T>> {
    let table = build_nf_table::<T>(cfg.bits())?;
    let absmax = group_absmax(w, cfg)?;
    let indices = assign_indices(w, cfg, &table, &absmax);
    let scales = scales_to_half(&absmax)?;
    QuantizedMatrix::from_parts(w.rows(), w.cols(), cfg, indices, scales, table)
}

/// `W_hat[i][j] = s_g * T[Q[i][j]]` with the scale widened from Half.
pub fn dequantize_matrix<T: Real>(q: &QuantizedMatrix<T>) -> Matrix<T> {
    let values = q.table().values();
    Matrix::from_fn(q.k(), q.n(), |i, j| {
        let s = T::from_f64_lossy(f16_to_f32(q.scale_at(i, j)) as f64);
        s * values[q.index(i, j) as usize]
    })
}

/// Layer-reconstruction objective for learned scales,
/// `L = ||X W_hat - X W||_F^2` with `W_hat[i][j] = s_g * sigma_g * q[c_ij]`.
///
/// Indices are computed from the current `sigma` and then held fixed while
/// differentiating (straight-through).
pub struct ScaleObjective<'a, T> {
    w: &'a Matrix<T>,
    x: &'a Matrix<T>,
    cfg: QuantConfig,
    table: LookupTable<T>,
    absmax: Vec<T>,
}

impl<'a, T: Real> ScaleObjective<'a, T> {
    pub fn new(w: &'a Matrix<T>, x: &'a Matrix<T>, cfg: QuantConfig) -> Result<Self> {
        if x.cols() != w.rows() {
            return Err(FluteError::Config(format!(
                "calibration matrix has {} columns, weights have k = {}",
                x.cols(),
                w.rows()
            )));
        }
        let table = build_nf_table::<T>(cfg.bits())?;
        let absmax = group_absmax(w, cfg)?;
        Ok(Self {
            w,
            x,
            cfg,
            table,
            absmax,
        })
    }

    pub fn table(&self) -> &LookupTable<T> {
        &self.table
    }

    pub fn absmax(&self) -> &[T] {
        &self.absmax
    }

    pub fn num_groups(&self) -> usize {
        self.absmax.len()
    }

    pub fn initial_sigma(&self) -> Vec<T> {
        vec![self.table.sigma(); self.absmax.len()]
    }

    /// `s_g * sigma_g / sigma`, the scale that multiplies the normalized table.
    pub fn effective_scales(&self, sigma_tilde: &[T]) -> Vec<T> {
        let sigma = self.table.sigma();
        self.absmax
            .iter()
            .zip(sigma_tilde)
            .map(|(&s, &st)| s * (st / sigma))
            .collect()
    }

    pub fn indices(&self, sigma_tilde: &[T]) -> Vec<u8> {
        assign_indices(
            self.w,
            self.cfg,
            &self.table,
            &self.effective_scales(sigma_tilde),
        )
    }

    fn reconstruction(&self, sigma_tilde: &[T], indices: &[u8]) -> Matrix<T> {
        let (k, n) = (self.w.rows(), self.w.cols());
        let b = self.cfg.group_size() as usize;
        let raw = self.table.raw_quantiles();
        Matrix::from_fn(k, n, |i, j| {
            let g = group_of(k, b, i, j);
            self.absmax[g] * sigma_tilde[g] * raw[indices[i * n + j] as usize]
        })
    }

    pub fn loss(&self, sigma_tilde: &[T], indices: &[u8]) -> T {
        let diff = self
            .reconstruction(sigma_tilde, indices)
            .sub(self.w)
            .expect("same shape");
        self.x.matmul(&diff).expect("checked in new").frobenius_sq()
    }

    /// Loss and `dL/dsigma_g` for every group, indices held constant.
    pub fn loss_and_grad(&self, sigma_tilde: &[T], indices: &[u8]) -> (T, Vec<T>) {
        let (k, n) = (self.w.rows(), self.w.cols());
        let b = self.cfg.group_size() as usize;
        let diff = self
            .reconstruction(sigma_tilde, indices)
            .sub(self.w)
            .expect("same shape");
        let residual = self.x.matmul(&diff).expect("checked in new");
        let loss = residual.frobenius_sq();
        let two = T::one() + T::one();
        let upstream = self.x.transpose().matmul(&residual).expect("shapes agree");
        let raw = self.table.raw_quantiles();
        let mut grad = vec![T::zero(); self.absmax.len()];
        for i in 0..k {
            for j in 0..n {
                let g = group_of(k, b, i, j);
                grad[g] +=
                    two * upstream[(i, j)] * self.absmax[g] * raw[indices[i * n + j] as usize];
            }
        }
        (loss, grad)
    }
}

/// Result of [`refine_scales`].
#[derive(Debug, Clone)]
pub struct ScaleRefinement<T> {
    /// Indices re-assigned under the final scales, with `s * sigma / sigma_0` folded into the Half scales.
    pub quantized: QuantizedMatrix<T>,
    pub sigma_tilde: Vec<T>,
    /// Loss at the start of every step.
    pub history: Vec<T>,
    pub initial_loss: T,
    pub final_loss: T,
}

/// Learn one `sigma_g` per group by gradient descent on the reconstruction
/// loss, then fold it into the stored scales so dequantization still reads
/// one scalar per group from the normalized table.
pub fn refine_scales<T: Real>(
    w: &Matrix<T>,
    x_calib: &Matrix<T>,
    cfg: QuantConfig,
    steps: usize,
    lr: T,
) -> Result<ScaleRefinement<T>> {
    let objective = ScaleObjective::new(w, x_calib, cfg)?;
    let mut sigma = objective.initial_sigma();
    let initial_indices = objective.indices(&sigma);
    let initial_loss = objective.loss(&sigma, &initial_indices);
    if !initial_loss.is_finite() {
        return Err(FluteError::Optimization {
            step: 0,
            loss: initial_loss.to_f64_lossy(),
        });
    }

    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let indices = objective.indices(&sigma);
        let (loss, grad) = objective.loss_and_grad(&sigma, &indices);
        if !loss.is_finite() {
            return Err(FluteError::Optimization {
                step,
                loss: loss.to_f64_lossy(),
            });
        }
        history.push(loss);
        for (s, g) in sigma.iter_mut().zip(&grad) {
            *s -= lr * *g;
        }
        if sigma.iter().any(|s| !s.is_finite() || *s <= T::zero()) {
            return Err(FluteError::Optimization {
                step,
                loss: loss.to_f64_lossy(),
            });
        }
    }

    let indices = objective.indices(&sigma);
    let final_loss = objective.loss(&sigma, &indices);
    if !final_loss.is_finite() {
        return Err(FluteError::Optimization {
            step: steps,
            loss: final_loss.to_f64_lossy(),
        });
    }
    let scales = scales_to_half(&objective.effective_scales(&sigma))?;
    let quantized = QuantizedMatrix::from_parts(
        w.rows(),
        w.cols(),
        cfg,
        indices,
        scales,
        objective.table().clone(),
    )?;
    Ok(ScaleRefinement {
        quantized,
        sigma_tilde: sigma,
        history,
        initial_loss,
        final_loss,
    })
}
