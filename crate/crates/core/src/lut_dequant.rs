//! Paired ("vectorized") lookup tables and the shared-memory bank model.
//!
//! Entry `e = (i << b) | j` of the vectorized table is one 32-bit word holding
//! `(T[i], T[j])` as two halves, `T[i]` in the low 16 bits. With duplication
//! factor `d` the copies are interleaved: copy `c` of entry `e` sits at word
//! address `e * d + c`, and lane `l` of a warp reads copy `l mod d`.
//!
//! Banks are modeled in 32-bit word units: 32 banks, `bank(addr) = addr mod 32`.
//! Lanes hitting the same address are served by one broadcast.

use rand::Rng;

use crate::error::{FluteError, Result};
use crate::matrix::Matrix;
use crate::nfquant::{LookupTable, QuantizedMatrix};
use crate::numerics::{f16_to_f32, f32_to_f16, Half};
use crate::scalar::Real;

pub const NUM_BANKS: usize = 32;
pub const WARP_SIZE: usize = 32;
pub const SUPPORTED_DUPS: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VectorizedTable {
    bits: u8,
    dup: usize,
    words: Vec<u32>,
}

/// Build the pair table from a scalar table, with `dup` interleaved copies.
pub fn make_vectorized_lut<T: Real>(table: &LookupTable<T>, dup: usize) -> Result<VectorizedTable> {
    VectorizedTable::from_half(&table.to_half(), dup)
}

impl VectorizedTable {
    pub fn from_half(table: &[Half], dup: usize) -> Result<Self> {
        let bits = match table.len() {
            4 => 2u8,
            8 => 3,
            16 => 4,
            len => {
                return Err(FluteError::Config(format!(
                    "unsupported table length {len}"
                )))
            }
        };
        if !SUPPORTED_DUPS.contains(&dup) {
            return Err(FluteError::Config(format!(
                "unsupported duplication factor {dup}"
            )));
        }
        let entries = 1usize << (2 * bits);
        let mut words = vec![0u32; entries * dup];
        for i in 0..table.len() {
            for j in 0..table.len() {
                let e = (i << bits) | j;
                let word = (table[i].to_bits() as u32) | ((table[j].to_bits() as u32) << 16);
                for c in 0..dup {
                    words[e * dup + c] = word;
                }
            }
        }
        Ok(Self { bits, dup, words })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn dup(&self) -> usize {
        self.dup
    }

    pub fn entries(&self) -> usize {
        1 << (2 * self.bits)
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    pub fn byte_len(&self) -> usize {
        self.words.len() * 4
    }

    pub fn address(&self, entry: usize, copy: usize) -> usize {
        entry * self.dup + copy
    }

    /// `(first, second)` halves of copy `copy` of `entry`.
    pub fn entry(&self, entry: usize, copy: usize) -> (Half, Half) {
        let w = self.words[self.address(entry, copy)];
        (Half::from_bits(w as u16), Half::from_bits((w >> 16) as u16))
    }

    pub fn pack_pair(&self, first: u8, second: u8) -> u32 {
        ((first as u32) << self.bits) | second as u32
    }
}

/// `f16(f32(scale) * f32(value))`, the scalar dequantization the kernel performs.
#[inline]
pub fn scalar_dequantize(index: u8, scale: Half, half_table: &[Half]) -> Half {
    f32_to_f16(f16_to_f32(scale) * f16_to_f32(half_table[index as usize]))
}

/// Scalar kernel-side dequantization of a whole matrix, one lookup per entry.
pub fn dequantize_matrix_half<T: Real>(q: &QuantizedMatrix<T>) -> Matrix<Half> {
    let half = q.table().to_half();
    Matrix::from_fn(q.k(), q.n(), |i, j| {
        scalar_dequantize(q.index(i, j), q.scale_at(i, j), &half)
    })
}

/// Look up both values of a packed index pair with one word read and scale
/// them: each product in binary32, rounded to Half.
#[inline]
pub fn vec_dequantize(packed_pair: u32, scale: Half, vt: &VectorizedTable) -> (Half, Half) {
    vec_dequantize_lane(packed_pair, scale, vt, 0)
}

/// As [`vec_dequantize`], reading the copy lane `lane` would use.
#[inline]
pub fn vec_dequantize_lane(
    packed_pair: u32,
    scale: Half,
    vt: &VectorizedTable,
    lane: usize,
) -> (Half, Half) {
    debug_assert!((packed_pair as usize) < vt.entries());
    let (a, b) = vt.entry(packed_pair as usize, lane % vt.dup);
    let s = f16_to_f32(scale);
    (f32_to_f16(s * f16_to_f32(a)), f32_to_f16(s * f16_to_f32(b)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BankAccessReport {
    /// Distinct addresses requested from each bank.
    pub per_bank: [u8; NUM_BANKS],
    /// Serialization factor: max over banks, at least 1.
    pub conflict_degree: usize,
}

/// Conflict degree of one warp-wide shared-memory access.
pub fn conflict_degree(lane_addresses: &[usize; WARP_SIZE]) -> BankAccessReport {
    let mut sorted = *lane_addresses;
    sorted.sort_unstable();
    let mut per_bank = [0u8; NUM_BANKS];
    let mut prev = None;
    for &a in &sorted {
        if prev != Some(a) {
            per_bank[a % NUM_BANKS] += 1;
            prev = Some(a);
        }
    }
    let conflict_degree = per_bank.iter().copied().max().unwrap_or(1).max(1) as usize;
    BankAccessReport {
        per_bank,
        conflict_degree,
    }
}

/// Bank report for a warp where lane `l` looks up pair entry `indices[l]`.
pub fn simulate_warp_lookup(indices: &[u32; WARP_SIZE], vt: &VectorizedTable) -> BankAccessReport {
    let mut addrs = [0usize; WARP_SIZE];
    for (l, (a, &e)) in addrs.iter_mut().zip(indices).enumerate() {
        *a = vt.address(e as usize, l % vt.dup);
    }
    conflict_degree(&addrs)
}

/// Closed-form worst-case degree for a `bits`-bit pair table with `dup`
/// interleaved copies.
///
/// Lanes of copy `c` (there are `32 / d`) only reach banks `= c mod d`, and
/// each such bank holds `2^(2b) * d / 32` distinct entries of that copy.
pub fn worst_case_degree(bits: u8, dup: usize) -> usize {
    let entries = 1usize << (2 * bits);
    let lanes_per_copy = WARP_SIZE / dup;
    let entries_per_bank = (entries * dup).div_ceil(NUM_BANKS);
    lanes_per_copy.min(entries_per_bank).clamp(1, NUM_BANKS)
}

/// A warp access pattern that attains [`worst_case_degree`].
pub fn adversarial_warp(bits: u8, dup: usize) -> [u32; WARP_SIZE] {
    let entries = 1usize << (2 * bits);
    let stride = NUM_BANKS / dup;
    let reach = worst_case_degree(bits, dup);
    let mut out = [0u32; WARP_SIZE];
    for (l, o) in out.iter_mut().enumerate() {
        let t = (l / dup) % reach;
        *o = ((t * stride) % entries) as u32;
    }
    out
}

/// Uniformly random pair indices for one warp.
pub fn random_warp<R: Rng + ?Sized>(rng: &mut R, bits: u8) -> [u32; WARP_SIZE] {
    let entries = 1u32 << (2 * bits);
    let mut out = [0u32; WARP_SIZE];
    for o in out.iter_mut() {
        *o = rng.gen_range(0..entries);
    }
    out
}

/// Random warp whose lanes all draw entries that map to one bank per copy.
pub fn random_bank_targeted_warp<R: Rng + ?Sized>(
    rng: &mut R,
    bits: u8,
    dup: usize,
) -> [u32; WARP_SIZE] {
    let entries = 1usize << (2 * bits);
    let stride = NUM_BANKS / dup;
    let class = rng.gen_range(0..stride.min(entries));
    let candidates = (entries - class).div_ceil(stride);
    let mut out = [0u32; WARP_SIZE];
    for o in out.iter_mut() {
        *o = (class + rng.gen_range(0..candidates) * stride) as u32;
    }
    out
}

/// Distribution of conflict degrees over many warps.
#[derive(Debug, Clone, PartialEq)]
pub struct DegreeStats {
    pub warps: usize,
    /// `histogram[d]` counts warps with degree `d` (index 0 unused).
    pub histogram: [u64; NUM_BANKS + 1],
    pub mean: f64,
    pub p99: usize,
    pub max: usize,
}

impl DegreeStats {
    pub fn from_degrees(degrees: impl IntoIterator<Item = usize>) -> Self {
        let mut histogram = [0u64; NUM_BANKS + 1];
        let mut warps = 0usize;
        let mut sum = 0u64;
        for d in degrees {
            histogram[d] += 1;
            warps += 1;
            sum += d as u64;
        }
        let max = (1..=NUM_BANKS)
            .rev()
            .find(|&d| histogram[d] > 0)
            .unwrap_or(0);
        let target = (warps as f64 * 0.99).ceil() as u64;
        let mut acc = 0;
        let mut p99 = 0;
        for (d, &c) in histogram.iter().enumerate() {
            acc += c;
            if acc >= target && c > 0 {
                p99 = d;
                break;
            }
        }
        let mean = if warps == 0 {
            0.0
        } else {
            sum as f64 / warps as f64
        };
        DegreeStats {
            warps,
            histogram,
            mean,
            p99,
            max,
        }
    }
}

/// Monte-Carlo over uniformly random warps.
pub fn monte_carlo_degrees<R: Rng + ?Sized>(
    rng: &mut R,
    vt: &VectorizedTable,
    warps: usize,
) -> DegreeStats {
    DegreeStats::from_degrees(
        (0..warps).map(|_| simulate_warp_lookup(&random_warp(rng, vt.bits), vt).conflict_degree),
    )
}
