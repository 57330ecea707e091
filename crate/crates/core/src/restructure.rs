//! Offline reordering and bit-slice packing of index matrices.
//!
//! Indices are permuted into fragment-major order (weight tile, then
//! fragment within the tile, then row-major inside the fragment) so that a
//! worker reading one fragment gets exactly the `frag_k x frag_n` block its
//! multiply-accumulate consumes. Weight tiles are ordered `(n_tile, k_tile)`
//! with `k_tile` innermost, matching the Stream-K walk.
//!
//! Each index is then split into power-of-two-wide slices (3 bits become a
//! 2-bit high slice and a 1-bit low slice) packed little-endian into `u32`
//! words, element 0 in the least significant bits.

use crate::error::{FluteError, Result};
use crate::nfquant::QuantizedMatrix;
use crate::scalar::Real;

/// Tile and fragment geometry shared by the packer and the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayoutDescriptor {
    pub tile_m: usize,
    pub tile_n: usize,
    pub tile_k: usize,
    pub frag_m: usize,
    pub frag_n: usize,
    pub frag_k: usize,
}

impl Default for LayoutDescriptor {
    fn default() -> Self {
        LayoutDescriptor {
            tile_m: 16,
            tile_n: 32,
            tile_k: 64,
            frag_m: 16,
            frag_n: 8,
            frag_k: 16,
        }
    }
}

impl LayoutDescriptor {
    pub fn new(
        tile_m: usize,
        tile_n: usize,
        tile_k: usize,
        frag_m: usize,
        frag_n: usize,
        frag_k: usize,
    ) -> Result<Self> {
        let l = LayoutDescriptor {
            tile_m,
            tile_n,
            tile_k,
            frag_m,
            frag_n,
            frag_k,
        };
        l.validate()?;
        Ok(l)
    }

    /// Tiles and fragments cover the whole tile with no remainder.
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.tile_m,
            self.tile_n,
            self.tile_k,
            self.frag_m,
            self.frag_n,
            self.frag_k,
        ];
        if dims.iter().any(|&d| d == 0 || d > u16::MAX as usize) {
            return Err(FluteError::Config(format!(
                "layout dims out of range: {self:?}"
            )));
        }
        if !self.tile_m.is_multiple_of(self.frag_m)
            || !self.tile_n.is_multiple_of(self.frag_n)
            || !self.tile_k.is_multiple_of(self.frag_k)
        {
            return Err(FluteError::Config(format!(
                "tile dims must be multiples of fragment dims: {self:?}"
            )));
        }
        Ok(())
    }

    /// Identity permutation for a `k x n` matrix: one tile, one fragment.
    pub fn identity(k: usize, n: usize) -> Self {
        LayoutDescriptor {
            tile_m: 16,
            tile_n: n,
            tile_k: k,
            frag_m: 16,
            frag_n: n,
            frag_k: k,
        }
    }

    pub fn check_weights(&self, k: usize, n: usize) -> Result<()> {
        self.validate()?;
        if k == 0 || n == 0 || !k.is_multiple_of(self.tile_k) || !n.is_multiple_of(self.tile_n) {
            return Err(FluteError::Config(format!(
                "{k}x{n} weights are not divisible into {}x{} tiles",
                self.tile_k, self.tile_n
            )));
        }
        Ok(())
    }

    pub fn tile_elems(&self) -> usize {
        self.tile_k * self.tile_n
    }

    pub fn frag_elems(&self) -> usize {
        self.frag_k * self.frag_n
    }

    pub fn frags_per_tile(&self) -> usize {
        (self.tile_k / self.frag_k) * (self.tile_n / self.frag_n)
    }

    /// Packed position of weight `(i, j)` in a `k x n` matrix.
    pub fn packed_position(&self, k: usize, i: usize, j: usize) -> usize {
        let tiles_k = k / self.tile_k;
        let (nt, kt) = (j / self.tile_n, i / self.tile_k);
        let (ii, jj) = (i % self.tile_k, j % self.tile_n);
        let frag = (ii / self.frag_k) * (self.tile_n / self.frag_n) + jj / self.frag_n;
        let (r, c) = (ii % self.frag_k, jj % self.frag_n);
        (nt * tiles_k + kt) * self.tile_elems() + frag * self.frag_elems() + r * self.frag_n + c
    }

    /// Inverse of [`packed_position`](Self::packed_position).
    pub fn coordinate_of(&self, k: usize, pos: usize) -> (usize, usize) {
        let tiles_k = k / self.tile_k;
        let (tile, rest) = (pos / self.tile_elems(), pos % self.tile_elems());
        let (frag, inner) = (rest / self.frag_elems(), rest % self.frag_elems());
        let frags_n = self.tile_n / self.frag_n;
        let (fk, fnn) = (frag / frags_n, frag % frags_n);
        let (r, c) = (inner / self.frag_n, inner % self.frag_n);
        let (nt, kt) = (tile / tiles_k, tile % tiles_k);
        (
            kt * self.tile_k + fk * self.frag_k + r,
            nt * self.tile_n + fnn * self.frag_n + c,
        )
    }
}

/// Widths of the slices an index is split into, most significant first.
pub fn slice_widths(bits: u8) -> Result<Vec<u8>> {
    match bits {
        1 | 2 | 4 | 8 => Ok(vec![bits]),
        3 => Ok(vec![2, 1]),
        _ => Err(FluteError::Config(format!(
            "no slicing for {bits}-bit indices"
        ))),
    }
}

/// One bit-slice plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitSlice {
    pub bits: u8,
    pub words: Vec<u32>,
}

impl BitSlice {
    pub fn per_word(&self) -> usize {
        32 / self.bits as usize
    }

    #[inline]
    pub fn get(&self, e: usize) -> u8 {
        let per = self.per_word();
        let shift = (e % per) * self.bits as usize;
        ((self.words[e / per] >> shift) & ((1u32 << self.bits) - 1)) as u8
    }

    pub fn byte_len(&self) -> usize {
        self.words.len() * 4
    }
}

pub fn words_for(elems: usize, slice_bits: u8) -> usize {
    (elems * slice_bits as usize).div_ceil(32)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedWeights {
    k: usize,
    n: usize,
    bits: u8,
    layout: LayoutDescriptor,
    slices: Vec<BitSlice>,
}

/// `(hi << 1) | lo` for the 3-bit split.
pub fn combine_slices(hi: u8, lo: u8) -> Result<u8> {
    if hi >= 4 || lo >= 2 {
        return Err(FluteError::Internal(format!(
            "slice values out of range: hi={hi} lo={lo}"
        )));
    }
    Ok((hi << 1) | lo)
}

/// Permute and split a row-major `k x n` index matrix.
pub fn pack_indices(
    indices: &[u8],
    k: usize,
    n: usize,
    bits: u8,
    layout: LayoutDescriptor,
) -> Result<PackedWeights> {
    layout.check_weights(k, n)?;
    if indices.len() != k * n {
        return Err(FluteError::Input(format!(
            "{} indices for {k}x{n}",
            indices.len()
        )));
    }
    let widths = slice_widths(bits)?;
    let mut ordered = vec![0u8; k * n];
    for i in 0..k {
        for j in 0..n {
            let v = indices[i * n + j];
            if (v as u32) >> bits != 0 {
                return Err(FluteError::Input(format!(
                    "index {v} at ({i}, {j}) exceeds {bits} bits"
                )));
            }
            ordered[layout.packed_position(k, i, j)] = v;
        }
    }

    let mut slices = Vec::with_capacity(widths.len());
    let mut shift = bits;
    for &w in &widths {
        shift -= w;
        let per = 32 / w as usize;
        let mask = (1u8 << w) - 1;
        let mut words = vec![0u32; words_for(k * n, w)];
        for (e, &v) in ordered.iter().enumerate() {
            let part = (v >> shift) & mask;
            words[e / per] |= (part as u32) << ((e % per) * w as usize);
        }
        slices.push(BitSlice { bits: w, words });
    }
    Ok(PackedWeights {
        k,
        n,
        bits,
        layout,
        slices,
    })
}

/// Host-side preprocessing: reorder into fragment layout and split into slices.
pub fn reorder_and_split<T: Real>(
    q: &QuantizedMatrix<T>,
    layout: LayoutDescriptor,
) -> Result<PackedWeights> {
    pack_indices(q.indices(), q.k(), q.n(), q.config().bits(), layout)
}

impl PackedWeights {
    /// Reassemble from already-packed slices (e.g. read from disk).
    pub fn from_parts(
        k: usize,
        n: usize,
        bits: u8,
        layout: LayoutDescriptor,
        slices: Vec<BitSlice>,
    ) -> Result<Self> {
        layout.check_weights(k, n)?;
        let widths = slice_widths(bits)?;
        if slices.len() != widths.len() || slices.iter().zip(&widths).any(|(s, &w)| s.bits != w) {
            return Err(FluteError::Input(format!(
                "slice widths do not match {bits}-bit indices"
            )));
        }
        for s in &slices {
            if s.words.len() != words_for(k * n, s.bits) {
                return Err(FluteError::Input(format!(
                    "{}-bit slice has {} words, expected {}",
                    s.bits,
                    s.words.len(),
                    words_for(k * n, s.bits)
                )));
            }
        }
        Ok(Self {
            k,
            n,
            bits,
            layout,
            slices,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn layout(&self) -> &LayoutDescriptor {
        &self.layout
    }

    pub fn slices(&self) -> &[BitSlice] {
        &self.slices
    }

    pub fn tiles_k(&self) -> usize {
        self.k / self.layout.tile_k
    }

    pub fn tiles_n(&self) -> usize {
        self.n / self.layout.tile_n
    }

    pub fn num_tiles(&self) -> usize {
        self.tiles_k() * self.tiles_n()
    }

    pub fn tile_index(&self, n_tile: usize, k_tile: usize) -> usize {
        n_tile * self.tiles_k() + k_tile
    }

    /// Total bytes over all slice planes.
    pub fn byte_len(&self) -> usize {
        self.slices.iter().map(BitSlice::byte_len).sum()
    }

    /// Bytes one tile occupies across all slices.
    pub fn tile_bytes(&self) -> usize {
        self.slices
            .iter()
            .map(|s| self.layout.tile_elems() * s.bits as usize / 8)
            .sum()
    }

    /// Index at packed position `e`, slices recombined.
    #[inline]
    pub fn element(&self, e: usize) -> u8 {
        match self.slices.as_slice() {
            [only] => only.get(e),
            [hi, lo] => (hi.get(e) << lo.bits) | lo.get(e),
            _ => unreachable!("validated slice count"),
        }
    }

    /// `frag_k x frag_n` row-major index block for fragment `frag_idx` of tile `tile_idx`.
    pub fn unpack_fragment(&self, tile_idx: usize, frag_idx: usize) -> Result<Vec<u8>> {
        let mut out = vec![0u8; self.layout.frag_elems()];
        self.unpack_fragment_into(tile_idx, frag_idx, &mut out)?;
        Ok(out)
    }

    pub fn unpack_fragment_into(
        &self,
        tile_idx: usize,
        frag_idx: usize,
        out: &mut [u8],
    ) -> Result<()> {
        if tile_idx >= self.num_tiles() || frag_idx >= self.layout.frags_per_tile() {
            return Err(FluteError::Config(format!(
                "fragment ({tile_idx}, {frag_idx}) out of range ({} tiles, {} fragments)",
                self.num_tiles(),
                self.layout.frags_per_tile()
            )));
        }
        let base = tile_idx * self.layout.tile_elems() + frag_idx * self.layout.frag_elems();
        match self.slices.as_slice() {
            [only] => {
                for (e, o) in out.iter_mut().enumerate() {
                    *o = only.get(base + e);
                }
            }
            [hi, lo] => {
                for (e, o) in out.iter_mut().enumerate() {
                    *o = combine_slices(hi.get(base + e), lo.get(base + e))?;
                }
            }
            _ => unreachable!("validated slice count"),
        }
        Ok(())
    }

    /// Row-major `k x n` indices in original order.
    pub fn unpack_all(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.k * self.n];
        for e in 0..self.k * self.n {
            let (i, j) = self.layout.coordinate_of(self.k, e);
            out[i * self.n + j] = self.element(e);
        }
        out
    }
}
