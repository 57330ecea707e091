//! FLTE: binary container for packed quantized weights.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic        4 bytes  "FLTE"
//! version      u8       1
//! bits         u8
//! group        u32
//! k, n         u32, u32
//! slice_count  u8
//! table        2^bits x u16 (binary16)
//! scales       k*n/group x u16 (binary16)
//! per slice:   slice_bits u8, word_count u32, word_count x u32
//! layout       6 x u16: tile_m, tile_n, tile_k, frag_m, frag_n, frag_k
//! ```

use crate::engine::FluteWeights;
use crate::error::{FluteError, Result};
use crate::nfquant::QuantConfig;
use crate::numerics::Half;
use crate::restructure::{BitSlice, LayoutDescriptor, PackedWeights};

pub const MAGIC: &[u8; 4] = b"FLTE";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlteFile {
    pub bits: u8,
    pub group: u32,
    pub k: u32,
    pub n: u32,
    pub table: Vec<Half>,
    pub scales: Vec<Half>,
    pub slices: Vec<BitSlice>,
    pub layout: LayoutDescriptor,
}

impl FlteFile {
    pub fn from_weights(w: &FluteWeights) -> Self {
        FlteFile {
            bits: w.config().bits(),
            group: w.config().group_size(),
            k: w.k() as u32,
            n: w.n() as u32,
            table: w.table().to_vec(),
            scales: w.scales().to_vec(),
            slices: w.packed().slices().to_vec(),
            layout: *w.layout(),
        }
    }

    pub fn to_weights(&self, dup: usize) -> Result<FluteWeights> {
        let cfg = QuantConfig::new(self.bits, self.group)?;
        let packed = PackedWeights::from_parts(
            self.k as usize,
            self.n as usize,
            self.bits,
            self.layout,
            self.slices.clone(),
        )?;
        FluteWeights::from_parts(cfg, packed, self.scales.clone(), self.table.clone(), dup)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let words: usize = self.slices.iter().map(|s| s.words.len()).sum();
        let mut out = Vec::with_capacity(
            24 + 2 * (self.table.len() + self.scales.len()) + 5 * self.slices.len() + 4 * words,
        );
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.bits);
        out.extend_from_slice(&self.group.to_le_bytes());
        out.extend_from_slice(&self.k.to_le_bytes());
        out.extend_from_slice(&self.n.to_le_bytes());
        out.push(self.slices.len() as u8);
        for h in self.table.iter().chain(&self.scales) {
            out.extend_from_slice(&h.to_bits().to_le_bytes());
        }
        for s in &self.slices {
            out.push(s.bits);
            out.extend_from_slice(&(s.words.len() as u32).to_le_bytes());
            for w in &s.words {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        let l = &self.layout;
        for d in [l.tile_m, l.tile_n, l.tile_k, l.frag_m, l.frag_n, l.frag_k] {
            out.extend_from_slice(&(d as u16).to_le_bytes());
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.error(0, "magic", "not an FLTE file"));
        }
        let version = r.u8("version")?;
        if version != VERSION {
            return Err(r.error(4, "version", format!("unsupported version {version}")));
        }
        let at = r.pos;
        let bits = r.u8("header")?;
        if !(1..=8).contains(&bits) {
            return Err(r.error(at, "header", format!("bit width {bits} out of range")));
        }
        let at = r.pos;
        let group = r.u32("header")?;
        if group == 0 {
            return Err(r.error(at, "header", "group size is zero"));
        }
        let k = r.u32("header")?;
        let n = r.u32("header")?;
        if k % group != 0 {
            return Err(r.error(
                at,
                "header",
                format!("k = {k} is not a multiple of group {group}"),
            ));
        }
        let slice_count = r.u8("header")?;

        let table = r.halves(1usize << bits, "table")?;
        let scale_count = (k as u64 * n as u64 / group as u64) as usize;
        let scales = r.halves(scale_count, "scales")?;

        let mut slices = Vec::with_capacity(slice_count as usize);
        for _ in 0..slice_count {
            let at = r.pos;
            let slice_bits = r.u8("slice header")?;
            if !matches!(slice_bits, 1 | 2 | 4 | 8) {
                return Err(r.error(
                    at,
                    "slice header",
                    format!("slice width {slice_bits} is not a power of two"),
                ));
            }
            let at = r.pos;
            let count = r.u32("slice header")? as usize;
            let expected = crate::restructure::words_for(k as usize * n as usize, slice_bits);
            if count != expected {
                return Err(r.error(
                    at,
                    "slice header",
                    format!("word count {count}, expected {expected}"),
                ));
            }
            let raw = r.take(count * 4, "slice words")?;
            let words = raw
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            slices.push(BitSlice {
                bits: slice_bits,
                words,
            });
        }
        if slices.iter().map(|s| s.bits as u32).sum::<u32>() != bits as u32 {
            return Err(r.error(
                r.pos,
                "slice header",
                "slice widths do not add up to the bit width",
            ));
        }

        let at = r.pos;
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = r.u16("layout")? as usize;
        }
        let layout = LayoutDescriptor {
            tile_m: dims[0],
            tile_n: dims[1],
            tile_k: dims[2],
            frag_m: dims[3],
            frag_n: dims[4],
            frag_k: dims[5],
        };
        layout
            .check_weights(k as usize, n as usize)
            .map_err(|e| r.error(at, "layout", e.to_string()))?;
        if r.pos != bytes.len() {
            return Err(r.error(
                r.pos,
                "trailer",
                format!("{} unexpected trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(FlteFile {
            bits,
            group,
            k,
            n,
            table,
            scales,
            slices,
            layout,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(
        &self,
        offset: usize,
        section: &'static str,
        message: impl Into<String>,
    ) -> FluteError {
        FluteError::Parse {
            offset,
            section,
            message: message.into(),
        }
    }

    fn take(&mut self, len: usize, section: &'static str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                self.error(
                    self.pos,
                    section,
                    format!(
                        "truncated: need {len} bytes, {} left",
                        self.bytes.len() - self.pos
                    ),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, section: &'static str) -> Result<u8> {
        Ok(self.take(1, section)?[0])
    }

    fn u16(&mut self, section: &'static str) -> Result<u16> {
        let b = self.take(2, section)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, section: &'static str) -> Result<u32> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn halves(&mut self, count: usize, section: &'static str) -> Result<Vec<Half>> {
        let len = count
            .checked_mul(2)
            .ok_or_else(|| self.error(self.pos, section, "length overflow"))?;
        let raw = self.take(len, section)?;
        Ok(raw
            .chunks_exact(2)
            .map(|c| Half::from_bits(u16::from_le_bytes([c[0], c[1]])))
            .collect())
    }
}
