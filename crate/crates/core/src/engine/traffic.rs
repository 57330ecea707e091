use std::ops::AddAssign;

use crate::error::Result;
use crate::lut_dequant::VectorizedTable;
use crate::nfquant::QuantConfig;
use crate::restructure::LayoutDescriptor;
use crate::streamk::{plan_stream_k, TileGrid};

/// Global-memory traffic and work counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrafficStats {
    pub bytes_weights: u64,
    pub bytes_scales: u64,
    pub bytes_table: u64,
    pub bytes_activations: u64,
    pub bytes_partials_rw: u64,
    pub bytes_output: u64,
    /// Two per multiply-accumulate over the unpadded problem.
    pub flops: u64,
    /// Weight entries fetched, counted with multiplicity.
    pub weight_elements: u64,
}

impl TrafficStats {
    pub const CSV_HEADER: &'static str = "bytes_weights,bytes_scales,bytes_table,bytes_activations,bytes_partials_rw,bytes_output,total_bytes,flops,arithmetic_intensity";

    pub fn total_bytes(&self) -> u64 {
        self.bytes_weights
            + self.bytes_scales
            + self.bytes_table
            + self.bytes_activations
            + self.bytes_partials_rw
            + self.bytes_output
    }

    pub fn arithmetic_intensity(&self) -> f64 {
        let total = self.total_bytes();
        if total == 0 {
            0.0
        } else {
            self.flops as f64 / total as f64
        }
    }

    /// Bytes the same fetch schedule would move with 16-bit dense weights.
    pub fn dense_weight_bytes(&self) -> u64 {
        self.weight_elements * 2
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.6}",
            self.bytes_weights,
            self.bytes_scales,
            self.bytes_table,
            self.bytes_activations,
            self.bytes_partials_rw,
            self.bytes_output,
            self.total_bytes(),
            self.flops,
            self.arithmetic_intensity()
        )
    }
}

impl AddAssign for TrafficStats {
    fn add_assign(&mut self, o: Self) {
        self.bytes_weights += o.bytes_weights;
        self.bytes_scales += o.bytes_scales;
        self.bytes_table += o.bytes_table;
        self.bytes_activations += o.bytes_activations;
        self.bytes_partials_rw += o.bytes_partials_rw;
        self.bytes_output += o.bytes_output;
        self.flops += o.flops;
        self.weight_elements += o.weight_elements;
    }
}

/// Stored bits per weight: index bits plus one Half scale per group.
pub fn bits_per_param(cfg: QuantConfig) -> f64 {
    if !cfg.is_quantized() {
        return cfg.bits() as f64;
    }
    cfg.bits() as f64 + 16.0 / cfg.group_size() as f64
}

/// Round half away from zero to two decimals, the way the compression
/// tables report bits per parameter.
pub fn round_2dp(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Quantized weight + scale bytes over dense 16-bit weight bytes.
pub fn weight_traffic_ratio(stats: &TrafficStats, dense_bytes: u64) -> f64 {
    (stats.bytes_weights + stats.bytes_scales) as f64 / dense_bytes as f64
}

/// Distinct scale groups touched by rows `k0..k0 + rows` of one column.
pub(crate) fn groups_in_rows(k0: usize, rows: usize, group: usize) -> usize {
    (k0 + rows - 1) / group - k0 / group + 1
}

/// Traffic of one unit of work (one output tile row block times one k-slice).
pub(crate) fn unit_traffic(
    rows_active: usize,
    k0: usize,
    layout: &LayoutDescriptor,
    cfg: QuantConfig,
) -> TrafficStats {
    let elems = (layout.tile_k * layout.tile_n) as u64;
    let (bytes_weights, bytes_scales) = if cfg.is_quantized() {
        let bits = cfg.bits() as u64;
        let groups = groups_in_rows(k0, layout.tile_k, cfg.group_size() as usize) * layout.tile_n;
        (elems * bits / 8, groups as u64 * 2)
    } else {
        (elems * 2, 0)
    };
    TrafficStats {
        bytes_weights,
        bytes_scales,
        bytes_activations: (rows_active * layout.tile_k * 2) as u64,
        flops: 2 * rows_active as u64 * elems,
        weight_elements: elems,
        ..TrafficStats::default()
    }
}

/// Traffic the engine reports for an `m x k` by `k x n` problem, computed
/// from the schedule alone.
///
/// `cfg` may be [`QuantConfig::unquantized`] to price the 16-bit baseline,
/// in which case no table is loaded.
pub fn traffic_model(
    m: usize,
    n: usize,
    k: usize,
    cfg: QuantConfig,
    layout: &LayoutDescriptor,
    dup: usize,
    workers: usize,
) -> Result<TrafficStats> {
    layout.check_weights(k, n)?;
    if cfg.is_quantized() {
        cfg.check_k(k)?;
    }
    let grid = TileGrid::new(
        m.div_ceil(layout.tile_m).max(1),
        n / layout.tile_n,
        k / layout.tile_k,
    )?;
    let plan = plan_stream_k(grid, workers)?;
    let rows_of = |tm: usize| (m - tm * layout.tile_m).min(layout.tile_m);

    let mut stats = TrafficStats::default();
    if cfg.is_quantized() {
        let table_bytes = (1u64 << (2 * cfg.bits())) * 4 * dup as u64;
        stats.bytes_table =
            table_bytes * plan.ranges().iter().filter(|r| !r.is_empty()).count() as u64;
    }
    for unit in 0..grid.total_units() {
        let t = grid.unit(unit);
        stats += unit_traffic(rows_of(t.m), t.k * layout.tile_k, layout, cfg);
    }
    for tile in 0..grid.output_tiles() {
        let rows = rows_of(tile / grid.tiles_n);
        let tile_bytes = (rows * layout.tile_n * 2) as u64;
        stats.bytes_output += tile_bytes;
        if let Some(f) = plan.fixup_for_tile(tile) {
            // Each contributor writes once, the finisher reads it back once.
            stats.bytes_partials_rw += 2 * tile_bytes * f.contributors.len() as u64;
        }
    }
    Ok(stats)
}

/// Bytes of the vectorized table a worker copies in.
pub fn table_bytes(vt: &VectorizedTable) -> u64 {
    vt.byte_len() as u64
}
