//! Stream-K and Slice-K work decomposition.
//!
//! The iteration space is flattened output-tile-major with the k-slice
//! innermost: unit `u` belongs to output tile `u / tiles_k` and k-slice
//! `u % tiles_k`. Output tile `t` sits at grid position
//! `(t / tiles_n, t % tiles_n)`.

use std::ops::Range;

use crate::error::{FluteError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TileGrid {
    pub tiles_m: usize,
    pub tiles_n: usize,
    pub tiles_k: usize,
}

impl TileGrid {
    pub fn new(tiles_m: usize, tiles_n: usize, tiles_k: usize) -> Result<Self> {
        if tiles_m == 0 || tiles_n == 0 || tiles_k == 0 {
            return Err(FluteError::Config(format!(
                "tile counts must be positive: {tiles_m}x{tiles_n}x{tiles_k}"
            )));
        }
        Ok(Self {
            tiles_m,
            tiles_n,
            tiles_k,
        })
    }

    pub fn output_tiles(&self) -> usize {
        self.tiles_m * self.tiles_n
    }

    pub fn total_units(&self) -> usize {
        self.output_tiles() * self.tiles_k
    }

    pub fn unit(&self, unit: usize) -> TileIndex {
        let tile = unit / self.tiles_k;
        TileIndex {
            m: tile / self.tiles_n,
            n: tile % self.tiles_n,
            k: unit % self.tiles_k,
        }
    }

    /// Half-open unit range of one output tile's k-sweep.
    pub fn tile_units(&self, tile: usize) -> Range<usize> {
        tile * self.tiles_k..(tile + 1) * self.tiles_k
    }
}

/// Coordinates of one unit of work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TileIndex {
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

/// Role a worker plays for an output tile it touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TileRole {
    /// Owns the whole k-sweep; no fixup.
    Exclusive,
    /// Owns the last k-slice; waits for contributors and writes the output.
    Finisher,
    /// Stores a partial sum and signals.
    Contributor,
}

impl TileRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            TileRole::Exclusive => "exclusive",
            TileRole::Finisher => "finisher",
            TileRole::Contributor => "contributor",
        }
    }
}

/// One partial-sum slot: a (split output tile, contributor) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contribution {
    pub worker: usize,
    pub units: Range<usize>,
    pub slot: usize,
}

/// Fixup bookkeeping for an output tile split across workers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileFixup {
    pub output_tile: usize,
    /// Non-finishing workers in ascending k order.
    pub contributors: Vec<Contribution>,
    pub finisher: usize,
}

impl TileFixup {
    pub fn slot_of(&self, worker: usize) -> Option<usize> {
        self.contributors
            .iter()
            .find(|c| c.worker == worker)
            .map(|c| c.slot)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamKPlan {
    grid: TileGrid,
    ranges: Vec<Range<usize>>,
    fixups: Vec<TileFixup>,
    /// `fixup_of[tile]` indexes `fixups` for split tiles.
    fixup_of: Vec<Option<usize>>,
    num_slots: usize,
}

/// Even floor-split of the flattened iteration space over `workers`.
pub fn plan_stream_k(grid: TileGrid, workers: usize) -> Result<StreamKPlan> {
    if workers == 0 {
        return Err(FluteError::Config("need at least one worker".into()));
    }
    let total = grid.total_units();
    let ranges: Vec<Range<usize>> = (0..workers)
        .map(|w| (w * total / workers)..((w + 1) * total / workers))
        .collect();

    let mut fixups = Vec::new();
    let mut fixup_of = vec![None; grid.output_tiles()];
    let mut num_slots = 0;
    for tile in 0..grid.output_tiles() {
        let units = grid.tile_units(tile);
        let owners: Vec<(usize, Range<usize>)> = ranges
            .iter()
            .enumerate()
            .filter_map(|(w, r)| {
                let lo = r.start.max(units.start);
                let hi = r.end.min(units.end);
                (lo < hi).then_some((w, lo..hi))
            })
            .collect();
        if owners.len() < 2 {
            continue;
        }
        let (finisher, _) = owners[owners.len() - 1].clone();
        let contributors = owners[..owners.len() - 1]
            .iter()
            .map(|(w, r)| {
                let c = Contribution {
                    worker: *w,
                    units: r.clone(),
                    slot: num_slots,
                };
                num_slots += 1;
                c
            })
            .collect();
        fixup_of[tile] = Some(fixups.len());
        fixups.push(TileFixup {
            output_tile: tile,
            contributors,
            finisher,
        });
    }
    Ok(StreamKPlan {
        grid,
        ranges,
        fixups,
        fixup_of,
        num_slots,
    })
}

impl StreamKPlan {
    pub fn grid(&self) -> TileGrid {
        self.grid
    }

    pub fn workers(&self) -> usize {
        self.ranges.len()
    }

    /// Also the number of launched blocks.
    pub fn num_blocks(&self) -> usize {
        self.workers()
    }

    pub fn range(&self, worker: usize) -> Range<usize> {
        self.ranges[worker].clone()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn fixups(&self) -> &[TileFixup] {
        &self.fixups
    }

    pub fn fixup_for_tile(&self, tile: usize) -> Option<&TileFixup> {
        self.fixup_of[tile].map(|i| &self.fixups[i])
    }

    pub fn num_slots(&self) -> usize {
        self.num_slots
    }

    /// Output tiles a worker touches, in walk order, with its role for each.
    pub fn tiles_touched(&self, worker: usize) -> Vec<(usize, TileRole)> {
        let r = &self.ranges[worker];
        if r.is_empty() {
            return Vec::new();
        }
        let first = r.start / self.grid.tiles_k;
        let last = (r.end - 1) / self.grid.tiles_k;
        (first..=last)
            .map(|t| {
                let role = match self.fixup_for_tile(t) {
                    None => TileRole::Exclusive,
                    Some(f) if f.finisher == worker => TileRole::Finisher,
                    Some(_) => TileRole::Contributor,
                };
                (t, role)
            })
            .collect()
    }

    pub fn cursor(&self, worker: usize) -> SchedulerCursor<'_> {
        SchedulerCursor::initialize(self, worker)
    }
}

/// Per-worker walk over its unit range.
#[derive(Debug, Clone)]
pub struct SchedulerCursor<'a> {
    plan: &'a StreamKPlan,
    worker: usize,
    unit: usize,
    end: usize,
}

impl<'a> SchedulerCursor<'a> {
    pub fn initialize(plan: &'a StreamKPlan, worker: usize) -> Self {
        let r = plan.range(worker);
        SchedulerCursor {
            plan,
            worker,
            unit: r.start,
            end: r.end,
        }
    }

    pub fn worker(&self) -> usize {
        self.worker
    }

    pub fn unit(&self) -> usize {
        self.unit
    }

    pub fn done(&self) -> bool {
        self.unit >= self.end
    }

    pub fn get_tile_index(&self) -> TileIndex {
        self.plan.grid.unit(self.unit)
    }

    pub fn step(&mut self) -> Result<()> {
        if self.done() {
            return Err(FluteError::Internal(format!(
                "worker {} stepped past the end of its range",
                self.worker
            )));
        }
        self.unit += 1;
        Ok(())
    }

    fn tile(&self) -> usize {
        self.unit / self.plan.grid.tiles_k
    }

    /// The current unit is the last one this worker does for its output tile.
    pub fn end_of_output_tile(&self) -> bool {
        self.unit + 1 >= self.end || (self.unit + 1) / self.plan.grid.tiles_k != self.tile()
    }

    /// This worker owns the current output tile's first k-slice.
    pub fn started_output_tile(&self) -> bool {
        let first = self.plan.grid.tile_units(self.tile()).start;
        self.plan.ranges[self.worker].contains(&first)
    }

    /// This worker owns the current output tile's last k-slice.
    pub fn finished_output_tile(&self) -> bool {
        let last = self.plan.grid.tile_units(self.tile()).end - 1;
        self.plan.ranges[self.worker].contains(&last)
    }

    /// Index into [`StreamKPlan::fixups`] for a split output tile.
    pub fn get_fixup_index(&self) -> Option<usize> {
        self.plan.fixup_of[self.tile()]
    }

    pub fn get_output_tile_index(&self) -> usize {
        self.tile()
    }
}

/// Data-parallel baseline: whole output tiles dealt round-robin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceKPlan {
    grid: TileGrid,
    tiles: Vec<Vec<usize>>,
}

pub fn plan_slice_k(grid: TileGrid, workers: usize) -> Result<SliceKPlan> {
    if workers == 0 {
        return Err(FluteError::Config("need at least one worker".into()));
    }
    let mut tiles = vec![Vec::new(); workers];
    for t in 0..grid.output_tiles() {
        tiles[t % workers].push(t);
    }
    Ok(SliceKPlan { grid, tiles })
}

impl SliceKPlan {
    pub fn workers(&self) -> usize {
        self.tiles.len()
    }

    pub fn tiles(&self, worker: usize) -> &[usize] {
        &self.tiles[worker]
    }

    pub fn loads(&self) -> Vec<usize> {
        self.tiles
            .iter()
            .map(|t| t.len() * self.grid.tiles_k)
            .collect()
    }

    pub fn waves(&self) -> usize {
        self.grid.output_tiles().div_ceil(self.workers())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BalanceMetrics {
    pub max_units: usize,
    pub min_units: usize,
    /// `max_units - min_units`.
    pub imbalance: usize,
    pub waves: usize,
    /// Workers busy in the last wave.
    pub last_wave_workers: usize,
}

/// Load balance of a decomposition.
pub trait Balance {
    fn balance_metrics(&self) -> BalanceMetrics;
}

impl Balance for StreamKPlan {
    fn balance_metrics(&self) -> BalanceMetrics {
        let loads: Vec<usize> = self.ranges.iter().map(|r| r.len()).collect();
        let max_units = loads.iter().copied().max().unwrap_or(0);
        let min_units = loads.iter().copied().min().unwrap_or(0);
        BalanceMetrics {
            max_units,
            min_units,
            imbalance: max_units - min_units,
            waves: 1,
            last_wave_workers: loads.iter().filter(|&&l| l > 0).count(),
        }
    }
}

impl Balance for SliceKPlan {
    fn balance_metrics(&self) -> BalanceMetrics {
        let loads = self.loads();
        let max_units = loads.iter().copied().max().unwrap_or(0);
        let min_units = loads.iter().copied().min().unwrap_or(0);
        let waves = self.waves();
        let tiles = self.grid.output_tiles();
        let last_wave_workers = if tiles == 0 {
            0
        } else {
            tiles - (waves - 1) * self.workers()
        };
        BalanceMetrics {
            max_units,
            min_units,
            imbalance: max_units - min_units,
            waves,
            last_wave_workers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fig4_instance() {
        // 35 units, 3 workers.
        let plan = plan_stream_k(TileGrid::new(5, 1, 7).unwrap(), 3).unwrap();
        let mut sizes: Vec<usize> = plan.ranges().iter().map(|r| r.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![11, 12, 12]);
    }

    #[test]
    fn single_worker_has_no_fixups() {
        let grid = TileGrid::new(3, 2, 4).unwrap();
        let plan = plan_stream_k(grid, 1).unwrap();
        assert_eq!(plan.range(0), 0..24);
        assert!(plan.fixups().is_empty());
        let mut c = plan.cursor(0);
        while !c.done() {
            assert!(c.started_output_tile());
            assert!(c.finished_output_tile());
            assert_eq!(c.get_fixup_index(), None);
            c.step().unwrap();
        }
        assert!(c.step().is_err());
    }

    #[test]
    fn one_unit_per_worker() {
        let grid = TileGrid::new(2, 2, 3).unwrap();
        let plan = plan_stream_k(grid, grid.total_units()).unwrap();
        assert!(plan.ranges().iter().all(|r| r.len() == 1));
        assert_eq!(plan.fixups().len(), 4);
        for f in plan.fixups() {
            assert_eq!(f.contributors.len() + 1, 3);
        }
    }

    #[test]
    fn finisher_owns_last_slice() {
        let grid = TileGrid::new(5, 1, 7).unwrap();
        let plan = plan_stream_k(grid, 3).unwrap();
        for f in plan.fixups() {
            let last = grid.tile_units(f.output_tile).end - 1;
            assert!(plan.range(f.finisher).contains(&last));
        }
        // Worker 1 starts at unit 11 (tile 1, slice 4).
        let c = plan.cursor(1);
        assert_eq!(c.unit(), 11);
        assert_eq!(c.get_tile_index(), TileIndex { m: 1, n: 0, k: 4 });
        assert!(!c.started_output_tile());
        assert!(c.finished_output_tile());
    }

    #[test]
    fn slice_k_round_robin() {
        let grid = TileGrid::new(7, 1, 4).unwrap();
        let plan = plan_slice_k(grid, 3).unwrap();
        assert_eq!(plan.loads(), vec![12, 8, 8]);
        assert_eq!(plan.tiles(0), &[0, 3, 6]);
        let m = plan.balance_metrics();
        assert_eq!(m.waves, 3);
        assert_eq!(m.imbalance, 4);
        assert_eq!(m.last_wave_workers, 1);
    }

    #[test]
    fn zero_workers_rejected() {
        let grid = TileGrid::new(1, 1, 1).unwrap();
        assert!(plan_stream_k(grid, 0).is_err());
        assert!(plan_slice_k(grid, 0).is_err());
        assert!(TileGrid::new(0, 1, 1).is_err());
    }

    #[test]
    fn more_workers_than_units() {
        let grid = TileGrid::new(1, 1, 2).unwrap();
        let plan = plan_stream_k(grid, 5).unwrap();
        assert_eq!(plan.ranges().iter().map(|r| r.len()).sum::<usize>(), 2);
        assert!(plan.balance_metrics().imbalance <= 1);
        let idle: Vec<_> = (0..5).filter(|&w| plan.range(w).is_empty()).collect();
        assert_eq!(idle.len(), 3);
        for w in idle {
            assert!(plan.cursor(w).done());
            assert!(plan.tiles_touched(w).is_empty());
        }
    }
}
