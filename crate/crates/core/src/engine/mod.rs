//! Fused LUT-dequantization matmul executor.
//!
//! `P` workers each walk their Stream-K range. Per unit a worker stages the
//! activation tile (a ring of `stages` prefetched tiles), then for every
//! weight fragment it unpacks and recombines the bit-slices, dequantizes
//! index pairs through the vectorized table and feeds the fragment MMA with
//! a binary32 accumulator. At the end of an output tile the accumulator is
//! rounded to Half; partial tiles go through [`Scratch`] and the finisher
//! reduces them in ascending k order, in Half.

mod scratch;
mod traffic;

use std::collections::VecDeque;

pub use scratch::Scratch;
pub use traffic::{bits_per_param, round_2dp, traffic_model, weight_traffic_ratio, TrafficStats};

use crate::error::{FluteError, Result};
use crate::lut_dequant::{vec_dequantize_lane, VectorizedTable, WARP_SIZE};
use crate::matrix::Matrix;
use crate::nfquant::{group_of, QuantConfig, QuantizedMatrix};
use crate::numerics::{f16_to_f32, f32_to_f16, mma_fragment, FragmentShape, Half};
use crate::restructure::{reorder_and_split, LayoutDescriptor, PackedWeights};
use crate::scalar::Real;
use crate::streamk::{plan_stream_k, StreamKPlan, TileGrid};

/// Everything the kernel reads for the weight operand.
#[derive(Debug, Clone, PartialEq)]
pub struct FluteWeights {
    cfg: QuantConfig,
    packed: PackedWeights,
    scales: Vec<Half>,
    table: Vec<Half>,
    vtable: VectorizedTable,
}

impl FluteWeights {
    /// Host-side preprocessing of a quantized matrix.
    pub fn prepare<T: Real>(
        q: &QuantizedMatrix<T>,
        layout: LayoutDescriptor,
        dup: usize,
    ) -> Result<Self> {
        let packed = reorder_and_split(q, layout)?;
        Self::from_parts(
            q.config(),
            packed,
            q.scales().to_vec(),
            q.table().to_half(),
            dup,
        )
    }

    pub fn from_parts(
        cfg: QuantConfig,
        packed: PackedWeights,
        scales: Vec<Half>,
        table: Vec<Half>,
        dup: usize,
    ) -> Result<Self> {
        if packed.bits() != cfg.bits() {
            return Err(FluteError::Config(
                "packed bit width does not match config".into(),
            ));
        }
        cfg.check_k(packed.k())?;
        if table.len() != cfg.levels() {
            return Err(FluteError::Input(format!(
                "table has {} entries, expected {}",
                table.len(),
                cfg.levels()
            )));
        }
        let expected = packed.k() * packed.n() / cfg.group_size() as usize;
        if scales.len() != expected {
            return Err(FluteError::Input(format!(
                "{} scales, expected {expected}",
                scales.len()
            )));
        }
        let vtable = VectorizedTable::from_half(&table, dup)?;
        Ok(Self {
            cfg,
            packed,
            scales,
            table,
            vtable,
        })
    }

    /// Same weights packed for a different tiling.
    pub fn relayout(&self, layout: LayoutDescriptor) -> Result<Self> {
        if layout == *self.packed.layout() {
            return Ok(self.clone());
        }
        let indices = self.packed.unpack_all();
        let packed = crate::restructure::pack_indices(
            &indices,
            self.k(),
            self.n(),
            self.cfg.bits(),
            layout,
        )?;
        Self::from_parts(
            self.cfg,
            packed,
            self.scales.clone(),
            self.table.clone(),
            self.vtable.dup(),
        )
    }

    pub fn with_dup(&self, dup: usize) -> Result<Self> {
        Self::from_parts(
            self.cfg,
            self.packed.clone(),
            self.scales.clone(),
            self.table.clone(),
            dup,
        )
    }

    pub fn config(&self) -> QuantConfig {
        self.cfg
    }

    pub fn packed(&self) -> &PackedWeights {
        &self.packed
    }

    pub fn scales(&self) -> &[Half] {
        &self.scales
    }

    pub fn table(&self) -> &[Half] {
        &self.table
    }

    pub fn vtable(&self) -> &VectorizedTable {
        &self.vtable
    }

    pub fn layout(&self) -> &LayoutDescriptor {
        self.packed.layout()
    }

    pub fn k(&self) -> usize {
        self.packed.k()
    }

    pub fn n(&self) -> usize {
        self.packed.n()
    }

    fn scale(&self, i: usize, j: usize) -> Half {
        self.scales[group_of(self.k(), self.cfg.group_size() as usize, i, j)]
    }

    /// Dequantize the whole matrix through the packed slices and the
    /// vectorized table, pairing rows `2r` and `2r + 1` of each column.
    pub fn dequantize_vectorized(&self) -> Result<Matrix<Half>> {
        let (k, n) = (self.k(), self.n());
        let mut out = Matrix::filled(k, n, Half::ZERO);
        let pos = |i: usize, j: usize| self.packed.layout().packed_position(k, i, j);
        for i in (0..k).step_by(2) {
            for j in 0..n {
                let pair = self.vtable.pack_pair(
                    self.packed.element(pos(i, j)),
                    self.packed.element(pos(i + 1, j)),
                );
                let (a, b) = vec_dequantize_lane(pair, self.scale(i, j), &self.vtable, j);
                out[(i, j)] = a;
                out[(i + 1, j)] = b;
            }
        }
        Ok(out)
    }
}

/// One fused matmul `Y = X * dequant(W)`.
#[derive(Debug, Clone, Copy)]
pub struct MatmulProblem<'a> {
    /// `m x k` activations.
    pub x: &'a Matrix<Half>,
    pub weights: &'a FluteWeights,
    pub workers: usize,
    /// Depth of the global-to-shared prefetch ring.
    pub stages: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    /// One OS thread per worker.
    #[default]
    Threaded,
    /// All workers multiplexed on the calling thread in worker order.
    Sequential,
}

/// Prefetch bookkeeping of one worker.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PipelineTrace {
    /// Units in the order their tiles were fetched.
    pub fetch_order: Vec<usize>,
    pub max_in_flight: usize,
}

#[derive(Debug, Clone)]
pub struct MatmulOutput {
    /// `m x n` result.
    pub y: Matrix<Half>,
    pub traffic: TrafficStats,
    pub per_worker: Vec<TrafficStats>,
    pub pipelines: Vec<PipelineTrace>,
}

pub fn execute(problem: &MatmulProblem<'_>) -> Result<MatmulOutput> {
    execute_with(problem, ExecMode::Threaded)
}

pub fn execute_with(problem: &MatmulProblem<'_>, mode: ExecMode) -> Result<MatmulOutput> {
    let ctx = Context::new(problem)?;
    let plan = &ctx.plan;
    let scratch = Scratch::new(
        plan.num_slots(),
        plan.fixups().len(),
        mode == ExecMode::Threaded,
    );

    let results: Vec<Result<WorkerResult>> = match mode {
        ExecMode::Sequential => (0..plan.workers())
            .map(|w| {
                let r = run_worker(&ctx, w, &scratch);
                if r.is_err() {
                    scratch.abort();
                }
                r
            })
            .collect(),
        ExecMode::Threaded => std::thread::scope(|s| {
            let handles: Vec<_> = (0..plan.workers())
                .map(|w| {
                    let (ctx, scratch) = (&ctx, &scratch);
                    s.spawn(move || {
                        let guard = AbortOnUnwind(scratch);
                        let r = run_worker(ctx, w, scratch);
                        if r.is_err() {
                            scratch.abort();
                        }
                        std::mem::forget(guard);
                        r
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(FluteError::Internal("worker panicked".into())))
                })
                .collect()
        }),
    };

    let mut first_err = None;
    let mut outs = Vec::with_capacity(results.len());
    for (w, r) in results.into_iter().enumerate() {
        match r {
            Ok(o) => outs.push(o),
            Err(e) => {
                let secondary =
                    matches!(&e, FluteError::Internal(msg) if msg == "another worker failed");
                if first_err.as_ref().is_none_or(|(_, sec)| *sec && !secondary) {
                    first_err = Some((
                        FluteError::Execution {
                            worker: w,
                            message: e.to_string(),
                        },
                        secondary,
                    ));
                }
            }
        }
    }
    if let Some((e, _)) = first_err {
        return Err(e);
    }

    let (m, n) = (ctx.m, ctx.weights.n());
    let mut y = Matrix::filled(m, n, Half::ZERO);
    let mut written = vec![false; plan.grid().output_tiles()];
    let mut traffic = TrafficStats::default();
    let mut per_worker = Vec::with_capacity(outs.len());
    let mut pipelines = Vec::with_capacity(outs.len());
    for o in outs {
        for (tile, data) in o.outputs {
            if std::mem::replace(&mut written[tile], true) {
                return Err(FluteError::Internal(format!(
                    "output tile {tile} written twice"
                )));
            }
            let (tm, tn) = (tile / ctx.grid.tiles_n, tile % ctx.grid.tiles_n);
            let l = &ctx.layout;
            let rows = ctx.rows_active(tm);
            for r in 0..rows {
                for c in 0..l.tile_n {
                    y[(tm * l.tile_m + r, tn * l.tile_n + c)] = data[r * l.tile_n + c];
                }
            }
        }
        traffic += o.stats;
        per_worker.push(o.stats);
        pipelines.push(o.trace);
    }
    if let Some(t) = written.iter().position(|w| !w) {
        return Err(FluteError::Internal(format!(
            "output tile {t} never written"
        )));
    }
    Ok(MatmulOutput {
        y,
        traffic,
        per_worker,
        pipelines,
    })
}

struct AbortOnUnwind<'a>(&'a Scratch);

impl Drop for AbortOnUnwind<'_> {
    fn drop(&mut self) {
        self.0.abort();
    }
}

struct Context<'a> {
    x: &'a Matrix<Half>,
    weights: &'a FluteWeights,
    layout: LayoutDescriptor,
    shape: FragmentShape,
    grid: TileGrid,
    plan: StreamKPlan,
    m: usize,
    stages: usize,
}

impl<'a> Context<'a> {
    fn new(p: &MatmulProblem<'a>) -> Result<Self> {
        let w = p.weights;
        let layout = *w.layout();
        let (m, k) = (p.x.rows(), p.x.cols());
        if k != w.k() {
            return Err(FluteError::Config(format!(
                "X has k = {k}, weights have k = {}",
                w.k()
            )));
        }
        if m == 0 {
            return Err(FluteError::Config("empty activation matrix".into()));
        }
        if !layout.frag_k.is_multiple_of(2) {
            return Err(FluteError::Config(
                "fragment k must be even for paired lookups".into(),
            ));
        }
        if !layout.tile_elems().is_multiple_of(32) {
            return Err(FluteError::Config(
                "weight tiles must fill whole 32-bit words".into(),
            ));
        }
        if p.stages == 0 || p.workers == 0 {
            return Err(FluteError::Config(
                "need at least one stage and one worker".into(),
            ));
        }
        let grid = TileGrid::new(
            m.div_ceil(layout.tile_m),
            w.n() / layout.tile_n,
            k / layout.tile_k,
        )?;
        let plan = plan_stream_k(grid, p.workers)?;
        Ok(Context {
            x: p.x,
            weights: w,
            layout,
            shape: FragmentShape {
                m: layout.frag_m,
                n: layout.frag_n,
                k: layout.frag_k,
            },
            grid,
            plan,
            m,
            stages: p.stages,
        })
    }

    fn rows_active(&self, tm: usize) -> usize {
        (self.m - tm * self.layout.tile_m).min(self.layout.tile_m)
    }

    /// Copy the activation tile for `unit` into a zero-padded
    /// `tile_m x tile_k` buffer and account the unit's global traffic.
    fn fetch(&self, unit: usize, stats: &mut TrafficStats) -> Staged {
        let l = &self.layout;
        let t = self.grid.unit(unit);
        let rows = self.rows_active(t.m);
        let k0 = t.k * l.tile_k;
        let mut x = vec![Half::ZERO; l.tile_m * l.tile_k];
        for r in 0..rows {
            let src = &self.x.row(t.m * l.tile_m + r)[k0..k0 + l.tile_k];
            x[r * l.tile_k..(r + 1) * l.tile_k].copy_from_slice(src);
        }
        *stats += traffic::unit_traffic(rows, k0, l, self.weights.cfg);
        Staged { unit, x }
    }
}

struct Staged {
    unit: usize,
    x: Vec<Half>,
}

struct WorkerResult {
    outputs: Vec<(usize, Vec<Half>)>,
    stats: TrafficStats,
    trace: PipelineTrace,
}

fn add_half(a: &[Half], b: &[Half]) -> Vec<Half> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f32_to_f16(f16_to_f32(x) + f16_to_f32(y)))
        .collect()
}

fn run_worker(ctx: &Context<'_>, worker: usize, scratch: &Scratch) -> Result<WorkerResult> {
    let l = &ctx.layout;
    let wts = ctx.weights;
    let (k, group) = (wts.k(), wts.cfg.group_size() as usize);
    let frags_m = l.tile_m / l.frag_m;
    let frags_n = l.tile_n / l.frag_n;
    let frags_k = l.tile_k / l.frag_k;
    let acc_frag = l.frag_m * l.frag_n;

    let mut result = WorkerResult {
        outputs: Vec::new(),
        stats: TrafficStats::default(),
        trace: PipelineTrace::default(),
    };
    let mut cursor = ctx.plan.cursor(worker);
    if cursor.done() {
        return Ok(result);
    }
    result.stats.bytes_table += traffic::table_bytes(&wts.vtable);

    let mut fetcher = ctx.plan.cursor(worker);
    let mut ring: VecDeque<Staged> = VecDeque::with_capacity(ctx.stages);
    let mut acc = vec![0.0f32; frags_m * frags_n * acc_frag];
    let mut idx = vec![0u8; l.frag_elems()];
    let mut bfrag = vec![Half::ZERO; l.frag_elems()];
    let mut afrag = vec![Half::ZERO; l.frag_m * l.frag_k];

    while !cursor.done() {
        while ring.len() < ctx.stages && !fetcher.done() {
            ring.push_back(ctx.fetch(fetcher.unit(), &mut result.stats));
            result.trace.fetch_order.push(fetcher.unit());
            fetcher.step()?;
        }
        result.trace.max_in_flight = result.trace.max_in_flight.max(ring.len());
        let staged = ring
            .pop_front()
            .ok_or_else(|| FluteError::Internal("prefetch ring empty".into()))?;
        if staged.unit != cursor.unit() {
            return Err(FluteError::Internal("prefetch ring out of order".into()));
        }

        let t = cursor.get_tile_index();
        let rows = ctx.rows_active(t.m);
        let active_frags_m = rows.div_ceil(l.frag_m);
        let wtile = wts.packed.tile_index(t.n, t.k);
        for fk in 0..frags_k {
            let i0 = t.k * l.tile_k + fk * l.frag_k;
            for fnn in 0..frags_n {
                let j0 = t.n * l.tile_n + fnn * l.frag_n;
                wts.packed
                    .unpack_fragment_into(wtile, fk * frags_n + fnn, &mut idx)?;
                for r in (0..l.frag_k).step_by(2) {
                    for c in 0..l.frag_n {
                        let scale = wts.scales[group_of(k, group, i0 + r, j0 + c)];
                        let (e0, e1) = (r * l.frag_n + c, (r + 1) * l.frag_n + c);
                        let pair = wts.vtable.pack_pair(idx[e0], idx[e1]);
                        let lane = ((r / 2) * l.frag_n + c) % WARP_SIZE;
                        let (h0, h1) = vec_dequantize_lane(pair, scale, &wts.vtable, lane);
                        bfrag[e0] = h0;
                        bfrag[e1] = h1;
                    }
                }
                for fm in 0..active_frags_m {
                    for rr in 0..l.frag_m {
                        let src = (fm * l.frag_m + rr) * l.tile_k + fk * l.frag_k;
                        afrag[rr * l.frag_k..(rr + 1) * l.frag_k]
                            .copy_from_slice(&staged.x[src..src + l.frag_k]);
                    }
                    let base = (fm * frags_n + fnn) * acc_frag;
                    mma_fragment(ctx.shape, &afrag, &bfrag, &mut acc[base..base + acc_frag])?;
                }
            }
        }

        if cursor.end_of_output_tile() {
            let tile = cursor.get_output_tile_index();
            let mut y = vec![Half::ZERO; rows * l.tile_n];
            for r in 0..rows {
                for c in 0..l.tile_n {
                    let (fm, rr, fnn, cc) =
                        (r / l.frag_m, r % l.frag_m, c / l.frag_n, c % l.frag_n);
                    y[r * l.tile_n + c] =
                        f32_to_f16(acc[(fm * frags_n + fnn) * acc_frag + rr * l.frag_n + cc]);
                }
            }
            acc.fill(0.0);
            let bytes = (y.len() * 2) as u64;

            if !cursor.finished_output_tile() {
                let fix = cursor.get_fixup_index().ok_or_else(|| {
                    FluteError::Internal(format!("split tile {tile} has no fixup entry"))
                })?;
                let slot = ctx.plan.fixups()[fix].slot_of(worker).ok_or_else(|| {
                    FluteError::Internal(format!("worker {worker} has no slot for tile {tile}"))
                })?;
                scratch.store(slot, y)?;
                scratch.signal(fix)?;
                result.stats.bytes_partials_rw += bytes;
            } else {
                if !cursor.started_output_tile() {
                    let fix = cursor.get_fixup_index().ok_or_else(|| {
                        FluteError::Internal(format!("split tile {tile} has no fixup entry"))
                    })?;
                    let fixup = &ctx.plan.fixups()[fix];
                    scratch.wait(fix, fixup.contributors.len())?;
                    let mut sum: Option<Vec<Half>> = None;
                    for c in &fixup.contributors {
                        let p = scratch.load(c.slot)?;
                        result.stats.bytes_partials_rw += bytes;
                        sum = Some(match sum {
                            None => p,
                            Some(s) => add_half(&s, &p),
                        });
                    }
                    if let Some(s) = sum {
                        y = add_half(&s, &y);
                    }
                }
                result.stats.bytes_output += bytes;
                result.outputs.push((tile, y));
            }
        }
        cursor.step()?;
    }
    Ok(result)
}
