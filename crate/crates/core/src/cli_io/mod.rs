//! `flute-sim` command-line surface.
//!
//! Exit codes: 0 ok, 1 usage, 2 input error, 3 numerical / optimization error.
//! `FLUTE_SIM_SEED` seeds every randomized path.

pub mod flte;
pub mod presets;
pub mod raw;

use std::collections::HashMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{
    bits_per_param, execute_with, round_2dp, traffic_model, weight_traffic_ratio, ExecMode,
    FluteWeights, MatmulProblem, TrafficStats,
};
use crate::error::{FluteError, Result};
use crate::lut_dequant::{monte_carlo_degrees, VectorizedTable};
use crate::matrix::Matrix;
use crate::nfquant::{build_nf_table, group_of, quantize_matrix, refine_scales, QuantConfig};
use crate::numerics::f16_to_f32;
use crate::restructure::LayoutDescriptor;
use crate::streamk::{plan_slice_k, plan_stream_k, Balance, TileGrid};

pub use flte::FlteFile;

pub const SEED_ENV: &str = "FLUTE_SIM_SEED";
const DEFAULT_SEED: u64 = 0x5EED;

pub const BANKS_HEADER: &str = "bits,dup,mean_degree,p99_degree,max_degree";
pub const SCHEDULE_HEADER: &str = "worker,start_unit,end_unit,output_tiles_touched,role_per_tile";
pub const BENCH_HEADER: &str = "preset,m,n,k,bits,group,bits_per_param,weight_traffic_ratio,arithmetic_intensity,streamk_imbalance,slicek_imbalance,slicek_waves";
pub const SWEEP_HEADER: &str = "tile_m,tile_n,tile_k,stages,dup,total_bytes,arithmetic_intensity,streamk_imbalance,mean_bank_degree,best";

#[derive(Debug, Parser)]
#[command(
    name = "flute-sim",
    version,
    about = "Fused LUT-dequantization matmul simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Quantize a raw f32 k x n matrix into an .flte file.
    Quantize(QuantizeArgs),
    /// Expand an .flte file back to a raw f32 matrix.
    Dequantize(DequantizeArgs),
    /// Run the fused engine on raw f16 activations.
    Matmul(MatmulArgs),
    /// Compression and balance figures for a shape preset.
    Bench(BenchArgs),
    /// Stream-K assignment as CSV.
    Schedule(ScheduleArgs),
    /// Bank-conflict Monte-Carlo for vectorized tables.
    Banks(BanksArgs),
    /// Modeled global-memory traffic for one problem.
    Traffic(TrafficArgs),
    /// Enumerate tile/stage/duplication configurations and pick the least traffic.
    Sweep(SweepArgs),
}

#[derive(Debug, Args, Clone)]
struct TileArgs {
    #[arg(long)]
    tile_m: Option<usize>,
    #[arg(long)]
    tile_n: Option<usize>,
    #[arg(long)]
    tile_k: Option<usize>,
    #[arg(long, default_value_t = 16)]
    frag_m: usize,
    #[arg(long, default_value_t = 8)]
    frag_n: usize,
    #[arg(long, default_value_t = 16)]
    frag_k: usize,
}

impl TileArgs {
    fn layout(&self, base: LayoutDescriptor) -> Result<LayoutDescriptor> {
        LayoutDescriptor::new(
            self.tile_m.unwrap_or(base.tile_m),
            self.tile_n.unwrap_or(base.tile_n),
            self.tile_k.unwrap_or(base.tile_k),
            self.frag_m,
            self.frag_n,
            self.frag_k,
        )
    }
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    bits: u8,
    #[arg(long, default_value_t = 128)]
    group: u32,
    #[arg(long)]
    output: PathBuf,
    /// Raw f32 m x k calibration activations.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Rows of the calibration matrix.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    learn_scales: bool,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[command(flatten)]
    tiles: TileArgs,
}

#[derive(Debug, Args)]
struct DequantizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct MatmulArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Raw f16 m x k activations.
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    m: usize,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value_t = 2)]
    stages: usize,
    #[arg(long, default_value_t = 1)]
    dup: usize,
    /// Multiplex all workers on one thread.
    #[arg(long)]
    sequential: bool,
    /// Write the traffic CSV here instead of stdout.
    #[arg(long)]
    traffic: Option<PathBuf>,
    #[command(flatten)]
    tiles: TileArgs,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value = "llama3-8b")]
    preset: String,
    /// TOML preset file replacing the built-in presets.
    #[arg(long)]
    presets: Option<PathBuf>,
    /// Comma-separated batch sizes; defaults to powers of two in the preset's m range.
    #[arg(long, value_delimiter = ',')]
    batches: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "4")]
    bits: Vec<u8>,
    #[arg(long, value_delimiter = ',', default_value = "128")]
    group: Vec<u32>,
    #[arg(long, default_value_t = 108)]
    workers: usize,
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    #[arg(long)]
    tiles_m: usize,
    #[arg(long)]
    tiles_n: usize,
    #[arg(long)]
    tiles_k: usize,
    #[arg(long)]
    workers: usize,
}

#[derive(Debug, Args)]
struct BanksArgs {
    #[arg(long, value_delimiter = ',', default_value = "3,4")]
    bits: Vec<u8>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    dups: Vec<usize>,
    #[arg(long, default_value_t = 100_000)]
    warps: usize,
}

#[derive(Debug, Args)]
struct TrafficArgs {
    #[arg(long)]
    m: usize,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    k: usize,
    /// 16 prices the dense baseline.
    #[arg(long, default_value_t = 4)]
    bits: u8,
    #[arg(long, default_value_t = 128)]
    group: u32,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value_t = 1)]
    dup: usize,
    #[command(flatten)]
    tiles: TileArgs,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    m: usize,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 4)]
    bits: u8,
    #[arg(long, default_value_t = 128)]
    group: u32,
    #[arg(long, default_value_t = 108)]
    workers: usize,
    /// Monte-Carlo warps per duplication factor.
    #[arg(long, default_value_t = 2000)]
    warps: usize,
}

/// Map an error to the process exit code.
pub fn exit_code(e: &FluteError) -> i32 {
    match e {
        FluteError::Config(_) => 1,
        FluteError::Input(_) | FluteError::Parse { .. } | FluteError::Io(_) => 2,
        FluteError::Domain(_)
        | FluteError::Optimization { .. }
        | FluteError::Execution { .. }
        | FluteError::Internal(_) => 3,
    }
}

/// Seed from `FLUTE_SIM_SEED`, or a fixed default.
pub fn seed_from_env() -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| {
            FluteError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
        }),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let shown = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let rendered = e.render().to_string();
            if shown {
                let _ = write!(out, "{rendered}");
                return 0;
            }
            let _ = write!(err, "{rendered}");
            return 1;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Quantize(a) => quantize(a, out),
        Command::Dequantize(a) => dequantize(a, out),
        Command::Matmul(a) => matmul(a, out),
        Command::Bench(a) => bench(a, out),
        Command::Schedule(a) => schedule(a, out),
        Command::Banks(a) => banks(a, out),
        Command::Traffic(a) => traffic(a, out),
        Command::Sweep(a) => sweep(a, out),
    }
}

fn io(e: std::io::Error) -> FluteError {
    FluteError::Io(e.to_string())
}

fn quantize(a: QuantizeArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = QuantConfig::new(a.bits, a.group)?;
    cfg.check_k(a.k)?;
    let layout = a.tiles.layout(LayoutDescriptor::default())?;
    layout.check_weights(a.k, a.n)?;
    let w = raw::read_f32(&a.input, a.k, a.n)?;

    let weights = if a.learn_scales {
        let (calib, m) = match (&a.calib, a.m) {
            (Some(p), Some(m)) => (p, m),
            _ => {
                return Err(FluteError::Config(
                    "--learn-scales needs --calib and --m".into(),
                ))
            }
        };
        let x = raw::read_f32(calib, m, a.k)?;
        let r = refine_scales(&w.cast::<f64>(), &x.cast::<f64>(), cfg, a.steps, a.lr)?;
        writeln!(
            out,
            "learned scales: loss {:.6e} -> {:.6e}",
            r.initial_loss, r.final_loss
        )
        .map_err(io)?;
        FluteWeights::prepare(&r.quantized, layout, 1)?
    } else {
        if a.calib.is_some() {
            return Err(FluteError::Config(
                "--calib is only used with --learn-scales".into(),
            ));
        }
        FluteWeights::prepare(&quantize_matrix(&w, cfg)?, layout, 1)?
    };

    let bytes = FlteFile::from_weights(&weights).to_bytes();
    std::fs::write(&a.output, &bytes)
        .map_err(|e| FluteError::Io(format!("{}: {e}", a.output.display())))?;
    writeln!(
        out,
        "wrote {}: {}x{} W{}G{}, {} bytes, {:.2} bits/param",
        a.output.display(),
        a.k,
        a.n,
        a.bits,
        a.group,
        bytes.len(),
        round_2dp(bits_per_param(cfg))
    )
    .map_err(io)
}

fn read_flte(path: &PathBuf) -> Result<FlteFile> {
    let bytes =
        std::fs::read(path).map_err(|e| FluteError::Io(format!("{}: {e}", path.display())))?;
    FlteFile::parse(&bytes)
}

/// Dequantize an FLTE file to binary32.
///
/// A table equal to the Half-rounded NormalFloat table is expanded with the
/// binary32 NormalFloat values, any other table with its widened halves.
pub fn dequantize_flte(file: &FlteFile) -> Result<Matrix<f32>> {
    let w = file.to_weights(1)?;
    let (k, n) = (w.k(), w.n());
    let nf = build_nf_table::<f32>(file.bits).ok();
    let table: Vec<f32> = match nf {
        Some(t) if t.to_half() == file.table => t.values().to_vec(),
        _ => file.table.iter().map(|&h| f16_to_f32(h)).collect(),
    };
    let indices = w.packed().unpack_all();
    let group = file.group as usize;
    Ok(Matrix::from_fn(k, n, |i, j| {
        f16_to_f32(file.scales[group_of(k, group, i, j)]) * table[indices[i * n + j] as usize]
    }))
}

fn dequantize(a: DequantizeArgs, out: &mut dyn Write) -> Result<()> {
    let file = read_flte(&a.input)?;
    let w = dequantize_flte(&file)?;
    raw::write_f32(&a.output, &w)?;
    writeln!(
        out,
        "wrote {}: {}x{} f32",
        a.output.display(),
        w.rows(),
        w.cols()
    )
    .map_err(io)
}

fn matmul(a: MatmulArgs, out: &mut dyn Write) -> Result<()> {
    let file = read_flte(&a.weights)?;
    let weights = file.to_weights(a.dup)?;
    let layout = a.tiles.layout(*weights.layout())?;
    let weights = weights.relayout(layout)?;
    let x = raw::read_f16(&a.x, a.m, weights.k())?;
    let mode = if a.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Threaded
    };
    let problem = MatmulProblem {
        x: &x,
        weights: &weights,
        workers: a.workers,
        stages: a.stages,
    };
    let result = execute_with(&problem, mode)?;
    raw::write_f16(&a.output, &result.y)?;

    let csv = format!(
        "{}\n{}\n",
        TrafficStats::CSV_HEADER,
        result.traffic.csv_row()
    );
    match &a.traffic {
        Some(p) => {
            std::fs::write(p, csv).map_err(|e| FluteError::Io(format!("{}: {e}", p.display())))
        }
        None => out.write_all(csv.as_bytes()).map_err(io),
    }
}

fn bench(a: BenchArgs, out: &mut dyn Write) -> Result<()> {
    let presets = match &a.presets {
        Some(p) => presets::parse_presets(
            &std::fs::read_to_string(p)
                .map_err(|e| FluteError::Io(format!("{}: {e}", p.display())))?,
        )?,
        None => presets::builtin_presets(),
    };
    let preset = presets::find(&presets, &a.preset)?;
    let batches: Vec<usize> = if a.batches.is_empty() {
        (0..usize::BITS)
            .map(|s| 1usize << s)
            .skip_while(|&m| m < preset.m_min)
            .take_while(|&m| m <= preset.m_max)
            .collect()
    } else {
        a.batches.clone()
    };
    if batches.contains(&0) {
        return Err(FluteError::Config("batch sizes must be positive".into()));
    }

    writeln!(out, "{BENCH_HEADER}").map_err(io)?;
    for &bits in &a.bits {
        for &group in &a.group {
            let cfg = QuantConfig::new(bits, group)?;
            let bpp = bits_per_param(cfg);
            for shape in &preset.shapes {
                let layout = LayoutDescriptor::new(16, 64, (group as usize).max(128), 16, 8, 16)?;
                for &m in &batches {
                    let stats = traffic_model(m, shape.n, shape.k, cfg, &layout, 1, a.workers)?;
                    let grid = TileGrid::new(
                        m.div_ceil(layout.tile_m),
                        shape.n / layout.tile_n,
                        shape.k / layout.tile_k,
                    )?;
                    let sk = plan_stream_k(grid, a.workers)?.balance_metrics();
                    let sl = plan_slice_k(grid, a.workers)?.balance_metrics();
                    writeln!(
                        out,
                        "{},{m},{},{},{bits},{group},{:.2},{:.6},{:.6},{},{},{}",
                        preset.name,
                        shape.n,
                        shape.k,
                        round_2dp(bpp),
                        weight_traffic_ratio(&stats, stats.dense_weight_bytes()),
                        stats.arithmetic_intensity(),
                        sk.imbalance,
                        sl.imbalance,
                        sl.waves
                    )
                    .map_err(io)?;
                }
            }
        }
    }
    Ok(())
}

/// Stream-K assignment rows, one per worker.
pub fn schedule_csv(grid: TileGrid, workers: usize) -> Result<String> {
    let plan = plan_stream_k(grid, workers)?;
    let mut s = String::from(SCHEDULE_HEADER);
    s.push('\n');
    for w in 0..plan.workers() {
        let r = plan.range(w);
        let touched = plan.tiles_touched(w);
        let roles: Vec<String> = touched
            .iter()
            .map(|(t, role)| format!("t{t}:{}", role.as_str()))
            .collect();
        s.push_str(&format!(
            "{w},{},{},{},{}\n",
            r.start,
            r.end,
            touched.len(),
            roles.join(";")
        ));
    }
    Ok(s)
}

fn schedule(a: ScheduleArgs, out: &mut dyn Write) -> Result<()> {
    let grid = TileGrid::new(a.tiles_m, a.tiles_n, a.tiles_k)?;
    out.write_all(schedule_csv(grid, a.workers)?.as_bytes())
        .map_err(io)
}

fn banks(a: BanksArgs, out: &mut dyn Write) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_from_env()?);
    writeln!(out, "{BANKS_HEADER}").map_err(io)?;
    for &bits in &a.bits {
        let table = build_nf_table::<f32>(bits)?;
        for &dup in &a.dups {
            let vt = VectorizedTable::from_half(&table.to_half(), dup)?;
            let s = monte_carlo_degrees(&mut rng, &vt, a.warps);
            writeln!(out, "{bits},{dup},{:.6},{},{}", s.mean, s.p99, s.max).map_err(io)?;
        }
    }
    Ok(())
}

fn traffic(a: TrafficArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = if a.bits == 16 {
        QuantConfig::unquantized()
    } else {
        QuantConfig::new(a.bits, a.group)?
    };
    let layout = a.tiles.layout(LayoutDescriptor::default())?;
    let stats = traffic_model(a.m, a.n, a.k, cfg, &layout, a.dup, a.workers)?;
    writeln!(out, "{}\n{}", TrafficStats::CSV_HEADER, stats.csv_row()).map_err(io)
}

/// One candidate of [`sweep_configs`].
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub layout: LayoutDescriptor,
    pub stages: usize,
    pub dup: usize,
    pub stats: TrafficStats,
    pub streamk_imbalance: usize,
    pub mean_bank_degree: f64,
}

/// Every valid (tile, stages, dup) instantiation for one problem, plus the
/// index of the least-traffic row (ties: lower mean bank degree, then first).
pub fn sweep_configs(
    m: usize,
    n: usize,
    k: usize,
    cfg: QuantConfig,
    workers: usize,
    warps: usize,
    seed: u64,
) -> Result<(Vec<SweepRow>, usize)> {
    let table = build_nf_table::<f32>(cfg.bits())?.to_half();
    let dups = [1usize, 2, 4, 8];
    let mut degree = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &d in &dups {
        let vt = VectorizedTable::from_half(&table, d)?;
        degree.insert(d, monte_carlo_degrees(&mut rng, &vt, warps).mean);
    }

    let mut rows = Vec::new();
    for tile_m in [16usize, 32, 64] {
        for tile_n in [16usize, 32, 64, 128] {
            for tile_k in [32usize, 64, 128, 256] {
                let layout = LayoutDescriptor::new(tile_m, tile_n, tile_k, 16, 8, 16)?;
                if layout.check_weights(k, n).is_err() {
                    continue;
                }
                let grid = TileGrid::new(m.div_ceil(tile_m), n / tile_n, k / tile_k)?;
                let imbalance = plan_stream_k(grid, workers)?.balance_metrics().imbalance;
                for stages in [2usize, 3, 4] {
                    for &dup in &dups {
                        let stats = traffic_model(m, n, k, cfg, &layout, dup, workers)?;
                        rows.push(SweepRow {
                            layout,
                            stages,
                            dup,
                            stats,
                            streamk_imbalance: imbalance,
                            mean_bank_degree: degree[&dup],
                        });
                    }
                }
            }
        }
    }
    if rows.is_empty() {
        return Err(FluteError::Config(format!(
            "no tiling in the sweep divides {k}x{n}"
        )));
    }
    let best = (0..rows.len())
        .min_by(|&a, &b| {
            let (ra, rb) = (&rows[a], &rows[b]);
            ra.stats
                .total_bytes()
                .cmp(&rb.stats.total_bytes())
                .then(ra.mean_bank_degree.total_cmp(&rb.mean_bank_degree))
                .then(a.cmp(&b))
        })
        .expect("non-empty");
    Ok((rows, best))
}

fn sweep(a: SweepArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = QuantConfig::new(a.bits, a.group)?;
    cfg.check_k(a.k)?;
    let (rows, best) = sweep_configs(a.m, a.n, a.k, cfg, a.workers, a.warps, seed_from_env()?)?;
    writeln!(out, "{SWEEP_HEADER}").map_err(io)?;
    for (i, r) in rows.iter().enumerate() {
        let l = &r.layout;
        writeln!(
            out,
            "{},{},{},{},{},{},{:.6},{},{:.6},{}",
            l.tile_m,
            l.tile_n,
            l.tile_k,
            r.stages,
            r.dup,
            r.stats.total_bytes(),
            r.stats.arithmetic_intensity(),
            r.streamk_imbalance,
            r.mean_bank_degree,
            u8::from(i == best)
        )
        .map_err(io)?;
    }
    Ok(())
}
