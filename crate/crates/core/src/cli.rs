//! Command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use ndarray::{Array3, ArrayView3, Ix3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::analysis::{attention_flops, effective_sparsity, partition_overhead, PartitionStrategy};
use crate::attention::{carve_attention, compute_beta, masked_dense_reference, max_abs_diff, AmplifierBias, AttentionInputs};
use crate::io;
use crate::mask::{build_block_mask, BlockMask, SelectionParams};
use crate::partition::{build_layout, neighbor_counts, BlockLayout, StaticMasks};
use crate::pipeline::{DenoiserKind, PipelineFile, StagePlan};
use crate::sfc::{build_curve, GridDims};

/// Environment variable overriding the worker thread count.
pub const THREADS_ENV: &str = "TOKENCARVE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "tokencarve", version, about = "Curve-ordered block-sparse attention toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the curve order of a grid.
    Order {
        #[arg(long)]
        dims: GridDims,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = OrderFormat::Text)]
        format: OrderFormat,
    },
    /// Build static masks and, optionally, the full attention mask.
    Masks(MasksArgs),
    /// Run block-sparse attention and compare it with the dense reference.
    Attend(AttendArgs),
    /// Write a preset stage plan as JSON.
    Plan {
        #[arg(long, default_value = "turbo")]
        preset: String,
        #[arg(long)]
        dims: GridDims,
        #[arg(long, default_value_t = 23)]
        keep: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = DenoiserArg::Gaussian)]
        denoiser: DenoiserArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a stage plan file.
    Pipeline {
        #[arg(long)]
        plan: PathBuf,
        /// Overrides the seed stored in the plan.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Padding overhead of a partition, or FLOPs of a stored mask.
    Analyze {
        #[arg(long)]
        dims: GridDims,
        /// `sfc` or `tiled:t,h,w`.
        #[arg(long, default_value = "sfc")]
        strategy: String,
        #[arg(long, default_value_t = 128)]
        block: usize,
        /// Full-precision values as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Also report FLOPs and sparsity of this mask file.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        head_dim: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OrderFormat {
    Text,
    Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DenoiserArg {
    Gaussian,
    ToyTransformer,
}

/// Grid, block and condition settings shared by `masks` and `attend`.
#[derive(Debug, clap::Args)]
pub struct LayoutArgs {
    #[arg(long)]
    pub dims: GridDims,
    #[arg(long, default_value_t = 128)]
    pub block: usize,
    #[arg(long, default_value_t = 0)]
    pub cond_tokens: usize,
}

/// Q/K(/V) either from files or drawn at random.
#[derive(Debug, clap::Args)]
pub struct TensorArgs {
    #[arg(long)]
    pub q: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<PathBuf>,
    #[arg(long)]
    pub v: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 16)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, clap::Args)]
pub struct MasksArgs {
    #[command(flatten)]
    pub layout: LayoutArgs,
    #[command(flatten)]
    pub tensors: TensorArgs,
    /// Also build the full mask from Q/K (random unless given).
    #[arg(long)]
    pub dynamic: bool,
    #[arg(long = "top-k", default_value_t = 0.3)]
    pub top_k: f64,
    #[arg(long, default_value_t = 0.3)]
    pub p: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct AttendArgs {
    #[command(flatten)]
    pub layout: LayoutArgs,
    #[command(flatten)]
    pub tensors: TensorArgs,
    /// Precomputed mask file; built from Q/K when absent.
    #[arg(long, conflicts_with = "full_mask")]
    pub mask: Option<PathBuf>,
    /// Select every block.
    #[arg(long)]
    pub full_mask: bool,
    #[arg(long = "top-k", default_value_t = 0.3)]
    pub top_k: f64,
    #[arg(long, default_value_t = 0.3)]
    pub p: f64,
    /// Explicit condition-key bias; overrides `--rho`.
    #[arg(long, allow_negative_numbers = true)]
    pub beta: Option<f64>,
    /// Amplifier strength against `--target-tokens`.
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    #[arg(long)]
    pub target_tokens: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct AttendReport {
    max_abs_err_vs_dense: f32,
    effective_sparsity: f64,
    wall_time: f64,
    beta: f64,
}

#[derive(Debug, Serialize)]
struct AnalyzeReport {
    overhead: crate::analysis::OverheadReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    flops: Option<crate::analysis::FlopsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sparsity: Option<crate::analysis::SparsityReport>,
}

/// Sizes the global pool from [`THREADS_ENV`]; later calls are no-ops.
pub fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("{THREADS_ENV}='{raw}' is not a thread count"))?;
    // fails only when the pool already exists
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `argv` (including the program name), runs it and returns the exit code.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    cli_dispatch_to(argv, &mut stdout.lock())
}

/// As [`cli_dispatch`] with normal output sent to `out`.
pub fn cli_dispatch_to<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match init_threads().and_then(|_| run(cli, out)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    match cli.command {
        Command::Order { dims, out: path, format } => order(dims, path.as_deref(), format, out),
        Command::Masks(args) => masks(&args, out),
        Command::Attend(args) => attend(&args, out),
        Command::Plan {
            preset,
            dims,
            keep,
            seed,
            denoiser,
            out: path,
        } => {
            let mut file = PipelineFile::new(StagePlan::preset(&preset, dims, keep)?);
            file.seed = seed;
            file.denoiser = match denoiser {
                DenoiserArg::Gaussian => DenoiserKind::Gaussian,
                DenoiserArg::ToyTransformer => DenoiserKind::ToyTransformer,
            };
            let json = serde_json::to_string_pretty(&file)?;
            emit(path.as_deref(), &json, out)
        }
        Command::Pipeline {
            plan,
            seed,
            out: path,
            report,
        } => {
            let text = fs::read_to_string(&plan).with_context(|| format!("reading {}", plan.display()))?;
            let mut file: PipelineFile = serde_json::from_str(&text).map_err(|e| crate::error::CarveError::Parse {
                file: plan.display().to_string(),
                offset: json_offset(&text, e.line(), e.column()),
                msg: e.to_string(),
            })?;
            if let Some(s) = seed {
                file.seed = s;
            }
            let run = file.run()?;
            io::save_tensor(&path, run.latent.view().into_dyn())?;
            let json = serde_json::to_string_pretty(&run.report)?;
            emit(report.as_deref(), &json, out)
        }
        Command::Analyze {
            dims,
            strategy,
            block,
            json,
            mask,
            head_dim,
        } => {
            if block == 0 {
                bail!("block size must be positive");
            }
            let strategy: PartitionStrategy = strategy.parse()?;
            let overhead = partition_overhead(dims, strategy, block);
            writeln!(out, "{}", overhead.csv_row())?;
            let (flops, sparsity) = match mask {
                Some(p) => {
                    let m = io::load_mask(&p)?;
                    let f = attention_flops(&m, block, head_dim);
                    let s = effective_sparsity(&m);
                    writeln!(out, "n_prime,{:.2}", f.n_prime)?;
                    writeln!(out, "ratio_to_dense,{:.2}%", f.ratio_to_dense * 100.0)?;
                    writeln!(out, "effective_sparsity,{:.2}%", s.mean * 100.0)?;
                    (Some(f), Some(s))
                }
                None => (None, None),
            };
            if let Some(p) = json {
                let report = AnalyzeReport {
                    overhead,
                    flops,
                    sparsity,
                };
                fs::write(p, serde_json::to_string_pretty(&report)?)?;
            }
            Ok(())
        }
    }
}

/// Byte offset of a 1-based line/column pair.
fn json_offset(text: &str, line: usize, column: usize) -> u64 {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)) as u64
}

fn emit(path: Option<&Path>, text: &str, out: &mut dyn Write) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => writeln!(out, "{text}")?,
    }
    Ok(())
}

fn order(dims: GridDims, path: Option<&Path>, format: OrderFormat, out: &mut dyn Write) -> anyhow::Result<()> {
    let perm = build_curve(dims)?;
    match format {
        OrderFormat::Text => match path {
            Some(p) => fs::write(p, io::format_index_list(&perm))?,
            None => out.write_all(io::format_index_list(&perm).as_bytes())?,
        },
        OrderFormat::Tensor => {
            let Some(p) = path else {
                bail!("tensor output needs --out");
            };
            io::save_tensor(p, io::permutation_tensor(&perm)?.view())?;
        }
    }
    Ok(())
}

struct Prepared {
    dims: GridDims,
    layout: BlockLayout,
    statics: StaticMasks,
}

fn prepare(args: &LayoutArgs) -> anyhow::Result<Prepared> {
    if args.block == 0 {
        bail!("block size must be positive");
    }
    let perm = build_curve(args.dims)?;
    let layout = build_layout(args.dims, args.block, args.cond_tokens);
    let statics = StaticMasks::build(&layout, args.dims, &perm)?;
    Ok(Prepared {
        dims: args.dims,
        layout,
        statics,
    })
}

/// Random tensor `(heads, padded_len, dim)` with zero padding rows.
fn random_tokens(layout: &BlockLayout, heads: usize, dim: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let mut x = Array3::<f32>::zeros((heads, layout.padded_len(), dim));
    for h in 0..heads {
        for i in (0..layout.padded_len()).filter(|&i| layout.is_valid(i)) {
            for d in 0..dim {
                x[[h, i, d]] = StandardNormal.sample(rng);
            }
        }
    }
    x
}

fn load3(path: &Path) -> anyhow::Result<Array3<f32>> {
    let x = io::load_tensor(path)?;
    let shape = x.shape().to_vec();
    x.into_dimensionality::<Ix3>()
        .with_context(|| format!("{} has shape {shape:?}, expected (heads, tokens, dim)", path.display()))
}

/// Q, K, V in that order. Files take precedence; missing ones are drawn from
/// the seed in a fixed order so the output only depends on the flags.
fn tensors(args: &TensorArgs, layout: &BlockLayout) -> anyhow::Result<[Array3<f32>; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut next = |path: &Option<PathBuf>| -> anyhow::Result<Array3<f32>> {
        let drawn = random_tokens(layout, args.heads, args.head_dim, &mut rng);
        match path {
            Some(p) => load3(p),
            None => Ok(drawn),
        }
    };
    Ok([next(&args.q)?, next(&args.k)?, next(&args.v)?])
}

fn masks(args: &MasksArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let prep = prepare(&args.layout)?;
    let dir = &args.out_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("adjacency.mask"), io::encode_block_matrix(&prep.statics.adja)?)?;
    fs::write(dir.join("condition.mask"), io::encode_block_matrix(&prep.statics.cond)?)?;
    let mut csv = String::from("block,neighbors\n");
    for (b, n) in neighbor_counts(&prep.statics.adja).iter().enumerate() {
        csv.push_str(&format!("{b},{n}\n"));
    }
    fs::write(dir.join("neighbors.csv"), csv)?;

    if args.dynamic {
        let [q, k, _] = tensors(&args.tensors, &prep.layout)?;
        let params = SelectionParams::new(args.top_k, args.p)?;
        let (mask, stats) = build_block_mask(q.view(), k.view(), &prep.layout, &prep.statics, &params)?;
        io::save_mask(dir.join("block.mask"), &mask)?;
        fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&stats)?)?;
    }
    writeln!(
        out,
        "{}: {} vision blocks, {} condition blocks -> {}",
        prep.dims,
        prep.layout.vision_blocks,
        prep.layout.cond_blocks,
        dir.display()
    )?;
    Ok(())
}

fn check_layout(x: &ArrayView3<'_, f32>, layout: &BlockLayout, name: &str) -> anyhow::Result<()> {
    if x.dim().1 != layout.padded_len() {
        bail!(
            "{name} has {} tokens but the layout pads to {}",
            x.dim().1,
            layout.padded_len()
        );
    }
    Ok(())
}

fn attend(args: &AttendArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let prep = prepare(&args.layout)?;
    let layout = &prep.layout;
    let [q, k, v] = tensors(&args.tensors, layout)?;
    for (x, name) in [(&q, "q"), (&k, "k"), (&v, "v")] {
        check_layout(&x.view(), layout, name)?;
    }
    let inputs = AttentionInputs::new(q.view(), k.view(), v.view(), layout)?;
    let beta = match (args.beta, args.target_tokens) {
        (Some(b), _) => b,
        (None, Some(target)) => compute_beta(layout.n_valid, target, args.rho)?,
        (None, None) => 0.0,
    };
    let bias = AmplifierBias(beta as f32);

    let started = Instant::now();
    let mask = if args.full_mask {
        BlockMask::full(inputs.heads(), layout.vision_blocks, layout.total_blocks())
    } else if let Some(p) = &args.mask {
        io::load_mask(p)?
    } else {
        let params = SelectionParams::new(args.top_k, args.p)?;
        build_block_mask(q.view(), k.view(), layout, &prep.statics, &params)?.0
    };
    let result = carve_attention(&inputs, &mask, bias)?;
    let wall_time = started.elapsed().as_secs_f64();

    let reference = masked_dense_reference(&inputs, &mask, bias);
    let report = AttendReport {
        max_abs_err_vs_dense: max_abs_diff(&result, &reference),
        effective_sparsity: effective_sparsity(&mask).mean,
        wall_time,
        beta,
    };
    if let Some(p) = &args.out {
        io::save_tensor(p, result.view().into_dyn())?;
    }
    emit(args.report.as_deref(), &serde_json::to_string_pretty(&report)?, out)
}
