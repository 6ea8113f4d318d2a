//! The `trim` command line: `reduce`, `heatmap`, `cost` and `compare`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::clip_metric::{grid_side, score_tokens, similarity_grid, PooledTextEmbedding, SignificanceScores};
use crate::cost::{compare_costs, HardwareSpec, ModelSpec, Precision};
use crate::reduce::{reduce, run_pipeline, ReducedSidecar};
use crate::report::{encode_pgm, grid_to_gray, grid_to_text, CompareTable, CostSummary, ReduceSummary, StrategyRow};
use crate::select::{SelectionResult, SelectionStrategy};
use crate::tensor_io::{read_tensor, write_tensor, Matrix};

pub const REDUCED_TENSOR: &str = "reduced.trimt";
pub const REDUCED_SIDECAR: &str = "reduced.json";
pub const HEATMAP_TEXT: &str = "heatmap.txt";
pub const HEATMAP_PGM: &str = "heatmap.pgm";

#[derive(Debug, Parser)]
#[command(name = "trim", version, about = "CLIP-metric visual token reduction and inference cost estimates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score, select and reduce image tokens; writes the reduced tensor and a JSON sidecar.
    Reduce(ReduceArgs),
    /// Write the per-patch significance grid as text and as a PGM image.
    Heatmap(HeatmapArgs),
    /// Compare inference cost between a baseline and a reduced visual token count.
    Cost(CostArgs),
    /// Run every selection strategy on one input and tabulate them.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Image patch embeddings, N x D.
    #[arg(long, value_name = "PATH")]
    pub image_tokens: PathBuf,
    /// Pooled text embedding, 1 x D.
    #[arg(long, value_name = "PATH")]
    pub text_embedding: PathBuf,
}

#[derive(Debug, Args)]
pub struct CostModelArgs {
    /// Model spec JSON; defaults to the 7B preset.
    #[arg(long, value_name = "PATH")]
    pub model_spec: Option<PathBuf>,
    /// Built-in model preset when no spec file is given: 7b or 13b.
    #[arg(long, default_value = "7b")]
    pub model_preset: String,
    /// Hardware spec JSON; defaults to the V100-class preset.
    #[arg(long, value_name = "PATH")]
    pub hw_spec: Option<PathBuf>,
    #[arg(long, default_value = "fp16")]
    pub precision: Precision,
    /// Overrides the model's fixed vision/runtime prefill FLOPs.
    #[arg(long)]
    pub vision_overhead_flops: Option<f64>,
    /// Text prompt tokens added to every visual token count.
    #[arg(long, default_value_t = 40)]
    pub text_len: u64,
}

impl CostModelArgs {
    fn load(&self) -> Result<(ModelSpec, HardwareSpec)> {
        let mut model = match &self.model_spec {
            Some(p) => ModelSpec::from_json_file(p)?.with_precision(self.precision),
            None => ModelSpec::preset(&self.model_preset, self.precision)
                .with_context(|| format!("unknown model preset {:?}", self.model_preset))?,
        };
        if let Some(f) = self.vision_overhead_flops {
            model.vision_overhead_flops = f;
        }
        model.validate()?;
        let hw = match &self.hw_spec {
            Some(p) => HardwareSpec::from_json_file(p)?,
            None => HardwareSpec::v100(self.precision),
        };
        Ok((model, hw))
    }
}

#[derive(Debug, Args)]
pub struct ReduceArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// iqr | topk:R | random:R:SEED | pool:R
    #[arg(long, default_value = "iqr")]
    pub strategy: SelectionStrategy,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[command(flatten)]
    pub model: CostModelArgs,
    /// Visual tokens before reduction.
    #[arg(long, default_value_t = 576)]
    pub baseline_tokens: u64,
    /// Visual tokens after reduction.
    #[arg(long, conflicts_with = "sidecar")]
    pub reduced_tokens: Option<u64>,
    /// Take both counts from a `reduce` sidecar (source_n and output_rows).
    #[arg(long, value_name = "PATH")]
    pub sidecar: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub model: CostModelArgs,
    /// Token budget for the fixed-ratio strategies.
    #[arg(long, default_value_t = 0.21)]
    pub ratio: f64,
    /// Seed for the random strategy.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
}

fn load_inputs(input: &InputArgs) -> Result<(Matrix, PooledTextEmbedding)> {
    let image = read_tensor(&input.image_tokens)
        .with_context(|| format!("reading image tokens {}", input.image_tokens.display()))?;
    let text_m = read_tensor(&input.text_embedding)
        .with_context(|| format!("reading text embedding {}", input.text_embedding.display()))?;
    let text = PooledTextEmbedding::from_matrix(&text_m)
        .with_context(|| format!("text embedding {}", input.text_embedding.display()))?;
    Ok((image, text))
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn emit<T: serde::Serialize>(out: &mut dyn Write, format: Format, value: &T, text: String) -> Result<()> {
    match format {
        Format::Text => out.write_all(text.as_bytes())?,
        Format::Json => {
            serde_json::to_writer_pretty(&mut *out, value)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

pub fn cmd_reduce(args: &ReduceArgs, out: &mut dyn Write) -> Result<()> {
    let (image, text) = load_inputs(&args.input)?;
    let result = run_pipeline(&image, &text, &args.strategy)?;
    prepare_out_dir(&args.out)?;

    let tensor_path = args.out.join(REDUCED_TENSOR);
    write_tensor(&tensor_path, &result.reduced.tokens)?;
    let sidecar_path = args.out.join(REDUCED_SIDECAR);
    let sidecar = ReducedSidecar::new(&result.reduced, &result.selection, &args.strategy);
    fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar)? + "\n")
        .with_context(|| format!("writing {}", sidecar_path.display()))?;

    let summary = ReduceSummary {
        strategy: args.strategy.to_string(),
        n_total: result.selection.n_total,
        kept: result.selection.k(),
        output_rows: result.reduced.output_rows(),
        has_aggregate: result.reduced.has_aggregate,
        ratio: crate::report::round_to(result.selection.ratio(), 4),
        threshold: result.selection.threshold,
        retained_mass: crate::report::round_to(result.scores.mass(&result.selection.indices), 4),
        tensor_path: tensor_path.display().to_string(),
        sidecar_path: sidecar_path.display().to_string(),
    };
    emit(out, args.format, &summary, summary.to_text())
}

#[derive(Debug, serde::Serialize)]
struct HeatmapSummary {
    side: usize,
    min: f64,
    max: f64,
    argmax_row: usize,
    argmax_col: usize,
    text_path: String,
    pgm_path: String,
}

pub fn cmd_heatmap(args: &HeatmapArgs, out: &mut dyn Write) -> Result<()> {
    let (image, text) = load_inputs(&args.input)?;
    let scores = score_tokens(&image, &text)?;
    let n = scores.n_tokens();
    let Some(side) = grid_side(n) else {
        bail!("{n} image tokens do not form a square patch grid");
    };
    let grid = similarity_grid(&scores, side)?;
    prepare_out_dir(&args.out)?;

    let text_path = args.out.join(HEATMAP_TEXT);
    fs::write(&text_path, grid_to_text(&grid)).with_context(|| format!("writing {}", text_path.display()))?;
    let pgm_path = args.out.join(HEATMAP_PGM);
    fs::write(&pgm_path, encode_pgm(side, side, &grid_to_gray(&grid)))
        .with_context(|| format!("writing {}", pgm_path.display()))?;

    let p = scores.softmax();
    let argmax = (1..n).fold(0, |b, i| if p[i] > p[b] { i } else { b });
    let summary = HeatmapSummary {
        side,
        min: p.iter().copied().fold(f64::INFINITY, f64::min),
        max: p[argmax],
        argmax_row: argmax / side,
        argmax_col: argmax % side,
        text_path: text_path.display().to_string(),
        pgm_path: pgm_path.display().to_string(),
    };
    let text = format!(
        "grid      {side}x{side}\nmin       {}\nmax       {}\nargmax    row {} col {}\ntext      {}\ngraymap   {}\n",
        summary.min, summary.max, summary.argmax_row, summary.argmax_col, summary.text_path, summary.pgm_path
    );
    emit(out, args.format, &summary, text)
}

pub fn cmd_cost(args: &CostArgs, out: &mut dyn Write) -> Result<()> {
    let (model, hw) = args.model.load()?;
    let (baseline, reduced) = match (&args.sidecar, args.reduced_tokens) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading sidecar {}", path.display()))?;
            let side: ReducedSidecar =
                serde_json::from_str(&text).with_context(|| format!("parsing sidecar {}", path.display()))?;
            (side.source_n as u64, side.output_rows as u64)
        }
        (None, Some(r)) => (args.baseline_tokens, r),
        (None, None) => bail!("either --reduced-tokens or --sidecar is required"),
    };
    if baseline == 0 || reduced == 0 {
        bail!("visual token counts must be at least 1");
    }
    let text_len = args.model.text_len;
    let report = compare_costs(&model, &hw, baseline + text_len, reduced + text_len)?;
    let summary = CostSummary::new(&report, text_len, baseline, reduced);
    emit(out, args.format, &summary, summary.to_text())
}

/// The four strategies `compare` evaluates, in table order.
pub fn comparison_strategies(ratio: f64, seed: u64) -> [SelectionStrategy; 4] {
    [
        SelectionStrategy::Iqr,
        SelectionStrategy::TopK { ratio },
        SelectionStrategy::Random { ratio, seed },
        SelectionStrategy::Pool { ratio },
    ]
}

pub fn compare_table(
    image: &Matrix,
    scores: &SignificanceScores,
    strategies: &[SelectionStrategy],
    model: &ModelSpec,
    hw: &HardwareSpec,
    budget_ratio: f64,
    text_len: u64,
) -> Result<CompareTable> {
    let n = image.rows() as u64;
    let row = |s: &SelectionStrategy| -> Result<StrategyRow> {
        let sel: SelectionResult = s.apply(scores)?;
        let reduced = reduce(image, &sel)?;
        let rows = reduced.output_rows();
        let cost = compare_costs(model, hw, n + text_len, rows as u64 + text_len)?;
        Ok(StrategyRow::new(s.to_string(), &sel, rows, scores.mass(&sel.indices), &cost))
    };
    // strategies are independent; evaluate them on scoped threads and keep table order
    let rows = std::thread::scope(|scope| {
        let handles: Vec<_> = strategies.iter().map(|s| scope.spawn(move || row(s))).collect();
        handles.into_iter().map(|h| h.join().expect("strategy worker panicked")).collect::<Result<Vec<_>>>()
    })?;
    Ok(CompareTable { n_total: image.rows(), budget_ratio, text_len, rows })
}

pub fn cmd_compare(args: &CompareArgs, out: &mut dyn Write) -> Result<()> {
    let (image, text) = load_inputs(&args.input)?;
    let (model, hw) = args.model.load()?;
    let scores = score_tokens(&image, &text)?;
    let strategies = comparison_strategies(args.ratio, args.seed);
    crate::select::budget(image.rows(), args.ratio)?;
    let table = compare_table(&image, &scores, &strategies, &model, &hw, args.ratio, args.model.text_len)?;
    emit(out, args.format, &table, table.to_text())
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Reduce(a) => cmd_reduce(a, out),
        Command::Heatmap(a) => cmd_heatmap(a, out),
        Command::Cost(a) => cmd_cost(a, out),
        Command::Compare(a) => cmd_compare(a, out),
    }
}
