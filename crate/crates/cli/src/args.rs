use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rfx_core::importance::{CaseWeighting, LocalScale};
use rfx_core::proximity::{Backend, QuantMode};

#[derive(Debug, Parser)]
#[command(
    name = "rfx",
    version,
    about = "Random forest classification, importance, proximity and MDS"
)]
pub struct Cli {
    /// JSON file of default flag values; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Grow a forest and report OOB error.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Overall and local variable importance.
    #[command(args_override_self = true)]
    Importance(ImportanceArgs),
    /// Compute and store a proximity representation.
    #[command(args_override_self = true)]
    Proximity(ProximityArgs),
    /// Multidimensional scaling of proximities.
    #[command(args_override_self = true)]
    Mds(MdsArgs),
    /// Proximity-based outlier scores.
    #[command(args_override_self = true)]
    Outliers(OutliersArgs),
    /// Memory plan from sizes alone.
    #[command(args_override_self = true)]
    MemEstimate(MemEstimateArgs),
    /// Write the JSON bundle read by the visualization.
    #[command(args_override_self = true)]
    VizExport(VizExportArgs),
    /// Time each pipeline stage.
    #[command(args_override_self = true)]
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long, value_name = "CSV")]
    pub data: PathBuf,
    /// Column schema; without it every non-label column is numeric.
    #[arg(long, value_name = "JSON")]
    pub schema: Option<PathBuf>,
    /// Name of the class label column.
    #[arg(long, default_value = "class")]
    pub label: String,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Forest file written by `train`.
    #[arg(long, value_name = "FILE")]
    pub forest: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 500, value_parser = positive)]
    pub trees: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Features tried per split; defaults to floor(sqrt(p)).
    #[arg(long)]
    pub mtry: Option<usize>,
    #[arg(long, default_value_t = 1, value_parser = positive)]
    pub min_node_size: usize,
    #[arg(long)]
    pub max_nodes: Option<usize>,
    /// Record casewise mode in the model; importance commands pick it up.
    #[arg(long)]
    pub casewise: bool,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Also write the OOB report as JSON.
    #[arg(long, value_name = "JSON")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightingArg {
    TerminalNode,
    ForestFrequency,
}

impl From<WeightingArg> for CaseWeighting {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::TerminalNode => CaseWeighting::TerminalNode,
            WeightingArg::ForestFrequency => CaseWeighting::ForestFrequency,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LocalScaleArg {
    AllTrees,
    OobTrees,
}

impl From<LocalScaleArg> for LocalScale {
    fn from(s: LocalScaleArg) -> Self {
        match s {
            LocalScaleArg::AllTrees => LocalScale::AllTrees,
            LocalScaleArg::OobTrees => LocalScale::OobTrees,
        }
    }
}

#[derive(Debug, Args)]
pub struct ImportanceOpts {
    /// Weight OOB terms by bootstrap frequency; defaults to the model's mode.
    #[arg(long)]
    pub casewise: bool,
    #[arg(long, value_enum, default_value = "terminal-node")]
    pub weighting: WeightingArg,
    #[arg(long, value_enum, default_value = "all-trees")]
    pub local_scale: LocalScaleArg,
}

#[derive(Debug, Args)]
pub struct ImportanceArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub opts: ImportanceOpts,
    /// JSON report including the local matrix.
    #[arg(long, value_name = "JSON")]
    pub out: PathBuf,
    /// Per-feature summary as CSV.
    #[arg(long, value_name = "CSV")]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    #[arg(long, value_parser = parse_backend, default_value = "auto")]
    pub backend: Backend,
    /// Low-rank factor rank.
    #[arg(long, default_value_t = 32, value_parser = positive)]
    pub rank: usize,
    #[arg(long, value_parser = parse_quant, default_value = "int8")]
    pub quant: QuantMode,
    /// TriBlock dense-tier threshold.
    #[arg(long, default_value_t = 1e-4)]
    pub tau: f64,
    /// Memory budget for the full and TriBlock backends, e.g. `1GB` or `512MiB`.
    #[arg(long, value_parser = parse_bytes)]
    pub budget: Option<u64>,
    /// Seed for the randomized factorization; defaults to the forest seed.
    #[arg(long)]
    pub proximity_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ProximityArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Compare against the full matrix after computing (small n only).
    #[arg(long)]
    pub verify: bool,
}

#[derive(Debug, Args)]
pub struct MdsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Use a stored representation instead of recomputing.
    #[arg(long, value_name = "FILE")]
    pub proximity: Option<PathBuf>,
    #[arg(long, default_value_t = 3, value_parser = positive)]
    pub k: usize,
    #[arg(long, default_value_t = 300, value_parser = positive)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Embedding as JSON.
    #[arg(long, value_name = "JSON")]
    pub out: PathBuf,
    /// Coordinates as CSV.
    #[arg(long, value_name = "CSV")]
    pub csv: Option<PathBuf>,
    /// Print the distance correlation against an earlier embedding.
    #[arg(long, value_name = "JSON")]
    pub compare: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OutliersArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long, value_name = "FILE")]
    pub proximity: Option<PathBuf>,
    /// Rows printed, highest score first.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    #[arg(long, value_name = "CSV")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MemEstimateArgs {
    #[arg(long, value_parser = positive)]
    pub samples: usize,
    #[arg(long, default_value_t = 500, value_parser = positive)]
    pub trees: usize,
    #[arg(long, default_value_t = 50, value_parser = positive)]
    pub features: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 1000, value_parser = positive)]
    pub nodes_per_tree: usize,
    #[arg(long, default_value_t = 32, value_parser = positive)]
    pub rank: usize,
    #[arg(long, value_parser = parse_quant, default_value = "int8")]
    pub quant: QuantMode,
    #[arg(long, value_parser = parse_backend, default_value = "auto")]
    pub backend: Backend,
    /// TriBlock size as a fraction of the packed triangle.
    #[arg(long, default_value_t = rfx_core::proximity::DEFAULT_RETENTION)]
    pub retention: f64,
    /// Refuse when the selected backend exceeds this many bytes.
    #[arg(long, value_parser = parse_bytes)]
    pub budget: Option<u64>,
    /// Print the plan as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct VizExportArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub importance: ImportanceOpts,
    #[arg(long, value_name = "JSON")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 100, value_parser = positive)]
    pub trees: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Timings as JSON.
    #[arg(long, value_name = "JSON")]
    pub out: Option<PathBuf>,
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    s.parse().map_err(|e: rfx_core::RfxError| e.to_string())
}

fn parse_quant(s: &str) -> Result<QuantMode, String> {
    s.parse().map_err(|e: rfx_core::RfxError| e.to_string())
}

/// `1024`, `1GB`, `1.5 GiB`, `512MiB`, `200kb`.
pub fn parse_bytes(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let split = s
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(s.len());
    let (number, unit) = s.split_at(split);
    let value: f64 = number.parse().map_err(|_| format!("invalid size '{s}'"))?;
    let scale = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1.0,
        "kb" => 1e3,
        "mb" => 1e6,
        "gb" => 1e9,
        "tb" => 1e12,
        "kib" => 1024.0,
        "mib" => 1024.0 * 1024.0,
        "gib" => 1024.0 * 1024.0 * 1024.0,
        "tib" => 1024.0 * 1024.0 * 1024.0 * 1024.0,
        other => return Err(format!("unknown size unit '{other}'")),
    };
    Ok((value * scale).round() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_sizes() {
        assert_eq!(parse_bytes("1024"), Ok(1024));
        assert_eq!(parse_bytes("1GB"), Ok(1_000_000_000));
        assert_eq!(parse_bytes("1.5 GiB"), Ok(1_610_612_736));
        assert!(parse_bytes("12 parsecs").is_err());
        assert!(parse_bytes("GB").is_err());
    }
}
