//! Closed-form memory estimates for proximity backends and the forest model.

use serde::Serialize;

use super::quant::QuantMode;
use super::Backend;
use crate::error::{Result, RfxError};

pub const GIB: f64 = 1024.0 * 1024.0 * 1024.0;
pub const MIB: f64 = 1024.0 * 1024.0;

/// Host memory target for the CPU backends.
pub const RAM_BUDGET: u64 = 32 * (1 << 30);
/// Accelerator memory target for the low-rank factors.
pub const VRAM_BUDGET: u64 = 12 * (1 << 30);
/// Share of a budget usable by proximity storage; the rest is left to the
/// process, the model and the OS.
pub const USABLE_FRACTION: f64 = 0.5;

/// Estimated TriBlock size as a fraction of the packed triangle at the
/// default threshold.
pub const DEFAULT_RETENTION: f64 = 0.8;

/// Rank used in the headline low-rank columns.
pub const HEADLINE_RANK: usize = 32;

/// Packed strict upper triangle of `f64`.
pub fn full_bytes(n: u64) -> u64 {
    8 * (n * n.saturating_sub(1) / 2)
}

/// Dense `n × n` `f64` matrix.
pub fn full_headline_bytes(n: u64) -> u64 {
    8 * n * n
}

pub fn triblock_bytes(n: u64, retention: f64) -> u64 {
    (full_bytes(n) as f64 * retention).round() as u64
}

/// Factor payload of one `n × r` matrix.
pub fn factor_bytes(n: u64, rank: u64, mode: QuantMode) -> u64 {
    (n * rank * mode.bits()).div_ceil(8)
}

/// Two-factor convention used for headline low-rank sizes.
pub fn lowrank_headline_bytes(n: u64, rank: u64, mode: QuantMode) -> u64 {
    2 * factor_bytes(n, rank, mode)
}

pub fn decimal(bytes: u64) -> String {
    let b = bytes as f64;
    if b >= 1e9 {
        format!("{:.1} GB", b / 1e9)
    } else if b >= 1e6 {
        format!("{:.1} MB", b / 1e6)
    } else if b >= 1e3 {
        format!("{:.1} KB", b / 1e3)
    } else {
        format!("{bytes} B")
    }
}

pub fn binary(bytes: u64) -> String {
    let b = bytes as f64;
    if b >= GIB {
        format!("{:.1} GiB", b / GIB)
    } else if b >= MIB {
        format!("{:.1} MiB", b / MIB)
    } else if b >= 1024.0 {
        format!("{:.1} KiB", b / 1024.0)
    } else {
        format!("{bytes} B")
    }
}

pub(crate) fn check_budget(
    backend: &'static str,
    required: u64,
    budget: Option<u64>,
) -> Result<()> {
    match budget {
        Some(budget) if required > budget => {
            let suggestion = match backend {
                "full" => "use --backend triblock or --backend lowrank instead",
                _ => "use --backend lowrank instead",
            };
            Err(RfxError::BudgetExceeded {
                backend,
                required,
                budget,
                suggestion: suggestion.into(),
            })
        }
        _ => Ok(()),
    }
}

fn fits(bytes: u64, budget: u64) -> bool {
    bytes as f64 <= budget as f64 * USABLE_FRACTION
}

#[derive(Debug, Clone, Serialize)]
pub struct BackendEstimate {
    pub backend: String,
    /// Bytes actually allocated by this implementation.
    pub bytes: u64,
    /// Bytes under the reporting convention (dense matrix, two factors).
    pub headline_bytes: u64,
    pub headline_decimal: String,
    pub headline_binary: String,
    /// `8n²` divided by the headline bytes.
    pub compression_ratio: f64,
    pub feasible_ram_32gb: bool,
    pub feasible_vram_12gb: bool,
}

impl BackendEstimate {
    fn new(backend: String, n: u64, bytes: u64, headline_bytes: u64) -> Self {
        BackendEstimate {
            backend,
            bytes,
            headline_bytes,
            headline_decimal: decimal(headline_bytes),
            headline_binary: binary(headline_bytes),
            compression_ratio: full_headline_bytes(n) as f64 / headline_bytes.max(1) as f64,
            feasible_ram_32gb: fits(bytes, RAM_BUDGET),
            feasible_vram_12gb: fits(bytes, VRAM_BUDGET),
        }
    }
}

/// One row of the scalability table: sizes across backends for a sample count.
#[derive(Debug, Clone, Serialize)]
pub struct ScalabilityRow {
    pub samples: u64,
    pub cpu_full: String,
    pub cpu_triblock: String,
    pub gpu_int8_32: String,
    pub gpu_nf4_32: String,
    pub recommended: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct LineItem {
    pub component: String,
    pub size: String,
    pub bytes: u64,
    pub display: String,
}

impl LineItem {
    fn new(component: &str, size: &str, elements: u64) -> Self {
        let bytes = 4 * elements;
        LineItem {
            component: component.into(),
            size: size.into(),
            bytes,
            display: decimal(bytes),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelMemory {
    pub items: Vec<LineItem>,
    pub subtotal_bytes: u64,
    pub subtotal: String,
    pub importance_items: Vec<LineItem>,
    pub importance_subtotal_bytes: u64,
    pub importance_subtotal: String,
    pub total_bytes: u64,
    pub total: String,
}

/// Everything the planner needs; defaults follow the reference model table.
#[derive(Debug, Clone, Serialize)]
pub struct PlanRequest {
    pub samples: u64,
    pub trees: u64,
    pub features: u64,
    pub classes: u64,
    pub nodes_per_tree: u64,
    pub rank: u64,
    pub mode: QuantMode,
    pub backend: Backend,
    /// TriBlock size as a fraction of the packed triangle; measured or
    /// estimated.
    pub retention: f64,
}

impl PlanRequest {
    pub fn new(samples: u64, trees: u64) -> Self {
        PlanRequest {
            samples,
            trees,
            features: 50,
            classes: 3,
            nodes_per_tree: 1000,
            rank: HEADLINE_RANK as u64,
            mode: QuantMode::I8,
            backend: Backend::Auto,
            retention: DEFAULT_RETENTION,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MemoryPlan {
    pub request: PlanRequest,
    pub selected_backend: Backend,
    pub selected: BackendEstimate,
    pub full: BackendEstimate,
    pub triblock: BackendEstimate,
    pub lowrank: BackendEstimate,
    pub lowrank_single_factor_bytes: u64,
    pub lowrank_single_factor: String,
    pub table_row: ScalabilityRow,
    pub model: ModelMemory,
}

pub fn model_memory(req: &PlanRequest) -> ModelMemory {
    let (n, m, b, c, nodes) = (
        req.samples,
        req.features,
        req.trees,
        req.classes,
        req.nodes_per_tree,
    );
    let items = vec![
        LineItem::new("Training data (X, y)", "n x m", n * m),
        LineItem::new(
            "Tree structures (treemap)",
            "2 x maxnode x ntree",
            2 * nodes * b,
        ),
        LineItem::new("Node status", "maxnode x ntree", nodes * b),
        LineItem::new("Split values", "maxnode x ntree", nodes * b),
        LineItem::new("Split variables", "maxnode x ntree", nodes * b),
        LineItem::new("Node classes", "maxnode x ntree", nodes * b),
        LineItem::new(
            "Class populations",
            "nclass x maxnode x ntree",
            c * nodes * b,
        ),
        LineItem::new("OOB tracking", "n x nclass", n * c),
    ];
    let importance_items = vec![
        LineItem::new("Overall importance", "m", m),
        LineItem::new("Local importance (per sample)", "n", n),
        LineItem::new("Local importance (per sample, per feature)", "n x m", n * m),
        LineItem::new("Importance standard deviation", "m", m),
    ];
    let subtotal_bytes = items.iter().map(|i| i.bytes).sum();
    let importance_subtotal_bytes = importance_items.iter().map(|i| i.bytes).sum();
    let total_bytes = subtotal_bytes + importance_subtotal_bytes;
    ModelMemory {
        items,
        subtotal_bytes,
        subtotal: decimal(subtotal_bytes),
        importance_items,
        importance_subtotal_bytes,
        importance_subtotal: decimal(importance_subtotal_bytes),
        total_bytes,
        total: decimal(total_bytes),
    }
}

pub fn memory_plan(req: &PlanRequest) -> Result<MemoryPlan> {
    if req.samples < 2 || req.trees == 0 || req.rank == 0 || req.features == 0 || req.classes < 2 {
        return Err(RfxError::config(
            "memory plan needs n >= 2, B >= 1, r >= 1, m >= 1 and at least 2 classes",
        ));
    }
    if !(req.retention > 0.0 && req.retention <= 2.0) {
        return Err(RfxError::config(format!(
            "retention {} outside (0, 2]",
            req.retention
        )));
    }
    let n = req.samples;
    let full = BackendEstimate::new("full".into(), n, full_bytes(n), full_headline_bytes(n));
    let tri = triblock_bytes(n, req.retention);
    let triblock = BackendEstimate::new("triblock".into(), n, tri, tri);
    let single = factor_bytes(n, req.rank, req.mode);
    let lowrank = BackendEstimate::new(
        format!("lowrank r={} {}", req.rank, req.mode),
        n,
        single,
        lowrank_headline_bytes(n, req.rank, req.mode),
    );

    let int8 = lowrank_headline_bytes(n, HEADLINE_RANK as u64, QuantMode::I8);
    let nf4 = lowrank_headline_bytes(n, HEADLINE_RANK as u64, QuantMode::Nf4);
    let recommended = if full.feasible_ram_32gb && n as usize <= super::AUTO_TRIBLOCK_ABOVE {
        "full"
    } else if triblock.feasible_ram_32gb {
        "triblock"
    } else {
        "lowrank int8"
    };
    let table_row = ScalabilityRow {
        samples: n,
        cpu_full: binary(full.headline_bytes),
        cpu_triblock: binary(tri),
        gpu_int8_32: binary(int8),
        gpu_nf4_32: binary(nf4),
        recommended: recommended.into(),
    };

    let selected_backend = req.backend.resolve(n as usize);
    let selected = match selected_backend {
        Backend::Full => full.clone(),
        Backend::TriBlock => triblock.clone(),
        _ => lowrank.clone(),
    };
    Ok(MemoryPlan {
        request: req.clone(),
        selected_backend,
        selected,
        full,
        triblock,
        lowrank,
        lowrank_single_factor_bytes: single,
        lowrank_single_factor: decimal(single),
        table_row,
        model: model_memory(req),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_triangle_is_half_the_square_minus_diagonal() {
        assert_eq!(full_bytes(4), 48);
        assert_eq!(full_headline_bytes(4), 128);
    }

    #[test]
    fn nf4_factor_bytes_round_up() {
        assert_eq!(factor_bytes(3, 1, QuantMode::Nf4), 2);
        assert_eq!(factor_bytes(3, 1, QuantMode::F16), 6);
    }

    #[test]
    fn unit_formatting() {
        assert_eq!(decimal(80_000_000_000), "80.0 GB");
        assert_eq!(decimal(6_400_000), "6.4 MB");
        assert_eq!(binary(80_000_000_000), "74.5 GiB");
        assert_eq!(decimal(200), "200 B");
    }

    #[test]
    fn small_plan_recommends_full() {
        let plan = memory_plan(&PlanRequest::new(1000, 500)).unwrap();
        assert_eq!(plan.table_row.recommended, "full");
        assert_eq!(plan.selected_backend, Backend::Full);
    }

    #[test]
    fn degenerate_request_rejected() {
        assert!(memory_plan(&PlanRequest::new(1, 10)).is_err());
    }
}
