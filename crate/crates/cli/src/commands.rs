use std::fs;
use std::path::Path;
use std::time::Instant;

use rfx_core::forest::{train, Forest, TrainConfig};
use rfx_core::importance::{importance_report, ImportanceOptions, ImportanceReport};
use rfx_core::mds::{mds_correlation, mds_full, mds_lowrank, MdsEmbedding, PowerIterConfig};
use rfx_core::proximity::*;
use rfx_core::{Dataset, RfxError, Schema};
use serde::Serialize;

use crate::args::*;
use crate::bundle::{BundleParts, VizBundle};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn load_data(args: &DataArgs) -> Result<Dataset> {
    let data = match &args.schema {
        Some(schema) => {
            Dataset::load_csv(&args.data, &Schema::from_json_file(schema)?, &args.label)?
        }
        None => Dataset::load_csv_numeric(&args.data, &args.label)?,
    };
    Ok(data)
}

fn load_model(args: &ModelArgs) -> Result<(Dataset, Forest)> {
    let data = load_data(&args.data)?;
    let forest = Forest::load(&args.forest)?;
    forest.check_dataset(&data)?;
    Ok((data, forest))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::Core(RfxError::Io(e)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    write_text(path, &text)
}

fn percent(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

pub fn train_cmd(args: &TrainArgs) -> Result<()> {
    let data = load_data(&args.data)?;
    let config = TrainConfig {
        ntree: args.trees,
        mtry: args.mtry,
        seed: args.seed,
        min_node_size: args.min_node_size,
        max_nodes: args.max_nodes,
        casewise: args.casewise,
    };
    let start = Instant::now();
    let forest = train(&data, &config)?;
    let elapsed = start.elapsed().as_secs_f64();
    let report = forest.oob_report(&data)?;
    forest.save(&args.out)?;

    println!(
        "trained {} trees on {} samples x {} features ({} classes) in {elapsed:.2}s",
        forest.n_trees(),
        data.n_samples(),
        data.n_features(),
        data.n_classes()
    );
    println!("OOB error rate: {}", percent(report.error_rate));
    println!("OOB accuracy: {}", percent(report.accuracy()));
    if !report.uncovered.is_empty() {
        println!("samples never out of bag: {}", report.uncovered.len());
    }
    println!("confusion matrix (rows: true, columns: predicted)");
    let names = data.class_names();
    let width = names.iter().map(|s| s.len()).max().unwrap_or(1).max(6);
    print!("{:width$}", "");
    for name in names {
        print!(" {name:>width$}");
    }
    println!();
    for (name, row) in names.iter().zip(&report.confusion) {
        print!("{name:width$}");
        for v in row {
            print!(" {v:>width$}");
        }
        println!();
    }
    for (name, acc) in names.iter().zip(&report.class_accuracy) {
        println!("class {name} accuracy: {}", percent(*acc));
    }
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    println!("forest written to {}", args.out.display());
    Ok(())
}

fn importance_options(opts: &ImportanceOpts, forest: &Forest) -> ImportanceOptions {
    ImportanceOptions {
        casewise: opts.casewise || forest.config().casewise,
        weighting: opts.weighting.into(),
        local_scale: opts.local_scale.into(),
    }
}

pub fn importance_cmd(args: &ImportanceArgs) -> Result<()> {
    let (data, forest) = load_model(&args.model)?;
    let report = importance_report(&forest, &data, importance_options(&args.opts, &forest))?;
    println!(
        "{:<24} {:>10} {:>12} {:>10}",
        "feature", "gini", "perm mean", "perm sd"
    );
    let mut order: Vec<usize> = (0..report.feature_names.len()).collect();
    order.sort_by(|&a, &b| report.overall_perm[b].total_cmp(&report.overall_perm[a]));
    for j in order {
        println!(
            "{:<24} {:>10.4} {:>12.4} {:>10.4}",
            report.feature_names[j],
            report.overall_gini[j],
            report.overall_perm[j],
            report.overall_perm_sd[j]
        );
    }
    println!("casewise: {}", report.casewise);
    write_json(&args.out, &report.to_json())?;
    if let Some(csv) = &args.csv {
        write_text(csv, &report.to_csv())?;
    }
    Ok(())
}

fn proximity_options(args: &BackendArgs, forest: &Forest) -> ProximityOptions {
    ProximityOptions {
        backend: args.backend,
        tau: args.tau,
        rank: args.rank,
        mode: args.quant,
        budget: args.budget,
        seed: args.proximity_seed.unwrap_or(forest.config().seed),
    }
}

/// Refuses an over-budget dense backend from the sample count alone.
fn precheck_budget(args: &BackendArgs, n: usize) -> Result<()> {
    let Some(budget) = args.budget else {
        return Ok(());
    };
    let (name, required, suggestion) = match args.backend.resolve(n) {
        Backend::Full => (
            "full",
            full_bytes(n as u64),
            "use --backend triblock or --backend lowrank instead",
        ),
        Backend::TriBlock => (
            "triblock",
            triblock_bytes(n as u64, DEFAULT_RETENTION),
            "use --backend lowrank instead",
        ),
        _ => return Ok(()),
    };
    if required > budget {
        return Err(RfxError::BudgetExceeded {
            backend: name,
            required,
            budget,
            suggestion: suggestion.into(),
        }
        .into());
    }
    Ok(())
}

fn compute_repr(data: &Dataset, forest: &Forest, args: &BackendArgs) -> Result<ProximityRepr> {
    let membership = leaf_membership(forest, data)?;
    Ok(compute_proximity(
        &membership,
        &proximity_options(args, forest),
    )?)
}

fn backend_name(repr: &ProximityRepr) -> String {
    match repr {
        ProximityRepr::Full(_) => "full".into(),
        ProximityRepr::TriBlock(_) => "triblock".into(),
        ProximityRepr::LowRank(lr) => format!("lowrank r={} {}", lr.rank(), lr.mode()),
    }
}

fn describe(repr: &ProximityRepr, forest: &Forest, data: &Dataset) -> Result<()> {
    let n = repr.n() as u64;
    let dense = full_headline_bytes(n);
    println!("backend: {}", backend_name(repr));
    println!("samples: {n}");
    println!("stored bytes: {} ({})", repr.bytes(), decimal(repr.bytes()));
    println!(
        "compression vs dense 8n^2: {:.2}x",
        dense as f64 / repr.bytes().max(1) as f64
    );
    match repr {
        ProximityRepr::Full(_) => {}
        ProximityRepr::TriBlock(t) => {
            let s = t.summary();
            println!("dense tier (p >= {}): {} entries", s.tau, s.dense_entries);
            println!(
                "sparse tier ({} <= p < {}): {} entries",
                s.hard_zero, s.tau, s.sparse_entries
            );
            println!(
                "implicit zeros: {} of {} pairs",
                s.zero_pairs, s.total_pairs
            );
            println!("retention: {:.4}", s.retention);
        }
        ProximityRepr::LowRank(lr) => {
            println!("rank: {}", lr.rank());
            println!("quantization: {}", lr.mode());
            println!("pmax: {:.6}", lr.pmax());
            println!(
                "payload bytes: {}, metadata bytes: {}",
                lr.payload_bytes(),
                lr.metadata_bytes()
            );
            if let Some(note) = lr.notice() {
                println!("notice: {note}");
            }
        }
    }
    let mut req = PlanRequest::new(n, forest.n_trees() as u64);
    req.features = data.n_features() as u64;
    req.classes = data.n_classes() as u64;
    req.backend = repr.backend();
    if let ProximityRepr::LowRank(lr) = repr {
        req.rank = lr.rank() as u64;
        req.mode = lr.mode();
    }
    let plan = memory_plan(&req)?;
    println!(
        "planner: full {} | triblock {} | {} {} (two factors)",
        plan.full.headline_decimal,
        plan.triblock.headline_decimal,
        plan.lowrank.backend,
        plan.lowrank.headline_decimal
    );
    Ok(())
}

fn verify(repr: &ProximityRepr, data: &Dataset, forest: &Forest) -> Result<()> {
    let n = repr.n();
    if n > AUTO_TRIBLOCK_ABOVE {
        println!("reconstruction check skipped: n = {n} exceeds {AUTO_TRIBLOCK_ABOVE}");
        return Ok(());
    }
    let full = full_proximity(&leaf_membership(forest, data)?, None)?;
    let mut max_diff: f64 = 0.0;
    let mut exact = true;
    for i in 0..n {
        for j in i + 1..n {
            let (f, r) = (full.get(i, j), repr.get(i, j));
            max_diff = max_diff.max((f - r).abs());
            let expected = if f >= HARD_ZERO { f } else { 0.0 };
            exact &= r == expected;
        }
    }
    match repr {
        ProximityRepr::LowRank(_) => println!("reconstruction max abs deviation: {max_diff:.3e}"),
        _ if exact => println!("reconstruction check: passed (max abs deviation {max_diff:.3e})"),
        _ => {
            return Err(CliError::Internal(format!(
                "reconstruction check failed: max abs deviation {max_diff:.3e}"
            )))
        }
    }
    Ok(())
}

pub fn proximity_cmd(args: &ProximityArgs) -> Result<()> {
    let data = load_data(&args.model.data)?;
    precheck_budget(&args.backend, data.n_samples())?;
    let forest = Forest::load(&args.model.forest)?;
    forest.check_dataset(&data)?;
    let repr = compute_repr(&data, &forest, &args.backend)?;
    repr.save(&args.out)?;
    describe(&repr, &forest, &data)?;
    if args.verify {
        verify(&repr, &data, &forest)?;
    }
    println!("proximity written to {}", args.out.display());
    Ok(())
}

fn obtain_repr(
    model: &ModelArgs,
    backend: &BackendArgs,
    stored: Option<&Path>,
) -> Result<(Dataset, Forest, ProximityRepr)> {
    let data = load_data(&model.data)?;
    if stored.is_none() {
        precheck_budget(backend, data.n_samples())?;
    }
    let forest = Forest::load(&model.forest)?;
    forest.check_dataset(&data)?;
    let repr = match stored {
        Some(path) => {
            let repr = ProximityRepr::load(path)?;
            if repr.n() != data.n_samples() {
                return Err(RfxError::Data(format!(
                    "proximity file has n = {} but the dataset has {} samples",
                    repr.n(),
                    data.n_samples()
                ))
                .into());
            }
            repr
        }
        None => compute_repr(&data, &forest, backend)?,
    };
    Ok((data, forest, repr))
}

fn embed(repr: &ProximityRepr, k: usize, cfg: &PowerIterConfig) -> Result<MdsEmbedding> {
    Ok(match repr {
        ProximityRepr::LowRank(lr) => mds_lowrank(lr, cfg)?,
        other => mds_full(other.as_dyn(), k)?,
    })
}

pub fn mds_cmd(args: &MdsArgs) -> Result<()> {
    let (data, forest, repr) = obtain_repr(&args.model, &args.backend, args.proximity.as_deref())?;
    let cfg = PowerIterConfig {
        max_iter: args.max_iter,
        tol: args.tol,
        k: args.k,
        seed: forest.config().seed,
    };
    let emb = embed(&repr, args.k, &cfg)?;
    println!("backend: {}", backend_name(&repr));
    for (k, lambda) in emb.eigenvalues.iter().enumerate() {
        let detail = match (emb.iterations.get(k), emb.residuals.get(k)) {
            (Some(&it), Some(res)) if it > 0 => format!(" ({it} iterations, residual {res:.2e})"),
            (_, Some(res)) => format!(" (residual {res:.2e})"),
            _ => String::new(),
        };
        println!("lambda_{}: {lambda:.6}{detail}", k + 1);
    }
    if let Some(note) = &emb.notice {
        println!("notice: {note}");
    }
    write_text(&args.out, &emb.to_json()?)?;
    if let Some(csv) = &args.csv {
        write_text(csv, &emb.to_csv(Some(data.labels())))?;
    }
    if let Some(other) = &args.compare {
        let prev = MdsEmbedding::load_json(other)?;
        println!(
            "MDS correlation vs {}: {:.6}",
            other.display(),
            mds_correlation(&emb, &prev)?
        );
    }
    Ok(())
}

pub fn outliers_cmd(args: &OutliersArgs) -> Result<()> {
    let (data, forest, repr) = obtain_repr(&args.model, &args.backend, args.proximity.as_deref())?;
    let scores = outlier_scores(repr.as_dyn(), 1.0 / forest.n_trees() as f64)?;
    println!("backend: {}", backend_name(&repr));
    println!("{:>6} {:>8} {:>14}  class", "rank", "sample", "score");
    for (r, &i) in scores.ranking().iter().take(args.top).enumerate() {
        println!(
            "{:>6} {i:>8} {:>14.4}  {}",
            r + 1,
            scores.scores[i],
            data.class_names()[data.label(i)]
        );
    }
    if let Some(out) = &args.out {
        write_text(out, &scores.to_csv(Some(data.labels())))?;
    }
    Ok(())
}

pub fn mem_estimate_cmd(args: &MemEstimateArgs) -> Result<()> {
    let mut req = PlanRequest::new(args.samples as u64, args.trees as u64);
    req.features = args.features as u64;
    req.classes = args.classes as u64;
    req.nodes_per_tree = args.nodes_per_tree as u64;
    req.rank = args.rank as u64;
    req.mode = args.quant;
    req.backend = args.backend;
    req.retention = args.retention;
    let plan = memory_plan(&req)?;

    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&plan).map_err(|e| CliError::Internal(e.to_string()))?
        );
    } else {
        print_plan(&plan);
    }
    if let Some(budget) = args.budget {
        if plan.selected.bytes > budget {
            let suggestion = match plan.selected_backend {
                Backend::Full => "use --backend triblock or --backend lowrank instead",
                Backend::TriBlock => "use --backend lowrank instead",
                _ => "lower --rank or use --quant nf4",
            };
            let backend = match plan.selected_backend {
                Backend::Full => "full",
                Backend::TriBlock => "triblock",
                _ => "lowrank",
            };
            return Err(RfxError::BudgetExceeded {
                backend,
                required: plan.selected.bytes,
                budget,
                suggestion: suggestion.into(),
            }
            .into());
        }
    }
    Ok(())
}

fn print_plan(plan: &MemoryPlan) {
    let r = &plan.request;
    println!(
        "model memory (n={}, B={}, m={}, C={}, nodes/tree={})",
        r.samples, r.trees, r.features, r.classes, r.nodes_per_tree
    );
    for item in &plan.model.items {
        println!(
            "  {:<32} {:<14} {:>10}",
            item.component, item.size, item.display
        );
    }
    println!("  Subtotal (model): {}", plan.model.subtotal);
    for item in &plan.model.importance_items {
        println!(
            "  {:<32} {:<14} {:>10}",
            item.component, item.size, item.display
        );
    }
    println!(
        "  Subtotal (importance): {}",
        plan.model.importance_subtotal
    );
    println!("  Total: {}", plan.model.total);
    println!("proximity storage");
    for est in [&plan.full, &plan.triblock, &plan.lowrank] {
        println!(
            "  {:<24} {:>10} ({:>10})  {:>8.1}x  RAM 32GB: {}  VRAM 12GB: {}",
            est.backend,
            est.headline_decimal,
            est.headline_binary,
            est.compression_ratio,
            if est.feasible_ram_32gb { "yes" } else { "no" },
            if est.feasible_vram_12gb { "yes" } else { "no" },
        );
    }
    println!(
        "  lowrank stored (single factor): {}",
        plan.lowrank_single_factor
    );
    let row = &plan.table_row;
    println!("scalability row: samples | CPU full | CPU TriBlock | GPU INT8 r=32 | GPU NF4 r=32 | recommended");
    println!(
        "  {} | {} | {} | {} | {} | {}",
        row.samples,
        row.cpu_full,
        row.cpu_triblock,
        row.gpu_int8_32,
        row.gpu_nf4_32,
        row.recommended
    );
    println!(
        "selected backend: {} ({})",
        plan.selected.backend, plan.selected.headline_decimal
    );
}

pub fn viz_export_cmd(args: &VizExportArgs) -> Result<()> {
    let data = load_data(&args.model.data)?;
    precheck_budget(&args.backend, data.n_samples())?;
    let forest = Forest::load(&args.model.forest)?;
    forest.check_dataset(&data)?;
    let importance: ImportanceReport = importance_report(
        &forest,
        &data,
        importance_options(&args.importance, &forest),
    )?;
    let repr = compute_repr(&data, &forest, &args.backend)?;
    let cfg = PowerIterConfig {
        seed: forest.config().seed,
        ..Default::default()
    };
    let embedding = embed(&repr, cfg.k, &cfg)?;
    let outliers = outlier_scores(repr.as_dyn(), 1.0 / forest.n_trees() as f64)?;
    let bundle = VizBundle::build(BundleParts {
        data: &data,
        forest: &forest,
        backend: backend_name(&repr),
        importance: &importance,
        embedding: &embedding,
        outliers: &outliers,
    })?;
    bundle.check().map_err(CliError::Internal)?;
    let text = serde_json::to_string(&bundle).map_err(|e| CliError::Internal(e.to_string()))?;
    write_text(&args.out, &text)?;
    println!(
        "bundle: {} samples, {} features, backend {}, per-tree votes {}",
        data.n_samples(),
        data.n_features(),
        bundle.metadata.backend,
        if bundle.oob.per_tree.is_some() {
            "included"
        } else {
            "omitted"
        }
    );
    println!("bundle written to {}", args.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct Timings {
    samples: usize,
    features: usize,
    trees: usize,
    threads: usize,
    backend: String,
    train_s: f64,
    importance_s: f64,
    proximity_s: f64,
    mds_s: f64,
}

pub fn bench_cmd(args: &BenchArgs) -> Result<()> {
    let data = load_data(&args.data)?;
    precheck_budget(&args.backend, data.n_samples())?;
    let clock = Instant::now();
    let forest = train(&data, &TrainConfig::new(args.trees, args.seed))?;
    let train_s = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    importance_report(&forest, &data, ImportanceOptions::default())?;
    let importance_s = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let repr = compute_repr(&data, &forest, &args.backend)?;
    let proximity_s = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let cfg = PowerIterConfig {
        seed: args.seed,
        ..Default::default()
    };
    embed(&repr, cfg.k, &cfg)?;
    let mds_s = clock.elapsed().as_secs_f64();

    let t = Timings {
        samples: data.n_samples(),
        features: data.n_features(),
        trees: args.trees,
        threads: rayon::current_num_threads(),
        backend: backend_name(&repr),
        train_s,
        importance_s,
        proximity_s,
        mds_s,
    };
    println!(
        "samples {} | features {} | trees {} | threads {}",
        t.samples, t.features, t.trees, t.threads
    );
    println!(
        "train       {:>9.3}s  ({:.1} trees/s)",
        t.train_s,
        t.trees as f64 / t.train_s.max(1e-9)
    );
    println!("importance  {:>9.3}s", t.importance_s);
    println!("proximity   {:>9.3}s  ({})", t.proximity_s, t.backend);
    println!("mds         {:>9.3}s", t.mds_s);
    if let Some(out) = &args.out {
        write_json(out, &t)?;
    }
    Ok(())
}
