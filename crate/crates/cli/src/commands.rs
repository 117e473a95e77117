use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use headsparse::calibration::{
    calibrate as calibrate_heads, load_partition, partition_entries, save_partition, HeadPartition,
};
use headsparse::distill::{
    build_toy_task, load_teacher_cache, save_teacher_cache, teacher_cache_for, toy_self_distill,
};
use headsparse::engine::{
    content_projector, head_summaries, mass_budget_sweep, retrieval_head_decode, BudgetPoint, HeadSummary,
    RetrievalIndex, SelectorMode, SparseEngine, SparsityReport,
};
use headsparse::indexer::{
    load_projector, lr_at, mean_recall, rows_from_workload, save_projector, train_projector, Projector,
};
use headsparse::report::{read_csv, write_csv, BenchRow, DecodeTraceRow, LossRow};
use headsparse::workload::{
    dense_attention, gen_synthetic_workload, HeadId, ModelGeometry, NeedleSpan, SyntheticModel, TopicSpec, Workload,
    WorkloadSpec,
};
use headsparse::Error;
use serde::{Deserialize, Serialize};

use crate::config::{ProjectorSource, RunConfig};

pub const PARTITION_FILE: &str = "partition.toml";
pub const HEAD_SCORES_FILE: &str = "head_scores.csv";
pub const PROJECTOR_DIR: &str = "projectors";
pub const DECODE_TRACE_FILE: &str = "decode_trace.csv";
pub const SPARSITY_FILE: &str = "sparsity_report.toml";
pub const HEAD_SUMMARY_FILE: &str = "head_summary.csv";
pub const MASS_SWEEP_FILE: &str = "mass_sweep.csv";
pub const DISTILL_DIR: &str = "distill";
pub const TEACHER_STEM: &str = "teacher_cache";
pub const DISTILL_LOSS_FILE: &str = "distill_loss.csv";
pub const BENCH_FILE: &str = "bench.csv";
pub const BENCH_META_FILE: &str = "bench_meta.toml";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

/// Slack for floating-point comparisons in the runtime invariant checks.
const INVARIANT_SLACK: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl CliError {
    /// 2 for usage, configuration and input errors; 3 for violations found at runtime.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Invariant(_) => 3,
            CliError::Core(e) => match e {
                Error::Argument(_) | Error::Format(_) | Error::Io { .. } => 2,
                Error::Numeric(_) | Error::Internal(_) => 3,
            },
        }
    }
}

type CmdResult = Result<(), CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn prepare(config: &RunConfig, out: &Path) -> CmdResult {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let path = out.join(RESOLVED_CONFIG_FILE);
    fs::write(&path, config.to_toml()?).map_err(|e| io_err(&path, e))
}

fn build_workload(config: &RunConfig) -> Result<Workload, CliError> {
    Ok(gen_synthetic_workload(&config.geometry, &config.workload_spec(), config.workload_seed())?)
}

fn require_partition(config: &RunConfig, out: &Path, path: Option<PathBuf>) -> Result<HeadPartition, CliError> {
    let path = path.unwrap_or_else(|| out.join(PARTITION_FILE));
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "partition file {} not found; run `headsparse calibrate` first",
            path.display()
        )));
    }
    Ok(load_partition(&path, &config.geometry)?)
}

pub fn calibrate(config: &RunConfig, out: &Path) -> CmdResult {
    prepare(config, out)?;
    let spec = config.workload_spec();
    let model = SyntheticModel::from_spec(&config.geometry, &spec, config.workload_seed())?;
    let partition = calibrate_heads(&model, &config.calibration, config.root_seed().child("calibration"))?;
    save_partition(&out.join(PARTITION_FILE), &partition, &config.geometry)?;
    write_csv(&out.join(HEAD_SCORES_FILE), &partition_entries(&partition, &config.geometry))?;

    let planted = spec.retrieval_heads;
    let found = planted
        .iter()
        .filter(|h| partition.is_retrieval(h.flat(&config.geometry)))
        .count();
    println!(
        "calibrate: {} of {} heads retrieval (ratio {}); planted heads recovered {found}/{}",
        partition.retrieval_set.len(),
        partition.scores.len(),
        partition.ratio,
        planted.len()
    );
    Ok(())
}

fn loss_file(head: HeadId) -> String {
    format!("loss_l{}_h{}.csv", head.layer, head.head)
}

pub fn train_indexer(config: &RunConfig, out: &Path, partition: Option<PathBuf>) -> CmdResult {
    prepare(config, out)?;
    let partition = require_partition(config, out, partition)?;
    let workload = build_workload(config)?;
    let dir = out.join(PROJECTOR_DIR);
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let seeds = config.root_seed().child("indexer");
    let min_pos = config.min_training_position();
    for &flat in &partition.retrieval_set {
        let head = HeadId::from_flat(flat, &config.geometry);
        let s = seeds.index(flat as u64);
        let train = rows_from_workload(&workload, head, config.indexer.rows_per_head, min_pos, s.child("train"))?;
        let eval = rows_from_workload(&workload, head, config.indexer.eval_rows.max(1), min_pos, s.child("eval"))?;
        let outcome = train_projector(&train, &config.stage1, s.child("fit"))?;
        save_projector(&dir, head.layer, head.head, &outcome.projector)?;
        let rows: Vec<LossRow> = outcome
            .losses
            .iter()
            .enumerate()
            .map(|(step, loss)| LossRow {
                step,
                lr: lr_at(&config.stage1, step),
                loss: *loss,
            })
            .collect();
        write_csv(&dir.join(loss_file(head)), &rows)?;
        let recall = mean_recall(&eval, &outcome.projector, config.indexer.recall_k)?;
        println!(
            "train-indexer: {head} r={} loss {:.4} -> {:.4}, held-out top-{} recall {recall:.3}",
            outcome.projector.r,
            outcome.losses.first().copied().unwrap_or(f64::NAN),
            outcome.losses.last().copied().unwrap_or(f64::NAN),
            config.indexer.recall_k
        );
    }
    Ok(())
}

fn load_projectors(
    config: &RunConfig,
    partition: &HeadPartition,
    dir: &Path,
) -> Result<BTreeMap<usize, Projector>, CliError> {
    let g = &config.geometry;
    match config.indexer.source {
        ProjectorSource::Content => {
            let p = content_projector(g, config.workload.signal.content_dim)?;
            Ok(partition.retrieval_set.iter().map(|f| (*f, p.clone())).collect())
        }
        ProjectorSource::Trained => {
            if !dir.is_dir() {
                return Err(CliError::Usage(format!(
                    "projector directory {} not found; run `headsparse train-indexer` first",
                    dir.display()
                )));
            }
            let mut map = BTreeMap::new();
            let mut entries: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| io_err(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension().is_some_and(|x| x == "toml")
                        && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("proj_"))
                })
                .collect();
            entries.sort();
            for path in entries {
                let (layer, head, p) = load_projector(&path)?;
                if layer >= g.n_layers || head >= g.n_q_heads {
                    return Err(CliError::Core(Error::Format(format!(
                        "{}: head L{layer}H{head} outside the geometry",
                        path.display()
                    ))));
                }
                if map.insert(HeadId::new(layer, head).flat(g), p).is_some() {
                    return Err(CliError::Usage(format!(
                        "more than one projector for L{layer}H{head} in {}",
                        dir.display()
                    )));
                }
            }
            Ok(map)
        }
    }
}

pub fn run(config: &RunConfig, out: &Path, partition: Option<PathBuf>, projectors: Option<PathBuf>) -> CmdResult {
    prepare(config, out)?;
    let partition = require_partition(config, out, partition)?;
    let dir = projectors.unwrap_or_else(|| out.join(PROJECTOR_DIR));
    let projectors = load_projectors(config, &partition, &dir)?;
    let g = &config.geometry;
    let decode = config.decode_config();
    let engine = SparseEngine::new(g.clone(), partition.clone(), projectors, decode.clone())?;
    let workload = build_workload(config)?;
    let trace = engine.run(&workload, config.prompt_len())?;

    let rows: Vec<DecodeTraceRow> = trace.entries.iter().map(DecodeTraceRow::from).collect();
    write_csv(&out.join(DECODE_TRACE_FILE), &rows)?;
    let report = SparsityReport::from_trace(&trace, g)?;
    let path = out.join(SPARSITY_FILE);
    fs::write(&path, report.to_toml()?).map_err(|e| io_err(&path, e))?;
    write_csv(&out.join(HEAD_SUMMARY_FILE), &head_summaries(&trace))?;

    let sweep_head = partition.retrieval_set.first().copied().unwrap_or(0);
    let mut positions: BTreeSet<u32> = config.workload.probes.iter().map(|p| p.position as u32).collect();
    positions.insert(workload.seq_len() as u32 - 1);
    let positions: Vec<u32> = positions.into_iter().collect();
    let sweep = mass_budget_sweep(
        &workload,
        HeadId::from_flat(sweep_head, g),
        &positions,
        &config.run.sweep_ks,
        decode.p,
    )?;
    write_csv(&out.join(MASS_SWEEP_FILE), &sweep)?;

    println!(
        "run: {} decode steps, compute sparsity {:.4}, memory sparsity {:.4}, min projected mass {}, mean true mass {}",
        report.decode_steps,
        report.compute_sparsity,
        report.memory_sparsity,
        fmt_opt(report.min_projected_mass),
        fmt_opt(report.mean_true_mass_retrieval)
    );
    check_run_invariants(&report, decode.p)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn check_run_invariants(report: &SparsityReport, p: f64) -> CmdResult {
    if report.memory_sparsity > report.compute_sparsity + INVARIANT_SLACK {
        return Err(CliError::Invariant(format!(
            "memory sparsity {} exceeds compute sparsity {}",
            report.memory_sparsity, report.compute_sparsity
        )));
    }
    if let Some(m) = report.min_projected_mass {
        if m < p - INVARIANT_SLACK {
            return Err(CliError::Invariant(format!("projected mass {m} below p = {p}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSummary {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

pub const DISTILL_SUMMARY_FILE: &str = "distill_summary.toml";

pub fn distill_toy(config: &RunConfig, out: &Path) -> CmdResult {
    prepare(config, out)?;
    let dir = out.join(DISTILL_DIR);
    let seeds = config.root_seed().child("distill");
    let task = build_toy_task(&config.distill.toy, seeds.child("task").seed())?;
    let manifest = save_teacher_cache(&dir, TEACHER_STEM, &teacher_cache_for(&task)?)?;
    let teacher = load_teacher_cache(&manifest)?;
    let stage2 = &config.distill.stage2;
    let outcome = toy_self_distill(&task, &teacher, stage2, seeds.child("train"))?;
    let rows: Vec<LossRow> = outcome
        .losses
        .iter()
        .enumerate()
        .map(|(step, loss)| LossRow {
            step,
            lr: stage2.lr_at(step),
            loss: *loss,
        })
        .collect();
    write_csv(&dir.join(DISTILL_LOSS_FILE), &rows)?;
    let summary = DistillSummary {
        steps: outcome.losses.len(),
        initial_loss: outcome.initial_loss,
        final_loss: outcome.final_loss,
    };
    let path = dir.join(DISTILL_SUMMARY_FILE);
    let text = toml::to_string(&summary).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    println!(
        "distill-toy: {} teacher positions, loss {:.5} -> {:.5} over {} steps",
        teacher.len(),
        outcome.initial_loss,
        outcome.final_loss,
        summary.steps
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchMeta {
    pub seed: u64,
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub unix_time: u64,
    pub lengths: Vec<usize>,
    pub iterations: usize,
    pub warmup: usize,
    pub positions: usize,
    pub p: f64,
    pub projector: String,
}

/// Single-layer geometry with one KV group, so each length costs one cache.
fn bench_geometry(g: &ModelGeometry) -> ModelGeometry {
    let mut b = g.clone();
    b.n_layers = 1;
    b.n_q_heads = g.group_size();
    b.n_kv_heads = 1;
    b
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

fn summarise(length: usize, mode: &str, iterations: usize, mut samples: Vec<f64>, tokens: f64) -> BenchRow {
    samples.sort_by(f64::total_cmp);
    BenchRow {
        length,
        mode: mode.to_string(),
        iterations,
        median_us: percentile(&samples, 0.5),
        p95_us: percentile(&samples, 0.95),
        mean_tokens: tokens,
    }
}

pub fn bench(config: &RunConfig, out: &Path) -> CmdResult {
    let b = &config.bench;
    if b.iterations == 0 {
        return Err(CliError::Usage("bench needs at least one measured iteration".into()));
    }
    if b.lengths.is_empty() || b.positions == 0 {
        return Err(CliError::Usage("bench needs at least one length and one position".into()));
    }
    config.geometry.validate()?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let g = bench_geometry(&config.geometry);
    let head = HeadId::new(0, 0);
    let scale = g.scale();
    let base = config.decode_config();
    let mut rows = Vec::new();
    for &length in &b.lengths {
        if length < 2 * b.positions + 64 {
            return Err(CliError::Usage(format!(
                "bench length {length} too short for {} positions",
                b.positions
            )));
        }
        let mut spec = WorkloadSpec::new(length);
        spec.retrieval_heads = vec![head];
        spec.needles = vec![NeedleSpan {
            src: g.n_sinks + 16,
            dst: length - b.positions - 24,
            len: 16,
        }];
        spec.topic = Some(TopicSpec::default());
        spec.signal = config.workload.signal.clone();
        let seed = config.root_seed().child("bench").index(length as u64).seed();
        let workload = gen_synthetic_workload(&g, &spec, seed)?;
        let cache = workload.cache_for(head, length)?;
        let index = RetrievalIndex::new(content_projector(&g, spec.signal.content_dim)?, &cache)?;
        let positions: Vec<u32> = (length - b.positions..length).map(|t| t as u32).collect();

        let time_mode = |mode: &str, selector: Option<SelectorMode>| -> Result<BenchRow, CliError> {
            let mut decode = base.clone();
            if let Some(m) = selector {
                decode.mode = m;
            }
            let mut samples = Vec::with_capacity(b.iterations * positions.len());
            let mut tokens = 0.0;
            for it in 0..b.warmup + b.iterations {
                for &pos in &positions {
                    let q = workload.query(head, pos as usize);
                    let start = Instant::now();
                    let n = match mode {
                        "dense" => dense_attention(q, pos, &cache, scale)?.weights.len(),
                        _ => retrieval_head_decode(q, pos, &cache, &index, &decode, scale)?.active_set.len(),
                    };
                    let us = start.elapsed().as_secs_f64() * 1e6;
                    if it >= b.warmup {
                        samples.push(us);
                        tokens += n as f64;
                    }
                }
            }
            let count = samples.len() as f64;
            Ok(summarise(length, mode, b.iterations, samples, tokens / count))
        };
        rows.push(time_mode("dense", None)?);
        rows.push(time_mode("sparse_exact", Some(SelectorMode::Exact))?);
        rows.push(time_mode("sparse_histogram", Some(SelectorMode::Histogram))?);
    }
    write_csv(&out.join(BENCH_FILE), &rows)?;
    let meta = BenchMeta {
        seed: config.seed,
        os: std::env::consts::OS.to_string(),
        arch: std::env::consts::ARCH.to_string(),
        cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
        unix_time: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        lengths: b.lengths.clone(),
        iterations: b.iterations,
        warmup: b.warmup,
        positions: b.positions,
        p: config.geometry.top_p,
        projector: "content".into(),
    };
    let path = out.join(BENCH_META_FILE);
    let text = toml::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    for r in &rows {
        println!(
            "bench: length {} {:<16} median {:>10.1} us  p95 {:>10.1} us  tokens {:.0}",
            r.length, r.mode, r.median_us, r.p95_us, r.mean_tokens
        );
    }
    Ok(())
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Core(Error::Format(format!("{}: {e}", path.display()))))
}

pub fn report(config: &RunConfig, out: &Path) -> CmdResult {
    if !out.is_dir() {
        return Err(CliError::Usage(format!("output directory {} does not exist", out.display())));
    }
    let mut found = 0;
    let mut line = |s: String| {
        found += 1;
        println!("{s}");
    };
    let g = &config.geometry;
    let p = out.join(PARTITION_FILE);
    if p.is_file() {
        let part = load_partition(&p, g)?;
        line(format!("{PARTITION_FILE}: {} retrieval / {} local heads", part.retrieval_set.len(), part.local_set.len()));
    }
    let p = out.join(HEAD_SCORES_FILE);
    if p.is_file() {
        let rows: Vec<headsparse::calibration::PartitionEntry> = read_csv(&p)?;
        line(format!("{HEAD_SCORES_FILE}: {} heads", rows.len()));
    }
    let dir = out.join(PROJECTOR_DIR);
    if dir.is_dir() {
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| io_err(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        paths.sort();
        for path in paths {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            if name.starts_with("proj_") && name.ends_with(".toml") {
                let (layer, head, proj) = load_projector(&path)?;
                line(format!("{PROJECTOR_DIR}/{name}: L{layer}H{head} r={} d={}", proj.r, proj.d));
            } else if name.starts_with("loss_") && name.ends_with(".csv") {
                let rows: Vec<LossRow> = read_csv(&path)?;
                line(format!("{PROJECTOR_DIR}/{name}: {} steps, final loss {}", rows.len(), fmt_opt(rows.last().map(|r| r.loss))));
            }
        }
    }
    let p = out.join(DECODE_TRACE_FILE);
    if p.is_file() {
        let rows: Vec<DecodeTraceRow> = read_csv(&p)?;
        line(format!("{DECODE_TRACE_FILE}: {} entries", rows.len()));
    }
    let p = out.join(SPARSITY_FILE);
    if p.is_file() {
        let r: SparsityReport = parse_toml(&p)?;
        line(format!(
            "{SPARSITY_FILE}: compute {:.4}, memory {:.4}, {} decode steps",
            r.compute_sparsity, r.memory_sparsity, r.decode_steps
        ));
    }
    let p = out.join(HEAD_SUMMARY_FILE);
    if p.is_file() {
        let rows: Vec<HeadSummary> = read_csv(&p)?;
        line(format!("{HEAD_SUMMARY_FILE}: {} heads", rows.len()));
    }
    let p = out.join(MASS_SWEEP_FILE);
    if p.is_file() {
        let rows: Vec<BudgetPoint> = read_csv(&p)?;
        for r in &rows {
            line(format!(
                "{MASS_SWEEP_FILE}: {} {} -> {:.1} tokens, mass {:.4}",
                r.method, r.budget, r.mean_tokens, r.mean_mass
            ));
        }
    }
    let dir = out.join(DISTILL_DIR);
    let p = dir.join(format!("{TEACHER_STEM}.toml"));
    if p.is_file() {
        let cache = load_teacher_cache(&p)?;
        line(format!("{DISTILL_DIR}/{TEACHER_STEM}.toml: {} positions, vocab {}", cache.len(), cache.vocab));
    }
    let p = dir.join(DISTILL_LOSS_FILE);
    if p.is_file() {
        let rows: Vec<LossRow> = read_csv(&p)?;
        line(format!("{DISTILL_DIR}/{DISTILL_LOSS_FILE}: {} steps", rows.len()));
    }
    let p = dir.join(DISTILL_SUMMARY_FILE);
    if p.is_file() {
        let s: DistillSummary = parse_toml(&p)?;
        line(format!(
            "{DISTILL_DIR}/{DISTILL_SUMMARY_FILE}: loss {:.5} -> {:.5}",
            s.initial_loss, s.final_loss
        ));
    }
    let p = out.join(BENCH_FILE);
    if p.is_file() {
        let rows: Vec<BenchRow> = read_csv(&p)?;
        for r in &rows {
            line(format!("{BENCH_FILE}: length {} {} median {:.1} us", r.length, r.mode, r.median_us));
        }
    }
    let p = out.join(BENCH_META_FILE);
    if p.is_file() {
        let m: BenchMeta = parse_toml(&p)?;
        line(format!("{BENCH_META_FILE}: {} {} with {} cpus, seed {}", m.os, m.arch, m.cpus, m.seed));
    }
    if found == 0 {
        return Err(CliError::Usage(format!("no artifacts found in {}", out.display())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(compute: f64, memory: f64, min_mass: Option<f64>) -> SparsityReport {
        SparsityReport {
            compute_sparsity: compute,
            memory_sparsity: memory,
            per_head_active: vec![],
            decode_steps: 1,
            min_projected_mass: min_mass,
            mean_true_mass_retrieval: None,
        }
    }

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::Invariant("x".into()).exit_code(), 3);
        assert_eq!(CliError::Core(Error::Argument("x".into())).exit_code(), 2);
        assert_eq!(CliError::Core(Error::Format("x".into())).exit_code(), 2);
        assert_eq!(CliError::Core(Error::Numeric("x".into())).exit_code(), 3);
        assert_eq!(CliError::Core(Error::Internal("x".into())).exit_code(), 3);
    }

    #[test]
    fn invariant_checks() {
        assert!(check_run_invariants(&report(0.9, 0.8, Some(0.95)), 0.9).is_ok());
        assert!(check_run_invariants(&report(0.5, 0.5, None), 0.9).is_ok());
        let e = check_run_invariants(&report(0.7, 0.8, Some(0.95)), 0.9).unwrap_err();
        assert_eq!(e.exit_code(), 3);
        let e = check_run_invariants(&report(0.9, 0.8, Some(0.85)), 0.9).unwrap_err();
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn percentiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        assert_eq!(percentile(&v, 0.5), 5.0);
        assert_eq!(percentile(&v, 0.95), 10.0);
        assert_eq!(percentile(&[3.0], 0.95), 3.0);
    }
}
