//! `lorkd`: stage-by-stage driver for decomposition runs on synthetic tasks.
//!
//! Exit codes: 0 success, 1 usage, 2 validation or I/O failure, 3 numeric
//! failure (non-finite values during training).

use clap::{Parser, Subcommand};
use lorkd::eks::{cost_estimate, eks_forward, naive_forward, CostEstimate, EksConvLayer, TaskIndexMatrix};
use lorkd::io::config::sha256_hex;
use lorkd::io::{
    load_config, load_fused_cls, load_fused_seg, load_student_cls, load_student_seg,
    load_teacher_cls, load_teacher_seg, read_json, read_kind, save_fused_cls, save_fused_seg,
    save_student_cls, save_student_seg, save_teacher_cls, save_teacher_seg, write_json,
    CheckpointKind, ConfigFile, Provenance, ResolvedConfig, RunReport,
};
use lorkd::lowrank::RankPlan;
use lorkd::network::{build_student_cls, build_student_seg, build_teacher_cls, build_teacher_seg};
use lorkd::pipeline::{
    cka_matrix, cls_batch, evaluate_cls, evaluate_fused_cls, evaluate_fused_seg, evaluate_seg,
    evaluate_teacher_cls, evaluate_teacher_seg, gen_synthetic_cls, gen_synthetic_seg,
    plan_from_log, run_decomposition_cls, run_decomposition_seg, run_warmup_cls, run_warmup_seg,
    seg_batch, task_features_cls, task_features_seg, train_teacher_cls, train_teacher_seg,
    MetricsReport, Mode, Timing, WarmupLog,
};
use lorkd::rng::{derive_seed, randn_tensor, rng_from};
use lorkd::tensor::{counters, ConvGeometry};
use lorkd::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "lorkd", version, about = "Low-rank knowledge decomposition on synthetic multi-task data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a plain multi-head teacher on the configured tasks.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the shared backbone with experts frozen; log per-task losses.
    Warmup {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Allocate per-task expert ranks from a warmup loss log.
    PlanRanks {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        base_rank: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full decomposition: warmup (or resume from one), joint training, evaluation.
    Decompose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Resume from a backbone warmed by the `warmup` subcommand.
        #[arg(long, requires = "ranks")]
        warmup: Option<PathBuf>,
        /// Apply a rank plan produced by `plan-ranks` instead of replanning.
        #[arg(long, requires = "warmup")]
        ranks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Merge one task's expert into the backbone as a standalone model.
    Fuse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate any checkpoint on the configured tasks.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Cost model and wall-clock comparison of single-pass vs per-task convolution.
    Bench {
        #[arg(long)]
        tasks: u64,
        #[arg(long)]
        batch: u64,
        #[arg(long)]
        rank: u64,
        #[arg(long)]
        dim: u64,
        /// Sequence length (spatial positions) in the cost model.
        #[arg(long, default_value_t = 16)]
        seq: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Cross-task CKA matrix of a decomposed model's penultimate features.
    Cka {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version requests are success, everything else is usage
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainTeacher { config, out } => train_teacher(&config, &out),
        Command::Warmup { config, out, log } => warmup(&config, &out, &log),
        Command::PlanRanks { log, base_rank, out } => plan_ranks_cmd(&log, base_rank, &out),
        Command::Decompose { config, teacher, warmup, ranks, out, report } => {
            decompose(&config, &teacher, warmup.as_deref(), ranks.as_deref(), &out, &report)
        }
        Command::Fuse { model, task, out } => fuse(&model, task, &out),
        Command::Eval { model, config, report } => eval(&model, &config, &report),
        Command::Bench { tasks, batch, rank, dim, seq, report } => bench(tasks, batch, rank, dim, seq, &report),
        Command::Cka { model, config, out } => cka(&model, &config, &out),
    }
}

/// Sample-count seeds: train and eval draws must never overlap, so they hang
/// off distinct derived streams of the run seed.
fn data_seeds(seed: u64) -> (u64, u64) {
    (derive_seed(seed, 10, 0), derive_seed(seed, 10, 1))
}

fn resolve(path: &Path) -> Result<(ConfigFile, ResolvedConfig)> {
    let file = load_config(path)?;
    let resolved = file.resolve()?;
    Ok((file, resolved))
}

fn print_scores(label: &str, scores: &[f64]) {
    print_keyed(label, &keyed(scores));
}

fn print_keyed(label: &str, per_task: &BTreeMap<String, f64>) {
    let macro_avg = per_task.values().sum::<f64>() / per_task.len() as f64;
    let per: Vec<String> = per_task.iter().map(|(k, s)| format!("{k} {s:.4}")).collect();
    println!("{label}: macro {macro_avg:.4} ({})", per.join(", "));
}

fn train_teacher(config: &Path, out: &Path) -> Result<()> {
    let (_, r) = resolve(config)?;
    let (train_seed, eval_seed) = data_seeds(r.train.seed);
    let counts = r.label_counts();
    match r.train.mode {
        Mode::Cls => {
            let train = gen_synthetic_cls(&r.tasks, train_seed, r.train_samples)?;
            let eval = gen_synthetic_cls(&r.tasks, eval_seed, r.eval_samples)?;
            let mut teacher = build_teacher_cls::<f32>(&counts, r.teacher_width, r.train.seed)?;
            train_teacher_cls(&r.train, &mut teacher, &train)?;
            print_scores("teacher accuracy", &evaluate_teacher_cls(&teacher, &eval, r.train.batch_size)?);
            save_teacher_cls(&teacher, out)?;
        }
        Mode::Seg => {
            let train = gen_synthetic_seg(&r.tasks, train_seed, r.train_samples)?;
            let eval = gen_synthetic_seg(&r.tasks, eval_seed, r.eval_samples)?;
            let mut teacher = build_teacher_seg::<f32>(&counts, r.teacher_width, r.train.seed)?;
            train_teacher_seg(&r.train, &mut teacher, &train)?;
            print_scores("teacher dsc", &evaluate_teacher_seg(&teacher, &eval, r.train.batch_size)?);
            save_teacher_seg(&teacher, out)?;
        }
    }
    println!("wrote teacher checkpoint to {}", out.display());
    Ok(())
}

fn warmup(config: &Path, out: &Path, log_path: &Path) -> Result<()> {
    let (_, r) = resolve(config)?;
    let (train_seed, _) = data_seeds(r.train.seed);
    let counts = r.label_counts();
    let log = match r.train.mode {
        Mode::Cls => {
            let train = gen_synthetic_cls(&r.tasks, train_seed, r.train_samples)?;
            let mut net = build_student_cls::<f32>(counts.len(), &counts, r.width, r.train.base_rank, r.train.seed)?;
            let log = run_warmup_cls(&r.train, &mut net, &train)?;
            save_student_cls(&net, out)?;
            log
        }
        Mode::Seg => {
            let train = gen_synthetic_seg(&r.tasks, train_seed, r.train_samples)?;
            let mut net = build_student_seg::<f32>(counts.len(), &counts, r.width, r.train.base_rank, r.train.seed)?;
            let log = run_warmup_seg(&r.train, &mut net, &train)?;
            save_student_seg(&net, out)?;
            log
        }
    };
    write_json(log_path, &log)?;
    println!(
        "warmup done: {} steps over {} tasks, checkpoint {}, log {}",
        r.train.warmup_steps,
        counts.len(),
        out.display(),
        log_path.display()
    );
    Ok(())
}

fn plan_ranks_cmd(log_path: &Path, base_rank: usize, out: &Path) -> Result<()> {
    let log: WarmupLog = read_json(log_path)?;
    let task_count = log
        .task_losses
        .iter()
        .map(|&(_, task, _)| task + 1)
        .max()
        .ok_or_else(|| Error::invalid("plan_ranks", "warmup log holds no records".to_string()))?;
    let plan = plan_from_log(&log, task_count, base_rank)?;
    write_json(out, &plan)?;
    println!("{}", serde_json::to_string(&plan)?);
    Ok(())
}

fn decompose(
    config: &Path,
    teacher_path: &Path,
    warmup_ckpt: Option<&Path>,
    ranks_path: Option<&Path>,
    out: &Path,
    report_path: &Path,
) -> Result<()> {
    let (file, r) = resolve(config)?;
    let (train_seed, eval_seed) = data_seeds(r.train.seed);
    let counts = r.label_counts();
    let plan: Option<RankPlan> = match ranks_path {
        Some(p) => Some(read_json(p)?),
        None => None,
    };
    let (metrics, rank_plan) = match r.train.mode {
        Mode::Cls => {
            let train = gen_synthetic_cls(&r.tasks, train_seed, r.train_samples)?;
            let eval = gen_synthetic_cls(&r.tasks, eval_seed, r.eval_samples)?;
            let teacher = load_teacher_cls(teacher_path)?;
            let mut net = match warmup_ckpt {
                Some(p) => load_student_cls(p)?,
                None => build_student_cls(counts.len(), &counts, r.width, r.train.base_rank, r.train.seed)?,
            };
            let outcome =
                run_decomposition_cls(&r.train, &mut net, Some(&teacher), plan.as_ref(), &train, &eval)?;
            save_student_cls(&net, out)?;
            (outcome.report, outcome.rank_plan)
        }
        Mode::Seg => {
            let train = gen_synthetic_seg(&r.tasks, train_seed, r.train_samples)?;
            let eval = gen_synthetic_seg(&r.tasks, eval_seed, r.eval_samples)?;
            let teacher = load_teacher_seg(teacher_path)?;
            let mut net = match warmup_ckpt {
                Some(p) => load_student_seg(p)?,
                None => build_student_seg(counts.len(), &counts, r.width, r.train.base_rank, r.train.seed)?,
            };
            let outcome =
                run_decomposition_seg(&r.train, &mut net, Some(&teacher), plan.as_ref(), &train, &eval)?;
            save_student_seg(&net, out)?;
            (outcome.report, outcome.rank_plan)
        }
    };
    print_keyed("decomposed", &metrics.per_task);
    let report = RunReport {
        provenance: Provenance::new(file.hash(), r.train.seed),
        config: file,
        rank_plan,
        metrics,
    };
    write_json(report_path, &report)?;
    println!("wrote model {} and report {}", out.display(), report_path.display());
    Ok(())
}

fn fuse(model: &Path, task: usize, out: &Path) -> Result<()> {
    match read_kind(model)? {
        CheckpointKind::DecomposedCls => {
            let net = load_student_cls(model)?;
            let fused = net.extract_expert(task)?;
            save_fused_cls(&fused, out)?;
            println!("fused task {task}: {} parameters -> {}", fused.param_count(), out.display());
        }
        CheckpointKind::DecomposedSeg => {
            let net = load_student_seg(model)?;
            let fused = net.extract_expert(task)?;
            save_fused_seg(&fused, out)?;
            println!("fused task {task}: {} parameters -> {}", fused.param_count(), out.display());
        }
        kind => {
            return Err(Error::invalid("fuse", format!("checkpoint is {kind}, only decomposed models fuse")));
        }
    }
    Ok(())
}

/// Metrics for a net evaluated outside a training run: scores plus parameter
/// counts, with only eval timing populated.
fn eval_metrics(
    per_task: BTreeMap<String, f64>,
    params_train: usize,
    params_fused_per_task: Vec<usize>,
    started: Instant,
) -> MetricsReport {
    let macro_avg = per_task.values().sum::<f64>() / per_task.len() as f64;
    MetricsReport {
        macro_avg,
        per_task,
        params_train,
        params_fused: params_fused_per_task.iter().sum(),
        params_fused_per_task,
        counters: counters::snapshot(),
        timing: Timing { warmup_seconds: 0.0, joint_seconds: 0.0, eval_seconds: started.elapsed().as_secs_f64() },
    }
}

fn keyed(scores: &[f64]) -> BTreeMap<String, f64> {
    scores.iter().enumerate().map(|(t, s)| (format!("task{t}"), *s)).collect()
}

fn eval(model: &Path, config: &Path, report_path: &Path) -> Result<()> {
    let (file, r) = resolve(config)?;
    let (_, eval_seed) = data_seeds(r.train.seed);
    let batch = r.train.batch_size;
    counters::reset();
    let started = Instant::now();
    let kind = read_kind(model)?;
    let metrics = match (kind, r.train.mode) {
        (CheckpointKind::DecomposedCls, Mode::Cls) => {
            let net = load_student_cls(model)?;
            let data = gen_synthetic_cls(&r.tasks, eval_seed, r.eval_samples)?;
            let scores = evaluate_cls(&net, &data, batch)?;
            let fused: Vec<usize> = (0..net.task_count())
                .map(|t| net.extract_expert(t).map(|f| f.param_count()))
                .collect::<Result<_>>()?;
            eval_metrics(keyed(&scores), net.param_count(), fused, started)
        }
        (CheckpointKind::DecomposedSeg, Mode::Seg) => {
            let net = load_student_seg(model)?;
            let data = gen_synthetic_seg(&r.tasks, eval_seed, r.eval_samples)?;
            let scores = evaluate_seg(&net, &data, batch)?;
            let fused: Vec<usize> = (0..net.task_count())
                .map(|t| net.extract_expert(t).map(|f| f.param_count()))
                .collect::<Result<_>>()?;
            eval_metrics(keyed(&scores), net.param_count(), fused, started)
        }
        (CheckpointKind::TeacherCls, Mode::Cls) => {
            let net = load_teacher_cls(model)?;
            let data = gen_synthetic_cls(&r.tasks, eval_seed, r.eval_samples)?;
            let scores = evaluate_teacher_cls(&net, &data, batch)?;
            eval_metrics(keyed(&scores), net.param_count(), vec![], started)
        }
        (CheckpointKind::TeacherSeg, Mode::Seg) => {
            let net = load_teacher_seg(model)?;
            let data = gen_synthetic_seg(&r.tasks, eval_seed, r.eval_samples)?;
            let scores = evaluate_teacher_seg(&net, &data, batch)?;
            eval_metrics(keyed(&scores), net.param_count(), vec![], started)
        }
        (CheckpointKind::FusedCls, Mode::Cls) => {
            let net = load_fused_cls(model)?;
            let data = gen_synthetic_cls(&r.tasks, eval_seed, r.eval_samples)?;
            let score = evaluate_fused_cls(&net, &data, batch)?;
            let mut per_task = BTreeMap::new();
            per_task.insert(format!("task{}", net.task_id()), score);
            eval_metrics(per_task, net.param_count(), vec![net.param_count()], started)
        }
        (CheckpointKind::FusedSeg, Mode::Seg) => {
            let net = load_fused_seg(model)?;
            let data = gen_synthetic_seg(&r.tasks, eval_seed, r.eval_samples)?;
            let score = evaluate_fused_seg(&net, &data, batch)?;
            let mut per_task = BTreeMap::new();
            per_task.insert(format!("task{}", net.task_id()), score);
            eval_metrics(per_task, net.param_count(), vec![net.param_count()], started)
        }
        (kind, mode) => {
            return Err(Error::Config(format!("checkpoint kind {kind} does not evaluate under mode {mode:?}")));
        }
    };
    print_keyed("eval", &metrics.per_task);
    let report = RunReport {
        provenance: Provenance::new(file.hash(), r.train.seed),
        config: file,
        rank_plan: None,
        metrics,
    };
    write_json(report_path, &report)
}

#[derive(Debug, Serialize, Deserialize)]
struct WallClock {
    iterations: u32,
    eks_seconds: f64,
    naive_seconds: f64,
    speedup: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct BenchReport {
    provenance: Provenance,
    tasks: u64,
    batch: u64,
    seq: u64,
    dim: u64,
    rank: u64,
    cost: CostEstimate,
    wall: WallClock,
}

fn bench(tasks: u64, batch: u64, rank: u64, dim: u64, seq: u64, report_path: &Path) -> Result<()> {
    if tasks == 0 {
        return Err(Error::invalid("bench", "tasks must be positive".to_string()));
    }
    let cost = cost_estimate(tasks, batch, seq, dim, rank)?;

    // Wall clock on the same shapes the model counts: a 1x1 conv is a
    // dim x dim matmul applied at seq positions.
    let (t, b, d, l, r) = (tasks as usize, batch as usize, dim as usize, seq as usize, rank as usize);
    let geometry = ConvGeometry::simple(d, d, 1, 1, 0);
    let layer = EksConvLayer::<f32>::init(&geometry, t, &vec![r; t], 0, true)?;
    let input: Tensor<f32> = randn_tensor(&[b, d, l, 1], 0.0, 1.0, &mut rng_from(0))?;
    let task_ids: Vec<usize> = (0..b).map(|i| i % t).collect();
    let m = TaskIndexMatrix::from_tasks(&task_ids, t)?;

    // one unmeasured pass each to touch allocations and caches
    eks_forward(&layer, &input, &m)?;
    naive_forward(&layer, &input, &m)?;
    let iterations = 20u32;
    let start = Instant::now();
    for _ in 0..iterations {
        eks_forward(&layer, &input, &m)?;
    }
    let eks_seconds = start.elapsed().as_secs_f64();
    let start = Instant::now();
    for _ in 0..iterations {
        naive_forward(&layer, &input, &m)?;
    }
    let naive_seconds = start.elapsed().as_secs_f64();

    let args_hash = sha256_hex(&serde_json::to_vec(&(tasks, batch, seq, dim, rank))?);
    let report = BenchReport {
        provenance: Provenance::new(args_hash, 0),
        tasks,
        batch,
        seq,
        dim,
        rank,
        cost,
        wall: WallClock { iterations, eks_seconds, naive_seconds, speedup: naive_seconds / eks_seconds },
    };
    println!(
        "eks {} flops vs broadcast {} flops, eks_cheaper={}; wall-clock speedup {:.2}x over {} iterations",
        report.cost.eks_flops, report.cost.flora_flops, report.cost.eks_cheaper, report.wall.speedup, iterations
    );
    write_json(report_path, &report)
}

#[derive(Debug, Serialize, Deserialize)]
struct CkaReport {
    provenance: Provenance,
    task_count: usize,
    /// Row-major T x T matrix, unit diagonal.
    matrix: Vec<Vec<f64>>,
    mean_off_diagonal: f64,
}

fn cka(model: &Path, config: &Path, out: &Path) -> Result<()> {
    let (file, r) = resolve(config)?;
    let (_, eval_seed) = data_seeds(r.train.seed);
    let t_count = r.tasks.len();
    let features: Vec<Tensor<f32>> = match (read_kind(model)?, r.train.mode) {
        (CheckpointKind::DecomposedCls, Mode::Cls) => {
            let net = load_student_cls(model)?;
            let data = gen_synthetic_cls(&r.tasks, eval_seed, r.eval_samples)?;
            let (images, _, _) = cls_batch(&data, t_count, 0, data.len())?;
            (0..t_count).map(|t| task_features_cls(&net, &images, t)).collect::<Result<_>>()?
        }
        (CheckpointKind::DecomposedSeg, Mode::Seg) => {
            let net = load_student_seg(model)?;
            let data = gen_synthetic_seg(&r.tasks, eval_seed, r.eval_samples)?;
            let (images, _, _) = seg_batch(&data, t_count, 0, data.len())?;
            (0..t_count).map(|t| task_features_seg(&net, &images, t)).collect::<Result<_>>()?
        }
        (kind, mode) => {
            return Err(Error::Config(format!("cka needs a decomposed model for mode {mode:?}, checkpoint is {kind}")));
        }
    };
    let matrix = cka_matrix(&features)?;
    let mut rows = vec![vec![0.0f64; t_count]; t_count];
    let mut off_sum = 0.0;
    for (i, row) in rows.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = matrix.at(&[i, j]);
            if i != j {
                off_sum += *cell;
            }
        }
    }
    let off_n = t_count * t_count - t_count;
    let mean_off_diagonal = if off_n == 0 { 0.0 } else { off_sum / off_n as f64 };
    let report = CkaReport {
        provenance: Provenance::new(file.hash(), r.train.seed),
        task_count: t_count,
        matrix: rows,
        mean_off_diagonal,
    };
    println!("cka mean off-diagonal {mean_off_diagonal:.4} over {t_count} tasks");
    write_json(out, &report)
}
