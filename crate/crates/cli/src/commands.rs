use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use protoflow::episodes::{
    load_embeddings, save_csv, save_pfeb, EmbeddingDataset, EpisodeConfig, EpisodeMode, SynthConfig,
};
use protoflow::gradflow::{flow_complexity_probe, FlowKind, ProbeConfig};
use protoflow::metatrain::{
    evaluate, evaluate_baseline, gradient_bias, meta_train, prototype_bias, train_e2_surrogate, Checkpoint,
    EvalConfig, EvalReport, Model, SurrogateConfig,
};
use protoflow::nd::Tensor;
use protoflow::solvers::{empirical_order, global_error, SolverKind, TestOde};
use protoflow::Error;

use crate::config::{load_run_config, RunConfig};
use crate::report::{num, Table};
use crate::{
    BenchRuntimeArgs, BenchSolversArgs, Cli, CliError, CliResult, Command, EvalArgs, ModeArg, Part,
    SynthArgs, TrainArgs,
};

pub fn run(cli: Cli) -> CliResult {
    let seed = cli.seed;
    match cli.command {
        Command::Synth(a) => synth(a, seed.unwrap_or(0)),
        Command::Convert { input, output } => convert(&input, &output),
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&RunConfig::default()).expect("serializable"));
            Ok(())
        }
        Command::Train(a) => train(a, seed),
        Command::Eval(a) => eval(a, seed.unwrap_or(0)),
        Command::ProtoBias(a) => bias(a, seed.unwrap_or(0), false),
        Command::GradBias(a) => bias(a, seed.unwrap_or(0), true),
        Command::BenchSolvers(a) => bench_solvers(a, seed.unwrap_or(0)),
        Command::BenchRuntime(a) => bench_runtime(a, seed.unwrap_or(0)),
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn save_dataset(dataset: &EmbeddingDataset, path: &Path) -> CliResult {
    if is_csv(path) {
        save_csv(dataset, path)?;
    } else {
        save_pfeb(dataset, path)?;
    }
    Ok(())
}

fn synth(a: SynthArgs, seed: u64) -> CliResult {
    if a.per_class == 0 || a.classes == 0 {
        return Err(CliError::usage("--classes and --per-class must be positive"));
    }
    let cfg = SynthConfig {
        num_classes: a.classes,
        dim: a.dim,
        samples_per_class: a.per_class,
        center_scale: a.center_scale,
        noise_sigma: a.noise,
        seed,
    };
    let data = cfg.generate()?;
    save_dataset(&data, &a.output)?;
    println!(
        "wrote {}: {} classes, dim {}, {} samples",
        a.output.display(),
        data.num_classes(),
        data.dim(),
        data.len()
    );
    Ok(())
}

fn convert(input: &Path, output: &Path) -> CliResult {
    let data = load_embeddings(input)?;
    save_dataset(&data, output)?;
    println!("wrote {}: {} samples", output.display(), data.len());
    Ok(())
}

fn split_counts(split: &[usize]) -> CliResult<[usize; 3]> {
    <[usize; 3]>::try_from(split).map_err(|_| CliError::usage("--split takes three class counts"))
}

fn load_part(path: &Path, split: [usize; 3], part: Part) -> CliResult<EmbeddingDataset> {
    let data = load_embeddings(path)?;
    if let Part::All = part {
        return Ok(data);
    }
    let [train, val, test] = data.split_by_classes(split[0], split[1], split[2])?;
    Ok(match part {
        Part::Train => train,
        Part::Val => val,
        _ => test,
    })
}

fn train(a: TrainArgs, seed: Option<u64>) -> CliResult {
    let cfg = load_run_config(a.config.as_deref(), &a.overrides, seed)?;
    let data_path = cfg.data.as_ref().ok_or_else(|| CliError::usage("config has no `data` path"))?;
    let data = load_embeddings(data_path)?;
    let [train, val, _] = data.split_by_classes(cfg.split[0], cfg.split[1], cfg.split[2])?;
    let model = Model::new(&cfg.model, cfg.episode.n_way, data.dim(), cfg.seed)?;

    let mut jsonl = BufWriter::new(File::create(&cfg.metrics)?);
    let mut table = Table::new(&["epoch", "train_loss", "val_acc", "lr"]);
    let mut io_error = None;
    let outcome = meta_train(&train, &val, &cfg.episode, &cfg.meta, model, |m| {
        println!("epoch {:>3}  loss {:.5}  val {:.4}  lr {:e}", m.epoch, m.train_loss, m.val_acc, m.lr);
        if let Err(e) = writeln!(jsonl, "{}", m.to_json_line()) {
            io_error.get_or_insert(e);
        }
        table.push(vec![m.epoch.to_string(), num(m.train_loss), num(m.val_acc), num(m.lr)]);
    });
    jsonl.flush()?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    table.write_csv(&cfg.metrics.with_extension("csv"))?;
    match outcome {
        Ok(out) => {
            out.best.save(&cfg.output)?;
            println!(
                "best epoch {} (val {:.4}) written to {}",
                out.best.epoch,
                out.best.val_accuracy,
                cfg.output.display()
            );
            Ok(())
        }
        Err(Error::Diverged { epoch, episode, last_good }) => {
            last_good.save(&cfg.output)?;
            Err(CliError {
                code: 3,
                message: format!(
                    "training diverged at epoch {epoch}, episode {episode}; last good checkpoint (epoch {}) written to {}",
                    last_good.epoch,
                    cfg.output.display()
                ),
            })
        }
        Err(e) => Err(e.into()),
    }
}

fn eval_setup(a: &EvalArgs, seed: u64, default_episodes: usize) -> CliResult<(Checkpoint, EmbeddingDataset, EvalConfig)> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = load_part(&a.data.data, split_counts(&a.data.split)?, a.data.part)?;
    let mode = match a.mode {
        Some(ModeArg::Transductive) => EpisodeMode::Transductive,
        Some(ModeArg::Inductive) => EpisodeMode::Inductive,
        None => ckpt.mode,
    };
    let episode = EpisodeConfig {
        n_way: ckpt.model.n_way,
        k_shot: a.k_shot,
        queries_per_class: a.queries,
        episodes_per_epoch: 1,
        seed,
    };
    episode.validate()?;
    ckpt.model.check_compatible(episode.n_way, data.dim())?;
    Ok((ckpt, data, EvalConfig::new(episode, mode, a.episodes.unwrap_or(default_episodes), seed)))
}

fn report_row(name: &str, r: &EvalReport) -> Vec<String> {
    vec![name.to_string(), num(r.mean_accuracy), num(r.ci95), r.episodes.to_string()]
}

fn eval(a: EvalArgs, seed: u64) -> CliResult {
    let (ckpt, data, cfg) = eval_setup(&a, seed, 600)?;
    let model = evaluate(&data, &ckpt.model, &cfg)?;
    let base = evaluate_baseline(&data, &cfg)?;
    let mut t = Table::new(&["name", "mean_accuracy", "ci95", "episodes"]);
    t.push(report_row("model", &model));
    t.push(report_row("baseline", &base));
    t.emit(a.csv.as_deref())
}

fn bias(a: EvalArgs, seed: u64, gradient: bool) -> CliResult {
    let (ckpt, data, cfg) = eval_setup(&a, seed, 1000)?;
    let (r, first, second) = if gradient {
        (gradient_bias(&data, &ckpt.model, &cfg)?, "support_mean_gradient", "inferred_gradient")
    } else {
        (prototype_bias(&data, &ckpt.model, &cfg)?, "initial_prototypes", "final_prototypes")
    };
    let mut t = Table::new(&["estimate", "cosine_similarity", "episodes"]);
    t.push(vec![first.into(), num(r.initial), r.episodes.to_string()]);
    t.push(vec![second.into(), num(r.model), r.episodes.to_string()]);
    t.emit(a.csv.as_deref())
}

fn bench_solvers(a: BenchSolversArgs, seed: u64) -> CliResult {
    if a.steps.len() < 3 {
        return Err(CliError::usage("--steps needs at least three counts"));
    }
    let ode = TestOde::Decay { rate: 1.0 };
    let p0 = Tensor::new(vec![2, 3], vec![1.0, -0.5, 2.0, 0.25, -1.5, 3.0])?;
    let mut t = Table::new(&["solver", "steps", "h", "global_error", "order"]);
    for kind in [SolverKind::Euler, SolverKind::Rk4] {
        let report = empirical_order(kind, ode, &p0, a.integral_time, &a.steps, None)?;
        for p in &report.points {
            t.push(vec![kind_name(kind).into(), p.steps.to_string(), num(p.h), num(p.error), num(report.order)]);
        }
    }
    // η is trained for one step count, so it gets a single row rather than an order.
    let steps = a.steps[0];
    let surrogate = train_e2_surrogate(&SurrogateConfig { dim: p0.cols(), steps, integral_time: a.integral_time, seed, ..Default::default() })?;
    let err = global_error(SolverKind::E2, ode, &p0, a.integral_time, steps, Some(&surrogate.correction))?;
    t.push(vec!["e2".into(), steps.to_string(), num(a.integral_time / steps as f64), num(err), String::new()]);
    t.emit(a.csv.as_deref())?;

    if let (Some(ckpt_path), Some(data_path)) = (&a.checkpoint, &a.data) {
        let ckpt = Checkpoint::load(ckpt_path)?;
        let data = load_part(data_path, split_counts(&a.split)?, Part::Test)?;
        let episode = EpisodeConfig { n_way: ckpt.model.n_way, k_shot: 1, queries_per_class: 15, episodes_per_epoch: 1, seed };
        let cfg = EvalConfig::new(episode, ckpt.mode, a.episodes, seed);
        let mut acc = Table::new(&["name", "mean_accuracy", "ci95", "episodes"]);
        for kind in [SolverKind::Euler, SolverKind::Rk4, SolverKind::E2] {
            if kind == SolverKind::E2 && ckpt.model.correction.is_none() {
                continue;
            }
            let mut model = ckpt.model.clone();
            model.solver.kind = kind;
            acc.push(report_row(kind_name(kind), &evaluate(&data, &model, &cfg)?));
        }
        acc.push(report_row("baseline", &evaluate_baseline(&data, &cfg)?));
        println!();
        acc.emit(a.csv.as_ref().map(|p| p.with_extension("accuracy.csv")).as_deref())?;
    }
    Ok(())
}

fn kind_name(kind: SolverKind) -> &'static str {
    match kind {
        SolverKind::Euler => "euler",
        SolverKind::Rk4 => "rk4",
        SolverKind::E2 => "e2",
    }
}

fn bench_runtime(a: BenchRuntimeArgs, seed: u64) -> CliResult {
    let mut t = Table::new(&["flow", "n_way", "k_shot", "queries", "modules", "median_secs", "min_secs", "max_secs"]);
    for name in &a.flows {
        let kind: FlowKind = name.parse().map_err(|_| CliError::usage(format!("unknown flow `{name}`")))?;
        for &s in &a.scales {
            let cfg = ProbeConfig {
                kind,
                n_way: a.n_way,
                k_shot: a.k_shot * s,
                queries_per_class: a.queries * s,
                dim: a.dim,
                modules: a.modules,
                repeats: a.repeats,
                seed,
            };
            let stats = flow_complexity_probe(&cfg)?;
            t.push(vec![
                kind.to_string(),
                cfg.n_way.to_string(),
                cfg.k_shot.to_string(),
                cfg.queries_per_class.to_string(),
                cfg.modules.to_string(),
                num(stats.median_secs),
                num(stats.min_secs),
                num(stats.max_secs),
            ]);
        }
    }
    t.emit(a.csv.as_deref())
}
