use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use rlprune::data::{generate_shapes, ShapesSpec, Splits};
use rlprune::dependency::{Analysis, TraceReport};
use rlprune::distill::fit;
use rlprune::format;
use rlprune::metrics::{accuracy, Costs};
use rlprune::pruner::{allocate_prune_counts, channel_sparsity, prune_by_scores, taylor_scores};
use rlprune::search::{calibration_set, read_history, run_pruning_search, write_history, SearchConfig, Strategy};
use rlprune::{zoo, Error, ModelGraph};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Cli, Command};

/// 2 configuration, 3 data or model input, 4 numeric failure, 1 anything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Config(_) => 2,
                Error::Numeric { .. } => 4,
                Error::Data(_)
                | Error::Io(_)
                | Error::Input(_)
                | Error::Parse { .. }
                | Error::BlobLength { .. }
                | Error::UnsupportedKind { .. }
                | Error::Version { .. }
                | Error::Validation { .. }
                | Error::Shape { .. }
                | Error::UnresolvedDependency { .. }
                | Error::Inconsistent(_) => 3,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("starting the worker pool")?;
    }
    let seed = cli.search.seed;
    match cli.command {
        Command::GenData {
            out,
            classes,
            train,
            reward_split,
            test,
        } => gen_data(&out, classes, train, reward_split, test, seed.unwrap_or(0)),
        Command::Train {
            arch,
            init,
            data,
            out,
            epochs,
            lr,
            batch_size,
        } => {
            let mut tc = cfg.train.clone();
            if let Some(e) = epochs {
                tc.epochs = e;
            }
            if let Some(l) = lr {
                tc.lr = l;
            }
            if let Some(b) = batch_size {
                tc.batch_size = b;
            }
            if let Some(s) = seed {
                tc.seed = s;
            }
            let data = need(data.or(cfg.paths.data.clone()), "--data")?;
            let out = need(out.or(cfg.paths.out.clone()), "--out")?;
            train(arch, init, &data, &out, &tc)
        }
        Command::Trace { model, json } => trace(&model, json),
        Command::Prune {
            model,
            data,
            out,
            uniform,
        } => {
            let mut search = cfg.search.clone();
            cli.search.apply(&mut search)?;
            if uniform {
                search.strategy = Strategy::Uniform;
            }
            let model = need(model.or(cfg.paths.model.clone()), "a model path")?;
            let data = need(data.or(cfg.paths.data.clone()), "--data")?;
            let out = out.or(cfg.paths.out.clone()).unwrap_or_else(|| PathBuf::from("."));
            prune(&model, &data, &out, &search, cli.threads)
        }
        Command::Sensitivity {
            model,
            data,
            fraction,
            pre_prune,
            out,
        } => sensitivity(&model, &data, fraction, pre_prune, out.as_deref(), seed.unwrap_or(0)),
        Command::Eval { model, data, base, out } => eval(&model, &data, base.as_deref(), out.as_deref()),
        Command::Report {
            history,
            out,
            scores,
            data,
        } => match (scores, history) {
            (Some(model), _) => dump_scores(&model, &need(data, "--data")?, &out, seed.unwrap_or(0)),
            (None, Some(h)) => report(&h, &out),
            (None, None) => Err(Error::Config("report needs a history file or --scores".into()).into()),
        },
    }
}

fn need(p: Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    p.ok_or_else(|| Error::Config(format!("missing {what}")).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn gen_data(out: &Path, classes: usize, train: usize, reward: usize, test: usize, seed: u64) -> anyhow::Result<()> {
    let spec = ShapesSpec {
        classes,
        train,
        reward,
        test,
        seed,
    };
    generate_shapes(&spec)?.write(out)?;
    println!("wrote {train}/{reward}/{test} samples of {classes} classes to {}", out.display());
    Ok(())
}

fn train(
    arch: Option<String>,
    init: Option<PathBuf>,
    data: &Path,
    out: &Path,
    tc: &rlprune::distill::TrainConfig,
) -> anyhow::Result<()> {
    let splits = Splits::read(data)?;
    let mut model = match (arch, init) {
        (_, Some(p)) => format::load(&p)?,
        (Some(a), None) => zoo::by_name(&a, splits.train.classes, tc.seed)?,
        (None, None) => return Err(Error::Config("train needs --arch or --init".into()).into()),
    };
    let started = Instant::now();
    fit(&mut model, None, &splits.train, tc, &mut |epoch, m, loss| {
        format::save(m, out)?;
        let acc = accuracy(m, &splits.test)?;
        log::info!(
            "epoch {epoch}: loss {loss:.4} test accuracy {acc:.4} ({:.1}s)",
            started.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    format::save(&model, out)?;
    println!("test_accuracy {:.4}", accuracy(&model, &splits.test)?);
    Ok(())
}

fn trace(path: &Path, json: bool) -> anyhow::Result<()> {
    let model = format::load(path)?;
    let analysis = Analysis::of(&model)?;
    let report = TraceReport::new(&model, &analysis);
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for line in report.lines() {
            println!("{line}");
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct Summary {
    model: String,
    strategy: Strategy,
    seed: u64,
    target_sparsity: f64,
    alpha: f64,
    beta: f64,
    accuracy_before: f64,
    accuracy_after: f64,
    flops_before: u64,
    flops_after: u64,
    params_before: u64,
    params_after: u64,
    c_f: f64,
    c_p: f64,
    channel_sparsity: f64,
    steps_run: usize,
    removed_channels: usize,
    shortfall: usize,
}

#[derive(Serialize)]
struct Timing {
    wall_seconds: f64,
    threads: usize,
}

fn prune(model_path: &Path, data: &Path, out: &Path, cfg: &SearchConfig, threads: Option<usize>) -> anyhow::Result<()> {
    let model = format::load(model_path)?;
    let splits = Splits::read(data)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let started = Instant::now();
    let acc_before = accuracy(&model, &splits.test)?;
    let outcome = match run_pruning_search(&model, &splits.train, &splits.reward, cfg) {
        Ok(o) => o,
        Err(aborted) => {
            let stem = out.join(format!("{}-partial", model.name));
            format::save(&aborted.model, &stem)?;
            write_history(&out.join("history.partial.csv"), &aborted.history)?;
            log::error!("partial results written to {}", out.display());
            return Err(anyhow!(aborted.error).context("pruning search aborted"));
        }
    };
    let pruned = &outcome.model;
    format::save(pruned, &out.join(format!("{}-pruned", model.name)))?;
    write_history(&out.join("history.csv"), &outcome.history)?;

    let before = Costs::of(&model)?;
    let after = Costs::of(pruned)?;
    let (c_f, c_p) = after.ratios(&before);
    let sparsity = channel_sparsity(&Analysis::of(&model)?, &Analysis::of(pruned)?);
    let summary = Summary {
        model: model.name.clone(),
        strategy: cfg.strategy,
        seed: cfg.seed,
        target_sparsity: cfg.target_sparsity,
        alpha: cfg.reward.alpha,
        beta: cfg.reward.beta,
        accuracy_before: acc_before,
        accuracy_after: accuracy(pruned, &splits.test)?,
        flops_before: before.flops,
        flops_after: after.flops,
        params_before: before.params,
        params_after: after.params,
        c_f,
        c_p,
        channel_sparsity: sparsity,
        steps_run: outcome.steps.len(),
        removed_channels: outcome.steps.iter().map(|s| s.removed).sum(),
        shortfall: outcome.steps.iter().map(|s| s.shortfall).sum(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    let wall = started.elapsed().as_secs_f64();
    write_json(
        &out.join("timing.json"),
        &Timing {
            wall_seconds: wall,
            threads: threads.unwrap_or_else(rayon::current_num_threads),
        },
    )?;
    println!(
        "accuracy {:.4} -> {:.4}  C_F {c_f:.4}  C_P {c_p:.4}  channel sparsity {sparsity:.4}  ({wall:.1}s)",
        summary.accuracy_before, summary.accuracy_after
    );
    Ok(())
}

#[derive(Serialize)]
struct SensitivityRow {
    group_id: usize,
    layers: String,
    channels: usize,
    pruned: usize,
    error: f64,
    error_delta: f64,
    status: &'static str,
}

/// Prune a uniform `fraction` of the searchable channels, by Taylor score.
fn uniform_prune(model: &ModelGraph, calib: &rlprune::pruner::CalibrationSet, fraction: f64) -> anyhow::Result<ModelGraph> {
    let analysis = Analysis::of(model)?;
    let ids = analysis.groups.searchable_ids();
    let live: Vec<usize> = ids.iter().map(|&g| analysis.groups.groups[g].channels).collect();
    let total: usize = live.iter().sum();
    let budget = (total as f64 * fraction).round() as usize;
    if budget == 0 {
        return Ok(model.clone());
    }
    let action: Vec<f64> = live.iter().map(|&c| c as f64 / total as f64).collect();
    let alloc = allocate_prune_counts(&action, budget, &live)?;
    let scores = taylor_scores(model, calib, &analysis)?;
    let counts: BTreeMap<usize, usize> = ids.into_iter().zip(alloc.counts).collect();
    Ok(prune_by_scores(model, &analysis, &scores, &counts)?)
}

fn sensitivity(path: &Path, data: &Path, fraction: f64, pre: f64, out: Option<&Path>, seed: u64) -> anyhow::Result<()> {
    if !(fraction > 0.0 && fraction < 1.0) || !(0.0..1.0).contains(&pre) {
        return Err(Error::Config(format!("need fraction in (0, 1) and pre-prune in [0, 1), got {fraction}, {pre}")).into());
    }
    let model = format::load(path)?;
    let splits = Splits::read(data)?;
    let calib = calibration_set(&splits.train, rlprune::pruner::CALIBRATION_SIZE, seed)?;
    let baseline = uniform_prune(&model, &calib, pre)?;
    let base_err = 1.0 - accuracy(&baseline, &splits.test)?;
    let analysis = Analysis::of(&baseline)?;
    let scores = taylor_scores(&baseline, &calib, &analysis)?;
    let mut rows = Vec::new();
    for g in analysis.groups.searchable() {
        let k = (fraction * g.channels as f64).ceil() as usize;
        let layers = g.members.iter().map(|&m| baseline.nodes[m].name.as_str()).collect::<Vec<_>>().join(" ");
        let mut row = SensitivityRow {
            group_id: g.id,
            layers,
            channels: g.channels,
            pruned: k,
            error: base_err,
            error_delta: 0.0,
            status: "ok",
        };
        if k + rlprune::pruner::MIN_CHANNELS > g.channels {
            row.status = "skipped";
        } else if k > 0 {
            let pruned = prune_by_scores(&baseline, &analysis, &scores, &[(g.id, k)].into())?;
            row.error = 1.0 - accuracy(&pruned, &splits.test)?;
            row.error_delta = row.error - base_err;
        }
        rows.push(row);
    }
    match out {
        Some(p) => write_csv(p, &rows)?,
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    accuracy: f64,
    flops: u64,
    params: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    c_f: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    c_p: Option<f64>,
}

fn eval(path: &Path, data: &Path, base: Option<&Path>, out: Option<&Path>) -> anyhow::Result<()> {
    let model = format::load(path)?;
    let splits = Splits::read(data)?;
    let costs = Costs::of(&model)?;
    let mut r = EvalReport {
        accuracy: accuracy(&model, &splits.test)?,
        flops: costs.flops,
        params: costs.params,
        c_f: None,
        c_p: None,
    };
    println!("accuracy {:.4}", r.accuracy);
    println!("flops {}", r.flops);
    println!("params {}", r.params);
    if let Some(b) = base {
        let (c_f, c_p) = costs.ratios(&Costs::of(&format::load(b)?)?);
        println!("c_f {c_f:.6}");
        println!("c_p {c_p:.6}");
        r.c_f = Some(c_f);
        r.c_p = Some(c_p);
    }
    if let Some(o) = out {
        write_json(o, &r)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SparsityPoint {
    step: usize,
    group_id: usize,
    group_sparsity: f64,
}

#[derive(Serialize)]
struct RewardPoint {
    step: usize,
    epsilon: f64,
    best_q: f64,
    reward: f64,
    accuracy: f64,
    flops_ratio: f64,
    params_ratio: f64,
}

fn report(history: &Path, out: &Path) -> anyhow::Result<()> {
    let rows = read_history(history)?;
    fs::create_dir_all(out)?;
    let mut series: Vec<SparsityPoint> = rows
        .iter()
        .map(|r| SparsityPoint {
            step: r.step,
            group_id: r.group_id,
            group_sparsity: r.group_sparsity,
        })
        .collect();
    series.sort_by_key(|p| (p.group_id, p.step));
    write_csv(&out.join("sparsity.csv"), &series)?;
    let mut per_step: BTreeMap<usize, RewardPoint> = BTreeMap::new();
    for r in &rows {
        per_step.entry(r.step).or_insert(RewardPoint {
            step: r.step,
            epsilon: r.epsilon,
            best_q: r.best_q,
            reward: r.reward,
            accuracy: r.accuracy,
            flops_ratio: r.flops_ratio,
            params_ratio: r.params_ratio,
        });
    }
    write_csv(&out.join("reward.csv"), &per_step.into_values().collect::<Vec<_>>())?;
    let groups: std::collections::BTreeSet<usize> = rows.iter().map(|r| r.group_id).collect();
    println!("{} groups, {} steps", groups.len(), rows.iter().map(|r| r.step + 1).max().unwrap_or(0));
    Ok(())
}

#[derive(Serialize)]
struct ScoreRow {
    group_id: usize,
    channel: usize,
    score: f64,
}

fn dump_scores(path: &Path, data: &Path, out: &Path, seed: u64) -> anyhow::Result<()> {
    let model = format::load(path)?;
    let splits = Splits::read(data)?;
    let calib = calibration_set(&splits.train, rlprune::pruner::CALIBRATION_SIZE, seed)?;
    let analysis = Analysis::of(&model)?;
    let rows: Vec<ScoreRow> = taylor_scores(&model, &calib, &analysis)?
        .into_iter()
        .map(|s| ScoreRow {
            group_id: s.group,
            channel: s.channel,
            score: s.score,
        })
        .collect();
    fs::create_dir_all(out)?;
    write_csv(&out.join("scores.csv"), &rows)?;
    println!("{} channels in {} groups", rows.len(), analysis.groups.groups.len());
    Ok(())
}
