use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde_json::json;

use seqvla_core::analysis::{compare_strategies, success_table, PredictionLog, SuccessEntry};
use seqvla_core::config::RunConfig;
use seqvla_core::diffcore::{load_checkpoint, Checkpoint};
use seqvla_core::executor::{rollout_batch, RolloutMode};
use seqvla_core::finetune::{
    entry_stem, train_all_strategies, BundleManifest, StrategyKind, Trainer, TrainingSet,
    BUNDLE_MANIFEST,
};
use seqvla_core::model::PolicyNet;
use seqvla_core::simenv::{Dataset, DatasetKind, Sim, TaskPlan, ACTION_DIM};

use crate::{usage, Failure};

pub fn with_overrides(
    mut cfg: RunConfig,
    plan: Option<&str>,
    demos: Option<usize>,
) -> Result<RunConfig, Failure> {
    if let Some(p) = plan {
        TaskPlan::by_name(p).map_err(|e| usage(format!("--plan: {e}")))?;
        cfg.task = p.to_string();
    }
    if let Some(d) = demos {
        cfg.data.demos_per_subtask = d;
        cfg.data.long_horizon_demos = d;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn data_path(cfg: &RunConfig, kind: DatasetKind) -> PathBuf {
    let suffix = match kind {
        DatasetKind::Subtask => "subtask",
        DatasetKind::LongHorizon => "long_horizon",
    };
    cfg.output_root().join("data").join(format!("{}_{suffix}.jsonl", cfg.task))
}

fn read_dataset(cfg: &RunConfig, kind: DatasetKind) -> anyhow::Result<Dataset> {
    let path = data_path(cfg, kind);
    if !path.exists() {
        bail!(
            "missing dataset {} (run `gen-data{}` first)",
            path.display(),
            if kind == DatasetKind::LongHorizon { " --long-horizon" } else { "" }
        );
    }
    let ds = Dataset::read(&path)?;
    if ds.config.plan != cfg.task {
        bail!("dataset {} is for plan '{}', config task is '{}'", path.display(), ds.config.plan, cfg.task);
    }
    Ok(ds)
}

pub fn gen_data(cfg: RunConfig, long_horizon: bool) -> Result<(), Failure> {
    let mut gens = vec![cfg.subtask_gen()];
    if long_horizon {
        gens.push(cfg.long_horizon_gen());
    }
    for g in gens {
        let ds = Dataset::generate(&g)?;
        let path = data_path(&cfg, g.kind);
        let m = ds.write(&path)?;
        println!(
            "{}: {} episodes, {} frames, {} rejected of {} attempts, config_hash {}",
            path.display(),
            m.episodes,
            m.frames,
            m.rejections,
            m.attempts,
            m.config_hash
        );
        for (sub, n) in &m.counts_per_subtask {
            println!("  {sub}: {n}");
        }
    }
    Ok(())
}

fn training_set(cfg: &RunConfig, kind: StrategyKind) -> anyhow::Result<TrainingSet> {
    let baseline = kind.is_baseline();
    let ds = read_dataset(cfg, if baseline { DatasetKind::LongHorizon } else { DatasetKind::Subtask })?;
    Ok(TrainingSet::from_dataset(&ds, cfg.train.horizon, !baseline)?)
}

fn save_checkpoint(trainer: &Trainer, cfg: &RunConfig, path: &Path) -> anyhow::Result<()> {
    let mut ckpt = trainer.checkpoint();
    ckpt.metadata["run_config_hash"] = json!(cfg.hash());
    ckpt.save(path)?;
    Ok(())
}

/// Runs up to `max_epochs` epochs, checkpointing after each, and writes the
/// report once training is complete.
fn drive(
    mut trainer: Trainer,
    data: &TrainingSet,
    cfg: &RunConfig,
    ckpt_path: &Path,
    max_epochs: Option<usize>,
) -> Result<(), Failure> {
    let mut ran = 0;
    while !trainer.is_done() && max_epochs.is_none_or(|m| ran < m) {
        let e = trainer.run_epoch(data)?;
        ran += 1;
        save_checkpoint(&trainer, cfg, ckpt_path)?;
        println!(
            "phase {} epoch {:>3}  action {:.5}  completion {:.5}",
            e.phase, e.epoch, e.action, e.completion
        );
    }
    save_checkpoint(&trainer, cfg, ckpt_path)?;
    if !trainer.is_done() {
        let (done, total) = trainer.progress();
        println!("stopped at epoch {done}/{total}; resume with --resume {}", ckpt_path.display());
        return Ok(());
    }
    let name = ckpt_path.file_name().map(|n| n.to_string_lossy().into_owned());
    let report = trainer.report(data, name)?;
    if !report.curves_finite() {
        return Err(anyhow!("non-finite loss curve in the training report").into());
    }
    let report_path = ckpt_path.with_file_name(
        ckpt_path
            .file_name()
            .unwrap()
            .to_string_lossy()
            .replace(".ckpt.json", ".report.json"),
    );
    let mut v = serde_json::to_value(&report)?;
    v["run_config_hash"] = json!(cfg.hash());
    fs::write(&report_path, serde_json::to_string_pretty(&v)? + "\n")
        .with_context(|| report_path.display().to_string())?;
    println!(
        "{}: final action {:.5} completion {:.5}; report {}",
        ckpt_path.display(),
        report.final_loss.action,
        report.final_loss.completion,
        report_path.display()
    );
    Ok(())
}

pub fn train(
    cfg: &RunConfig,
    strategy: Option<&str>,
    seed: Option<u64>,
    seeds: Option<usize>,
    max_epochs: Option<usize>,
) -> Result<(), Failure> {
    let name = strategy.map(str::to_string).unwrap_or_else(|| cfg.strategy.default.clone());
    if name.eq_ignore_ascii_case("all") {
        if seed.is_some() || max_epochs.is_some() {
            return Err(usage("--seed and --max-epochs apply to a single strategy"));
        }
        return train_all(cfg, seeds);
    }
    if seeds.is_some() {
        return Err(usage("--seeds applies to `--strategy all`"));
    }
    let kind: StrategyKind = name.parse().map_err(usage)?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let data = training_set(cfg, kind)?;
    let trainer = Trainer::new(cfg.strategy_config(kind), cfg.train.clone(), &data, seed)?;
    let path = cfg
        .output_root()
        .join("checkpoints")
        .join(format!("{}_{}.ckpt.json", cfg.task, entry_stem(kind, seed)));
    drive(trainer, &data, cfg, &path, max_epochs)
}

fn train_all(cfg: &RunConfig, seeds: Option<usize>) -> Result<(), Failure> {
    let seeds: Vec<u64> = match seeds {
        None => cfg.seeds.clone(),
        Some(0) => return Err(usage("--seeds must be at least 1")),
        Some(n) if n <= cfg.seeds.len() => cfg.seeds[..n].to_vec(),
        Some(n) => (0..n as u64).collect(),
    };
    let sub = read_dataset(cfg, DatasetKind::Subtask)?;
    let long = read_dataset(cfg, DatasetKind::LongHorizon)?;
    let strategies: Vec<_> = StrategyKind::ALL.iter().map(|&k| cfg.strategy_config(k)).collect();
    let dir = cfg.output_root().join("bundle");
    let manifest = train_all_strategies(&sub, Some(&long), &strategies, &seeds, &cfg.train, &dir)?;
    for e in &manifest.entries {
        let text = fs::read_to_string(dir.join(&e.report))?;
        let report: seqvla_core::finetune::TrainReport = serde_json::from_str(&text)?;
        if !report.curves_finite() {
            return Err(anyhow!("{}: non-finite loss curve", e.report).into());
        }
    }
    fs::write(
        dir.join("run_config.json"),
        serde_json::to_string_pretty(&json!({ "config_hash": cfg.hash(), "config": cfg }))? + "\n",
    )?;
    println!("{}: {} checkpoints", dir.join(BUNDLE_MANIFEST).display(), manifest.entries.len());
    Ok(())
}

pub fn resume(cfg: &RunConfig, path: &Path, max_epochs: Option<usize>) -> Result<(), Failure> {
    let ckpt = load_checkpoint(path)?;
    let kind: StrategyKind = serde_json::from_value(ckpt.metadata["strategy"]["strategy"].clone())
        .context("checkpoint field `strategy` is missing or invalid")?;
    let data = training_set(cfg, kind)?;
    let trainer = Trainer::resume(&ckpt, &data)?;
    drive(trainer, &data, cfg, path, max_epochs)
}

fn checkpoint_mode(ckpt: &Checkpoint) -> anyhow::Result<RolloutMode> {
    serde_json::from_value(ckpt.metadata["mode"].clone())
        .context("checkpoint field `mode` is missing or invalid")
}

/// Loads a checkpoint and checks it against the config's task and model
/// dimensions, naming the first field that disagrees.
fn load_policy(cfg: &RunConfig, sim: &Sim, path: &Path) -> anyhow::Result<(PolicyNet, RolloutMode)> {
    let ckpt = load_checkpoint(path)?;
    let mode = checkpoint_mode(&ckpt)?;
    if let Some(plan) = ckpt.metadata["plan"].as_str() {
        if plan != cfg.task {
            bail!("checkpoint field `plan` is '{plan}', config task is '{}'", cfg.task);
        }
    }
    let net = PolicyNet::from_checkpoint(&ckpt)?;
    let obs_dim = sim.observe(&sim.reset(0), 0).dim();
    let got = &net.config;
    let want = cfg.train.policy_config(obs_dim);
    let checks = [
        ("obs_dim", got.obs_dim, want.obs_dim),
        ("action_dim", got.action_dim, ACTION_DIM),
        ("horizon", got.horizon, want.horizon),
        ("context_dim", got.context_dim, want.context_dim),
        ("feature_dim", got.feature_dim, want.feature_dim),
    ];
    for (name, g, w) in checks {
        if g != w {
            bail!("checkpoint field `{name}` is {g}, the config expects {w}");
        }
    }
    Ok((net, mode))
}

pub fn rollout(
    cfg: &RunConfig,
    checkpoint: &Path,
    episodes: Option<usize>,
    seed_base: Option<u64>,
) -> Result<(), Failure> {
    let episodes = episodes.unwrap_or(cfg.eval.episodes);
    if episodes == 0 {
        return Err(usage("--episodes must be at least 1"));
    }
    let plan = cfg.plan();
    let sim = Sim::new(plan.clone(), cfg.sim.clone())?;
    let (net, mode) = load_policy(cfg, &sim, checkpoint)?;
    let base = seed_base.unwrap_or(cfg.eval.seed_base);
    let seeds: Vec<u64> = (0..episodes as u64).map(|i| base + i).collect();
    let hash = cfg.hash();
    let records = rollout_batch(&net, &sim, &cfg.rollout, mode, &seeds, &hash)?;
    let stem = checkpoint
        .file_name()
        .map(|n| n.to_string_lossy().replace(".ckpt.json", ""))
        .unwrap_or_else(|| "rollout".into());
    let dir = cfg.output_root().join("rollouts").join(stem);
    fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
    for r in &records {
        let p = dir.join(format!("episode_{}.json", r.seed));
        fs::write(&p, serde_json::to_string_pretty(r)? + "\n").with_context(|| p.display().to_string())?;
    }
    let table = success_table(&records, &plan)?;
    let summary = json!({
        "config_hash": hash,
        "checkpoint": checkpoint.display().to_string(),
        "mode": mode,
        "seeds": seeds,
        "table": table,
        "sequence_errors": records.iter().map(|r| r.sequence_errors).collect::<Vec<_>>(),
    });
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    let rates: Vec<String> = table.positions.iter().map(|p| format!("{:.2}", p.rate)).collect();
    println!(
        "{} ({mode:?}): {} episodes, positions [{}], overall {:.2}, mean sequence errors {:.2}",
        dir.display(),
        episodes,
        rates.join(" "),
        table.overall,
        table.mean_sequence_errors
    );
    Ok(())
}

pub fn analyze(cfg: &RunConfig, bundle: Option<PathBuf>, episodes: usize) -> Result<(), Failure> {
    let dir = bundle.unwrap_or_else(|| cfg.output_root().join("bundle"));
    if !dir.join(BUNDLE_MANIFEST).exists() {
        return Err(anyhow!("incomplete bundle {}: missing {BUNDLE_MANIFEST}", dir.display()).into());
    }
    let manifest = BundleManifest::read(&dir)?;
    let missing: Vec<String> = manifest
        .entries
        .iter()
        .flat_map(|e| [&e.checkpoint, &e.report])
        .filter(|f| !dir.join(f).exists())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(anyhow!("incomplete bundle {}: missing {}", dir.display(), missing.join(", ")).into());
    }
    if manifest.plan != cfg.task {
        return Err(usage(format!(
            "bundle is for plan '{}', config task is '{}'",
            manifest.plan, cfg.task
        )));
    }
    let plan = cfg.plan();
    let sim = Sim::new(plan.clone(), cfg.sim.clone())?;
    let heldout = Dataset::generate(&cfg.heldout_gen())?;
    let hash = cfg.hash();
    let mut logs = Vec::new();
    let mut success = Vec::new();
    for e in &manifest.entries {
        let (net, mode) = load_policy(cfg, &sim, &dir.join(&e.checkpoint))?;
        if mode == RolloutMode::Seqvla {
            logs.push(PredictionLog::replay(
                &net,
                &heldout,
                e.strategy.as_str(),
                e.seed,
                cfg.rollout.integration_steps,
            )?);
        }
        if episodes > 0 {
            let seeds: Vec<u64> = (0..episodes as u64).map(|i| cfg.eval.seed_base + i).collect();
            let records = rollout_batch(&net, &sim, &cfg.rollout, mode, &seeds, &hash)?;
            success.push(SuccessEntry {
                strategy: e.strategy.as_str().to_string(),
                seed: e.seed,
                table: success_table(&records, &plan)?,
            });
        }
    }
    if logs.is_empty() {
        return Err(anyhow!("incomplete bundle {}: no completion-head strategies to analyze", dir.display()).into());
    }
    let mut report = compare_strategies(&logs, &plan, cfg.eval.bins, &cfg.eval.thresholds)?;
    report.config_hash = hash.clone();
    report.success = success;
    report.validate()?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(dir.join("metrics.csv"), format!("# config_hash {hash}\n{}", report.to_csv()))?;
    for s in &report.strategies {
        println!(
            "{:<3} seed {:>3}: entropy {:.3}  KS D {:.3}  p {:.2e}",
            s.strategy, s.seed, s.overall.entropy, s.overall.ks_d, s.overall.ks_p
        );
    }
    match &report.comparison {
        Some(c) => println!(
            "J vs S over {} seeds: J lower entropy in {}, J higher KS D in {}",
            c.seeds.len(),
            c.joint_lower_entropy,
            c.joint_higher_ks_d
        ),
        None => println!("J vs S comparison: absent"),
    }
    println!("{}", dir.join("metrics.json").display());
    Ok(())
}
