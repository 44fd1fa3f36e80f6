use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use biact_core::checks;
use biact_core::episode::list_episodes;
use biact_core::policy::{load_checkpoint, save_checkpoint, train};
use biact_core::runtime::eval::AblationOptions;
use biact_core::runtime::{
    ablation_run, collect, evaluate, ChunkSchedule, CollectOptions, EvalOptions, ExecMode, QualityGate,
};
use biact_core::teleop::{self, Pacing, ServeOptions};
use biact_core::{Dataset, Episode, HeadInit, ObjectSpec, Policy, PolicyConfig, SimConfig, Trainer};

use crate::{
    AblateArgs, Cli, CollectArgs, Command, EvalArgs, ExportArgs, ModelArgs, ServeArgs, SimCheckArgs, TrainArgs,
};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_CHECKS: u8 = 3;

#[derive(Debug)]
pub enum Failure {
    /// Bad flags or paths, caught before any side effect.
    Usage(String),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::Runtime(e.into())
            }
        }
    )*};
}

runtime_from!(anyhow::Error, biact_core::Error, std::io::Error, serde_json::Error);

type Outcome = Result<u8, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub fn run(cli: &Cli) -> Outcome {
    let mut cfg = load_config(cli.config.as_deref())?;
    if cli.jobs == 0 {
        return Err(usage("--jobs must be >= 1"));
    }
    let overrides = match &cli.command {
        Command::Train(a) => Some(&a.model),
        Command::Ablate(a) => Some(&a.model),
        _ => None,
    };
    if let Some(m) = overrides {
        cfg.model = model_config(&cfg, m)?;
    }
    if let Err(e) = cfg.validate() {
        let file = cli.config.as_deref().map_or("defaults".into(), |p| p.display().to_string());
        return Err(usage(format!("{file}: {e}")));
    }
    match &cli.command {
        Command::SimCheck(a) => sim_check(&cfg, a),
        Command::Collect(a) => collect_cmd(cli, cfg, a),
        Command::Train(a) => train_cmd(cli, &cfg, a),
        Command::Eval(a) => eval_cmd(cli, &cfg, a),
        Command::Ablate(a) => ablate_cmd(cli, &cfg, a),
        Command::Serve(a) => serve_cmd(&cfg, a),
        Command::Export(a) => export_cmd(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<SimConfig, Failure> {
    match path {
        None => Ok(SimConfig::default()),
        Some(p) if !p.is_file() => Err(usage(format!("config file {} does not exist", p.display()))),
        Some(p) => SimConfig::load_unchecked(p).map_err(|e| usage(format!("{}: {e}", p.display()))),
    }
}

fn parse_objects<S: AsRef<str>>(specs: &[S]) -> Result<Vec<ObjectSpec>, Failure> {
    let objects = specs
        .iter()
        .map(|s| s.as_ref().trim())
        .filter(|s| !s.is_empty())
        .map(|s| ObjectSpec::parse(s).map_err(|e| usage(format!("--object {s}: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if objects.is_empty() {
        return Err(usage("at least one object is required"));
    }
    Ok(objects)
}

fn require_dir(p: &Path, flag: &str) -> Result<(), Failure> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{flag} {} is not a directory", p.display())))
    }
}

fn require_file(p: &Path, flag: &str) -> Result<(), Failure> {
    if p.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{flag} {} does not exist", p.display())))
    }
}

/// The configured model with flag overrides, validated against the scene.
fn model_config(cfg: &SimConfig, m: &ModelArgs) -> Result<PolicyConfig, Failure> {
    let mut p = cfg.model.clone();
    if let Some(k) = m.chunk {
        if k == 0 {
            return Err(usage("--chunk must be >= 1"));
        }
        p.chunk_k = k;
    }
    macro_rules! set {
        ($($field:ident),*) => {$( if let Some(v) = m.$field { p.$field = v; } )*};
    }
    set!(
        d_model,
        heads,
        encoder_layers,
        decoder_layers,
        latent_encoder_layers,
        ffn_dim,
        patch_size,
        latent_dim,
        kl_weight,
        lr,
        batch_size,
        dropout
    );
    p.n_joints = cfg.arm.n_joints();
    p.frame_size = cfg.scene.frame_size;
    p.validate().map_err(|e| usage(e.to_string()))?;
    Ok(p)
}

fn schedule(mode: &str, k: usize, decay: f64) -> Result<ChunkSchedule, Failure> {
    let s = match mode.parse::<ExecMode>().map_err(|e| usage(e.to_string()))? {
        ExecMode::ChunkSerial => ChunkSchedule::chunk_serial(k),
        ExecMode::TemporalEnsemble => ChunkSchedule::temporal_ensemble(k, decay),
    };
    s.validate().map_err(|e| usage(e.to_string()))?;
    Ok(s)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn sim_check(cfg: &SimConfig, a: &SimCheckArgs) -> Outcome {
    if a.print_config {
        print!("{}", cfg.to_toml_string());
    }
    let results = checks::run_all(cfg)?;
    println!("{:<24} {:<6} {:>12} {:>12}  detail", "invariant", "result", "value", "threshold");
    for r in &results {
        println!(
            "{:<24} {:<6} {:>12.4e} {:>12.4e}  {}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.value,
            r.threshold,
            r.detail
        );
    }
    if let Some(path) = &a.trace {
        let rows = checks::free_space_session(cfg, 5.0)?;
        let mut w = create(path)?;
        writeln!(w, "{}", checks::trace_csv_header(cfg.arm.n_joints()))?;
        for r in &rows {
            writeln!(w, "{}", r.to_csv())?;
        }
        w.flush()?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        eprintln!("{failed} of {} invariants failed", results.len());
        return Ok(EXIT_CHECKS);
    }
    Ok(0)
}

fn check_empty_out(out: &Path) -> Result<(), Failure> {
    if out.is_file() {
        return Err(usage(format!("--out {} is a file", out.display())));
    }
    if out.is_dir() && !list_episodes(out).map_err(|e| usage(e.to_string()))?.is_empty() {
        return Err(usage(format!("--out {} already holds episodes", out.display())));
    }
    Ok(())
}

fn collect_cmd(cli: &Cli, mut cfg: SimConfig, a: &CollectArgs) -> Outcome {
    if a.episodes == 0 {
        return Err(usage("--episodes must be >= 1"));
    }
    let objects = parse_objects(&a.objects.split(',').collect::<Vec<_>>())?;
    check_empty_out(&a.out)?;
    match a.expert.as_str() {
        "scripted" => {
            let report = collect(
                &cfg,
                &CollectOptions {
                    episodes: a.episodes,
                    objects,
                    out_dir: a.out.clone(),
                    seed: cli.seed,
                    max_discards: a.max_discards,
                    gate: QualityGate::for_arm(&cfg.arm),
                },
            )?;
            println!(
                "saved {} episodes ({} ticks) to {}; {} discarded",
                report.saved.len(),
                report.total_ticks,
                a.out.display(),
                report.discarded.len()
            );
            for (seed, object, why) in &report.discarded {
                println!("  discarded seed {seed} ({object}): {why}");
            }
            Ok(0)
        }
        "teleop" => {
            cfg.object = objects[0].clone();
            let mut opts = ServeOptions::new(a.port);
            opts.out_dir = Some(a.out.clone());
            opts.gate = QualityGate::for_arm(&cfg.arm);
            let server = teleop::spawn(&cfg, opts)?;
            println!(
                "teleop bridge on ws://{}; waiting for {} recorded episodes",
                server.local_addr, a.episodes
            );
            loop {
                std::thread::sleep(Duration::from_millis(200));
                let n = list_episodes(&a.out).map(|v| v.len()).unwrap_or(0);
                if n >= a.episodes {
                    break;
                }
            }
            server.shutdown();
            println!("saved {} episodes to {}", a.episodes, a.out.display());
            Ok(0)
        }
        other => Err(usage(format!("--expert must be scripted or teleop, not '{other}'"))),
    }
}

fn train_cmd(cli: &Cli, cfg: &SimConfig, a: &TrainArgs) -> Outcome {
    let model = model_config(cfg, &a.model)?;
    if a.steps == 0 {
        return Err(usage("--steps must be >= 1"));
    }
    require_dir(&a.data, "--data")?;
    if a.out.is_dir() {
        return Err(usage(format!("--out {} is a directory", a.out.display())));
    }
    let dataset = Dataset::load_dir(&a.data)?;
    if dataset.frame_side() != model.frame_size {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "episodes carry {0}x{0} frames but the model expects {1}x{1}",
            dataset.frame_side(),
            model.frame_size
        )));
    }
    let policy = Policy::new(model, dataset.stats.clone(), !a.no_force, HeadInit::Zero, cli.seed)?;
    let mut trainer = Trainer::new(policy, cli.seed);
    let metrics_path = a.metrics.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".metrics.csv");
        PathBuf::from(p)
    });
    let mut metrics = create(&metrics_path)?;
    let m = train(&mut trainer, &dataset, a.steps, cli.seed, Some(&mut metrics))?;
    metrics.flush()?;
    save_checkpoint(&trainer.policy, &a.out)?;
    if let (Some(first), Some(last)) = (m.first(), m.last()) {
        println!(
            "trained {} steps on {} episodes ({} ticks): l1 {:.4} -> {:.4}, kl {:.4}",
            m.len(),
            dataset.episodes.len(),
            dataset.total_ticks(),
            first.loss_l1,
            last.loss_l1,
            last.loss_kl
        );
    }
    println!("checkpoint {}\nmetrics {}", a.out.display(), metrics_path.display());
    Ok(0)
}

fn eval_cmd(cli: &Cli, cfg: &SimConfig, a: &EvalArgs) -> Outcome {
    if a.trials == 0 {
        return Err(usage("--trials must be >= 1"));
    }
    let objects = parse_objects(&a.object)?;
    schedule(&a.mode, 1, a.decay)?;
    require_file(&a.ckpt, "--ckpt")?;
    if a.out.is_file() {
        return Err(usage(format!("--out {} is a file; eval writes a directory", a.out.display())));
    }
    let policy = load_checkpoint(&a.ckpt)?;
    let sched = schedule(&a.mode, policy.config.chunk_k, a.decay)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let report = evaluate(
        cfg,
        &policy,
        &EvalOptions {
            objects,
            trials: a.trials,
            schedule: sched,
            seed: cli.seed,
            jobs: cli.jobs,
            trajectory_dir: (!a.no_trajectories).then(|| a.out.join("trajectories")),
        },
    )?;
    let path = a.out.join("report.json");
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    writeln!(w)?;
    w.flush()?;
    println!("{:<14} {:>6} {:>6} {:>6} {:>6}", "object", "trials", "pick", "move", "place");
    for o in &report.objects {
        println!("{:<14} {:>6} {:>6} {:>6} {:>6}", o.object, o.trials, o.pick, o.moved, o.place);
    }
    println!(
        "success {}/{}; report {}",
        report.successes(),
        report.total_trials(),
        path.display()
    );
    Ok(0)
}

fn ablate_cmd(cli: &Cli, cfg: &SimConfig, a: &AblateArgs) -> Outcome {
    let model = model_config(cfg, &a.model)?;
    if a.steps == 0 || a.trials == 0 {
        return Err(usage("--steps and --trials must be >= 1"));
    }
    let objects = parse_objects(&a.object)?;
    let sched = schedule(&a.mode, model.chunk_k, a.decay)?;
    require_dir(&a.data, "--data")?;
    if a.out.is_file() {
        return Err(usage(format!("--out {} is a file", a.out.display())));
    }
    let dataset = Dataset::load_dir(&a.data)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let report = ablation_run(
        cfg,
        &dataset,
        &AblationOptions {
            model,
            steps: a.steps,
            seed: cli.seed,
            eval: EvalOptions {
                objects,
                trials: a.trials,
                schedule: sched,
                seed: cli.seed,
                jobs: cli.jobs,
                trajectory_dir: None,
            },
        },
        None,
    )?;
    let mut w = create(&a.out.join("report.json"))?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    writeln!(w)?;
    w.flush()?;
    let table = report.table();
    std::fs::write(a.out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(0)
}

fn serve_cmd(cfg: &SimConfig, a: &ServeArgs) -> Outcome {
    if let Some(ui) = &a.ui_dir {
        require_dir(ui, "--ui-dir")?;
    }
    if let Some(out) = &a.out {
        check_empty_out(out)?;
    }
    let ip = a
        .host
        .parse()
        .map_err(|_| usage(format!("--host {} is not an IP address", a.host)))?;
    let mut opts = ServeOptions::new(a.port);
    opts.addr = SocketAddr::new(ip, a.port);
    opts.out_dir = a.out.clone();
    opts.pacing = Pacing::Realtime;
    opts.gate = QualityGate::for_arm(&cfg.arm);
    let server = teleop::spawn(cfg, opts)?;
    println!("teleop bridge on ws://{}", server.local_addr);
    if let Some(ui) = &a.ui_dir {
        println!("UI bundle: open {} in a browser", ui.join("index.html").display());
    }
    server.join();
    Ok(0)
}

fn export_cmd(a: &ExportArgs) -> Outcome {
    require_dir(&a.episode, "--episode")?;
    let ep = Episode::load(&a.episode)?;
    let mut w = create(&a.csv)?;
    ep.write_csv(&mut w)?;
    w.flush()?;
    println!("{} ticks -> {}", ep.len(), a.csv.display());
    Ok(0)
}
