use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use ucil::checkpoint;
use ucil::data::manifest::StreamManifest;
use ucil::data::synth::{synth_stream, SynthSpec};
use ucil::data::Labeled;
use ucil::eval::{MappingMode, SessionReport};
use ucil::memory::Memory;
use ucil::trainer::EngineState;
use ucil::{Error, MemoryStrategy, Profile, TrainConfig};

const CHECKPOINT_NAME: &str = "checkpoint.ucck";

#[derive(Parser)]
#[command(name = "ucil", version, about = "Continual clustering of embedding streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic task stream (feature files plus manifest).
    Synth(SynthArgs),
    /// Train over every task of a stream, checkpointing after each session.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test splits of the sessions it has seen.
    Eval(EvalArgs),
    /// Summarize the memory stored in a checkpoint.
    InspectMemory(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 5)]
    tasks: usize,
    /// Classes per task.
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    /// Training samples per class.
    #[arg(long, default_value_t = 200)]
    train: usize,
    /// Test samples per class.
    #[arg(long, default_value_t = 50)]
    test: usize,
    /// Noise scale around each class direction.
    #[arg(long, default_value_t = 0.03)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, env = "UCIL_OUT_DIR")]
    out: PathBuf,
    /// Base hyperparameters.
    #[arg(long, value_enum, default_value = "desk")]
    profile: ProfileArg,
    /// TOML file with keys overriding the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pnum: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Keep sigma at its initial value.
    #[arg(long)]
    fixed_sigma: bool,
    #[arg(long)]
    no_sep_loss: bool,
    /// Use the identity map instead of the MLP projector.
    #[arg(long)]
    no_projector: bool,
    /// Disable replay from memory (also zeroes lambda_old).
    #[arg(long)]
    no_replay: bool,
    /// `proto` or `exemplar:K`.
    #[arg(long)]
    memory: Option<MemoryStrategy>,
    /// Continue from a checkpoint; its stored config is used.
    #[arg(long)]
    resume: Option<PathBuf>,
}

impl TrainArgs {
    fn overrides_config(&self) -> bool {
        self.config.is_some()
            || self.seed.is_some()
            || self.pnum.is_some()
            || self.epochs.is_some()
            || self.fixed_sigma
            || self.no_sep_loss
            || self.no_projector
            || self.no_replay
            || self.memory.is_some()
    }

    fn resolve_config(&self) -> ucil::Result<TrainConfig> {
        let profile = match self.profile {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        };
        let mut cfg = TrainConfig::profile(profile);
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            cfg = cfg
                .with_overrides(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.pnum {
            cfg.pnum = p;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(m) = self.memory {
            cfg.memory = m;
        }
        if self.fixed_sigma {
            cfg.trainable_sigma = false;
        }
        if self.no_sep_loss {
            cfg.sep_loss = false;
        }
        if self.no_projector {
            cfg.use_projector = false;
        }
        if self.no_replay {
            cfg.replay = false;
            cfg.lambda_old = 0.0;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Mapping used for the headline per-task numbers.
    #[arg(long, value_enum, default_value = "global")]
    mapping: MappingArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum MappingArg {
    Global,
    Restricted,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::InspectMemory(a) => inspect_memory(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn synth(a: SynthArgs) -> ucil::Result<()> {
    let spec = SynthSpec {
        tasks: a.tasks,
        classes_per_task: a.classes,
        dim: a.dim,
        train_per_class: a.train,
        test_per_class: a.test,
        spread: a.spread,
        seed: a.seed,
    };
    let (_, manifest) = synth_stream(&spec, &a.out)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn write_file(path: &Path, text: &str) -> ucil::Result<()> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn jsonl<T: serde::Serialize>(items: &[T]) -> String {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).expect("record serializes"));
        s.push('\n');
    }
    s
}

fn summary_json(reports: &[SessionReport]) -> Value {
    let sessions: Vec<Value> = reports
        .iter()
        .map(|r| {
            let mut o = serde_json::Map::new();
            o.insert("session".into(), json!(r.session));
            o.insert("acc_overall".into(), json!(r.acc_overall));
            for (t, a) in r.acc_per_task.iter().enumerate() {
                o.insert(format!("acc_task_{}", t + 1), json!(a));
            }
            o.insert("forgetting".into(), json!(r.forgetting));
            Value::Object(o)
        })
        .collect();
    let last = reports.last();
    json!({
        "sessions": sessions,
        "final_acc": last.map(|r| r.acc_overall),
        "final_forgetting": last.and_then(|r| r.forgetting),
    })
}

/// Rewrites every per-run output file from the current state.
fn write_outputs(out: &Path, state: &EngineState) -> ucil::Result<()> {
    write_file(&out.join("metrics.jsonl"), &jsonl(&state.history))?;
    write_file(&out.join("results.jsonl"), &jsonl(&state.reports))?;
    let summary = serde_json::to_string_pretty(&summary_json(&state.reports)).expect("summary serializes");
    write_file(&out.join("summary.json"), &summary)?;
    checkpoint::save(state, &out.join(CHECKPOINT_NAME))
}

fn train(a: TrainArgs) -> ucil::Result<()> {
    let manifest = StreamManifest::load(&a.manifest)?;
    manifest.check_files()?;
    let mut state = match &a.resume {
        Some(ck) => {
            if a.overrides_config() {
                return Err(Error::Config(
                    "--resume uses the checkpoint's config; drop the config flags".into(),
                ));
            }
            checkpoint::load(ck)?
        }
        None => EngineState::new(a.resolve_config()?, manifest.dim)?,
    };
    fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
    write_file(&a.out.join("resolved_config.toml"), &state.config.to_toml())?;
    let stream = manifest.load_stream()?;

    let out = a.out.clone();
    let run = state.run_stream(&stream, |st, r| {
        let f = r.forgetting.map_or("-".to_string(), |f| format!("{f:.4}"));
        println!(
            "session {}: classes {} acc {:.4} forgetting {f}",
            r.session, r.classes_seen, r.acc_overall
        );
        write_outputs(&out, st)
    });
    if let Err(e) = run {
        if let Error::NonFiniteLoss(d) = &e {
            let diag = json!({
                "error": e.to_string(),
                "task": d.task,
                "epoch": d.epoch,
                "batch": d.batch,
                "losses": {"proto": fmt_float(d.proto), "align": fmt_float(d.align),
                           "old": fmt_float(d.old), "sep": fmt_float(d.sep)},
                "config": state.config,
            });
            let path = a.out.join("diagnostics.json");
            write_file(&path, &serde_json::to_string_pretty(&diag).expect("diagnostics serialize"))?;
            eprintln!("diagnostics written to {}", path.display());
        }
        return Err(e);
    }
    if let Some(r) = state.reports.last() {
        let f = r.forgetting.map_or("n/a".to_string(), |f| format!("{f:.4}"));
        println!("final A = {:.4}  F = {f}", r.acc_overall);
    }
    Ok(())
}

/// JSON has no NaN or infinity, so non-finite values go out as strings.
fn fmt_float(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        json!(x.to_string())
    }
}

fn eval(a: EvalArgs) -> ucil::Result<()> {
    let state = checkpoint::load(&a.checkpoint)?;
    let manifest = StreamManifest::load(&a.manifest)?;
    if manifest.dim != state.dim {
        return Err(Error::Validation(format!(
            "manifest dimension {} does not match checkpoint dimension {}",
            manifest.dim, state.dim
        )));
    }
    let sessions = state.sessions();
    if sessions == 0 {
        return Err(Error::Validation("checkpoint has no trained sessions".into()));
    }
    if manifest.tasks.len() < sessions {
        return Err(Error::Validation(format!(
            "checkpoint has {sessions} sessions but the manifest lists {} tasks",
            manifest.tasks.len()
        )));
    }
    let tests = (0..sessions).map(|t| manifest.load_test(t)).collect::<ucil::Result<Vec<_>>>()?;
    let refs: Vec<&Labeled> = tests.iter().collect();
    let r = state.evaluate(&refs)?;
    let mode = match a.mapping {
        MappingArg::Global => MappingMode::Global,
        MappingArg::Restricted => MappingMode::Restricted,
    };
    let (per_task, forgetting) = match mode {
        MappingMode::Global => (&r.acc_per_task, r.forgetting),
        MappingMode::Restricted => (&r.acc_per_task_restricted, r.forgetting_restricted),
    };
    let mode_name = match mode {
        MappingMode::Global => "global",
        MappingMode::Restricted => "restricted",
    };
    let mut o = std::io::stdout().lock();
    let _ = writeln!(o, "session {} ({} classes, mapping {mode_name})", r.session, r.classes_seen);
    let _ = writeln!(o, "A = {:.6}", r.acc_overall);
    for (t, acc) in per_task.iter().enumerate() {
        let _ = writeln!(o, "task {}: {:.6}", t + 1, acc);
    }
    let fmt = |f: Option<f64>| f.map_or("n/a".to_string(), |f| format!("{f:.6}"));
    let _ = writeln!(o, "F = {}", fmt(forgetting));
    let _ = writeln!(o, "F (global) = {}  F (restricted) = {}", fmt(r.forgetting), fmt(r.forgetting_restricted));
    Ok(())
}

fn inspect_memory(a: InspectArgs) -> ucil::Result<()> {
    let state = checkpoint::load(&a.checkpoint)?;
    let mem = &state.memory;
    let classes = mem.num_classes();
    let floats = mem.total_floats();
    println!("strategy: {}", state.config.memory);
    println!("sessions: {}  classes stored: {classes}  dim: {}", state.sessions(), state.dim);
    match mem {
        Memory::Prototypes(m) => {
            println!("class  task  prototypes  samples  mean_purity");
            for (class, idx) in m.by_class() {
                let samples: u64 = idx.iter().map(|&i| m.stats[i].count).sum();
                let purity = idx.iter().map(|&i| m.stats[i].purity).sum::<f64>() / idx.len() as f64;
                let task = m.stats[idx[0]].task + 1;
                println!("{class:>5}  {task:>4}  {:>10}  {samples:>7}  {purity:>11.4}", idx.len());
            }
            let mut bins = [0usize; 10];
            for s in &m.stats {
                bins[((s.purity * 10.0) as usize).min(9)] += 1;
            }
            println!("purity histogram:");
            for (b, c) in bins.iter().enumerate() {
                println!("  [{:.1}, {:.1}{} {c}", b as f64 / 10.0, (b + 1) as f64 / 10.0, if b == 9 { "]" } else { ")" });
            }
            if classes > 0 {
                println!("prototypes per class: {:.2}", m.stats.len() as f64 / classes as f64);
            }
        }
        Memory::Exemplars(m) => {
            println!("class  exemplars");
            for (class, rows) in &m.classes {
                println!("{class:>5}  {:>9}", rows.nrows());
            }
        }
    }
    println!("total floats: {floats}");
    if classes > 0 && state.dim > 0 {
        println!(
            "exemplar-equivalents per class: {:.2}",
            floats as f64 / state.dim as f64 / classes as f64
        );
    }
    Ok(())
}
