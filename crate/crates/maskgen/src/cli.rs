//! Command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad arguments, 3 invalid
//! configuration, 4 checkpoint error. Metrics and progress go to standard
//! error; `eval` writes a single JSON object to standard output.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use maskgen_core::numerics::RngStream;
use maskgen_core::toyworld::{Task, World};
use maskgen_core::training::{StepLog, TrainState};

use crate::checkpoint::{describe, Checkpoint, CheckpointError};
use crate::config::{ConfigError, Purpose, RunConfig};
use crate::pipeline::{self, EvalSpec, Tokenizers};
use crate::state;
use crate::streams::{self, Sidecar, UtteranceRecord};

#[derive(Parser, Debug)]
#[command(name = "maskgen", version, about = "Masked generative token models on a synthetic speech world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long, short)]
    config: PathBuf,
    /// Dotted-path override applied after parsing, e.g. `pretrain.steps=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Stage {
    Ssl,
    Acoustic,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Tts,
    Vc,
    Se,
    Tse,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Tts => Task::Tts,
            TaskArg::Vc => Task::Vc,
            TaskArg::Se => Task::Se,
            TaskArg::Tse => Task::Tse,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the world's phoneme and speaker tables to `<dir>/world.json`.
    MakeWorld(ConfigArgs),
    /// Train the SSL and acoustic tokenizers and write the token corpus.
    TrainCodebooks(ConfigArgs),
    /// Unconditional pre-training (or acoustic-stage training).
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "ssl")]
        stage: Stage,
        /// Continue from the existing checkpoint of this stage.
        #[arg(long)]
        resume: bool,
    },
    /// Fine-tune the pre-trained model on the configured task mix.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Start from a fresh network instead of the pre-trained checkpoint.
        #[arg(long)]
        from_scratch: bool,
        #[arg(long)]
        resume: bool,
    },
    /// Generate held-out samples into `<dir>/generated.tok`.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "tts")]
        task: TaskArg,
        /// Also run the acoustic stage on the generated SSL tokens.
        #[arg(long)]
        acoustic: bool,
    },
    /// Evaluate one task and print JSON metrics.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "tts")]
        task: TaskArg,
        /// Model checkpoint; defaults to `<dir>/finetune.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Drop the condition when generating.
        #[arg(long)]
        unconditional: bool,
        /// Score the reference tokens themselves instead of generating.
        #[arg(long)]
        oracle: bool,
    },
    /// Print the header and sections of a checkpoint.
    InspectCkpt { path: PathBuf },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Core(#[from] maskgen_core::Error),
    #[error(transparent)]
    Stream(#[from] streams::StreamError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            CliError::Checkpoint(_) => 4,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn metrics(l: &StepLog) {
    eprintln!("{l}");
}

fn load_cfg(args: &ConfigArgs, purpose: Purpose) -> Result<RunConfig> {
    Ok(RunConfig::load(&args.config, &args.set, purpose)?)
}

fn world_of(cfg: &RunConfig) -> Result<World> {
    Ok(World::new(cfg.world)?)
}

fn load_tokenizers(cfg: &RunConfig) -> Result<Tokenizers> {
    let ckpt = Checkpoint::load(&cfg.paths.tokenizers())?;
    Ok(state::get_tokenizers(&ckpt, cfg.world.d_feat)?.1)
}

fn config_doc(cfg: &RunConfig) -> serde_json::Value {
    serde_json::json!({ "run": cfg })
}

fn save_train(cfg: &RunConfig, path: &Path, st: &TrainState) -> Result<()> {
    let mut ckpt = Checkpoint { step: st.step(), config: config_doc(cfg), ..Default::default() };
    ckpt.rng = Some(RngStream::new(cfg.seed()).state());
    state::put_train_state(&mut ckpt, "model/", st);
    let bytes = ckpt.save(path)?;
    eprintln!("wrote {} ({bytes} bytes, step {})", path.display(), st.step());
    Ok(())
}

#[derive(Serialize)]
struct WorldDoc<'a> {
    spec: &'a maskgen_core::toyworld::WorldSpec,
    phonemes: Vec<&'a [f32]>,
    speakers: Vec<&'a [f32]>,
}

fn make_world(args: &ConfigArgs) -> Result<()> {
    let cfg = load_cfg(args, Purpose::Any)?;
    let world = world_of(&cfg)?;
    let doc = WorldDoc {
        spec: &world.spec,
        phonemes: (0..world.phonemes.rows()).map(|i| world.phonemes.row(i)).collect(),
        speakers: (0..world.speakers.rows()).map(|i| world.speakers.row(i)).collect(),
    };
    let path = cfg.paths.world();
    write_file(&path, serde_json::to_string_pretty(&doc).expect("world serializes").as_bytes())?;
    eprintln!("wrote {} ({} symbols, {} speakers)", path.display(), world.spec.alphabet, world.spec.speakers);
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| CliError::Io { path: path.into(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, bytes).map_err(io)
}

fn train_codebooks(args: &ConfigArgs) -> Result<()> {
    let cfg = load_cfg(args, Purpose::Seeded)?;
    let world = world_of(&cfg)?;
    let mut log = |l: &StepLog| metrics(l);
    let tok = pipeline::train_tokenizers(&world, &cfg.quantizers, cfg.seed(), &mut log)?;
    let mut ckpt = Checkpoint { step: cfg.quantizers.steps as u64, config: config_doc(&cfg), ..Default::default() };
    ckpt.rng = Some(RngStream::new(cfg.seed()).state());
    state::put_tokenizers(&mut ckpt, &cfg.quantizers, &tok);
    let path = cfg.paths.tokenizers();
    let bytes = ckpt.save(&path)?;
    eprintln!("wrote {} ({bytes} bytes)", path.display());

    let corpus = pipeline::labeled_corpus(&world, cfg.corpus_utterances, cfg.seed())?;
    let mut records = Vec::with_capacity(corpus.len());
    let mut streams_out = Vec::with_capacity(corpus.len());
    for u in &corpus {
        let ids = tok.ssl.tokens(&u.features)?;
        records.push(UtteranceRecord { frames: ids.len(), symbols: u.symbols.clone(), speaker: u.speaker, prompt_len: 0 });
        streams_out.push(vec![ids]);
    }
    let side = Sidecar { layers: 1, vocab_size: tok.ssl.vocab_size(), utterances: records };
    streams::write_corpus(&cfg.paths.corpus(), &side, &streams_out)?;
    eprintln!("wrote {} ({} utterances)", cfg.paths.corpus().display(), corpus.len());
    Ok(())
}

fn pretrain(args: &ConfigArgs, stage: Stage, resume: bool) -> Result<()> {
    let cfg = load_cfg(args, Purpose::Seeded)?;
    let world = world_of(&cfg)?;
    let tok = load_tokenizers(&cfg)?;
    let mut log = |l: &StepLog| metrics(l);
    match stage {
        Stage::Ssl => {
            let path = cfg.paths.pretrain();
            let mut st = if resume {
                state::get_train_state(&Checkpoint::load(&path)?, "model/", cfg.pretrain.optimizer)?
            } else {
                let (m, p) = pipeline::build_model(&cfg.net, &tok.ssl, cfg.seed(), "net")?;
                TrainState::new(m, p, cfg.pretrain.optimizer)
            };
            let pc = cfg.pretrain.with_seed(cfg.seed());
            pipeline::pretrain(&mut st, &world, &tok.ssl, &pc, pc.steps, &mut log)?;
            save_train(&cfg, &path, &st)
        }
        Stage::Acoustic => {
            let path = cfg.paths.acoustic();
            let (acfg, mut st) = if resume {
                state::get_acoustic_state(&Checkpoint::load(&path)?, "acoustic/", cfg.acoustic.optimizer)?
            } else {
                pipeline::build_acoustic(&cfg.acoustic, &tok, cfg.seed())?
            };
            pipeline::train_acoustic(
                &mut st,
                &world,
                &tok,
                &cfg.acoustic,
                &cfg.pretrain.prompt,
                cfg.pretrain.horizon,
                cfg.seed(),
                cfg.acoustic.steps,
                &mut log,
            )?;
            let mut ckpt = Checkpoint { step: st.opt.state.step, config: config_doc(&cfg), ..Default::default() };
            ckpt.rng = Some(RngStream::new(cfg.seed()).state());
            state::put_acoustic_state(&mut ckpt, "acoustic/", &acfg, &st);
            let bytes = ckpt.save(&path)?;
            eprintln!("wrote {} ({bytes} bytes, step {})", path.display(), st.opt.state.step);
            Ok(())
        }
    }
}

fn finetune(args: &ConfigArgs, from_scratch: bool, resume: bool) -> Result<()> {
    let cfg = load_cfg(args, Purpose::Finetune)?;
    let world = world_of(&cfg)?;
    let tok = load_tokenizers(&cfg)?;
    let path = cfg.paths.finetune();
    let mut st = if resume {
        state::get_train_state(&Checkpoint::load(&path)?, "model/", cfg.finetune.optimizer)?
    } else {
        let (m, p) = if from_scratch {
            pipeline::build_model(&cfg.net, &tok.ssl, cfg.seed(), "net")?
        } else {
            state::get_model(&Checkpoint::load(&cfg.paths.pretrain())?, "model/")?
        };
        pipeline::prepare_finetune(m, p, &world, &cfg.finetune, cfg.seed())?
    };
    let mut log = |l: &StepLog| metrics(l);
    pipeline::finetune(
        &mut st,
        &world,
        &tok.ssl,
        &cfg.tasks,
        &cfg.finetune,
        cfg.pretrain.horizon,
        cfg.seed(),
        cfg.finetune.steps,
        &mut log,
    )?;
    save_train(&cfg, &path, &st)
}

fn eval_spec(cfg: &RunConfig, task: Task) -> EvalSpec {
    EvalSpec {
        prompt_symbols: if task.uses_prompt() { cfg.eval.prompt_symbols } else { None },
        text_guided: cfg.eval.text_guided,
        ..EvalSpec::new(task, cfg.eval.samples, cfg.seed())
    }
}

fn generate(args: &ConfigArgs, task: Task, acoustic: bool) -> Result<()> {
    let cfg = load_cfg(args, Purpose::Seeded)?;
    let world = world_of(&cfg)?;
    let tok = load_tokenizers(&cfg)?;
    let st = state::get_train_state(&Checkpoint::load(&cfg.paths.finetune())?, "model/", cfg.finetune.optimizer)?;
    let spec = eval_spec(&cfg, task);
    let (report, gen) = pipeline::evaluate(&st.model, &st.params, &world, &tok.ssl, &spec, &cfg.decode)?;
    let samples = pipeline::eval_samples(&world, &tok.ssl, &spec)?;
    let records: Vec<UtteranceRecord> = samples
        .iter()
        .zip(&gen)
        .map(|(s, g)| UtteranceRecord {
            frames: g.tokens.len(),
            symbols: s.utterance.symbols.clone(),
            speaker: s.utterance.speaker,
            prompt_len: s.prompt_len,
        })
        .collect();
    let side = Sidecar { layers: 1, vocab_size: tok.ssl.vocab_size(), utterances: records.clone() };
    streams::write_corpus(&cfg.paths.generated(), &side, &gen.iter().map(|g| vec![g.tokens.clone()]).collect::<Vec<_>>())?;
    eprintln!(
        "wrote {} ({} samples, symbol error rate {:.4})",
        cfg.paths.generated().display(),
        report.n_samples,
        report.symbol_error_rate
    );
    if acoustic {
        let (acfg, ast) = state::get_acoustic_state(&Checkpoint::load(&cfg.paths.acoustic())?, "acoustic/", cfg.acoustic.optimizer)?;
        let mut rng = RngStream::new(cfg.seed()).fork("generate-acoustic");
        let mut layers_out = Vec::with_capacity(gen.len());
        for g in &gen {
            let (layers, _) =
                pipeline::synthesize(&ast, &tok, &g.tokens, &[], acfg.steps_per_layer, &cfg.decode.sampling, &mut rng)?;
            layers_out.push(layers);
        }
        let side = Sidecar { layers: acfg.depth, vocab_size: tok.acoustic.layer_vocab(), utterances: records };
        streams::write_corpus(&cfg.paths.generated_acoustic(), &side, &layers_out)?;
        eprintln!("wrote {}", cfg.paths.generated_acoustic().display());
    }
    Ok(())
}

fn eval(args: &ConfigArgs, task: Task, checkpoint: Option<PathBuf>, unconditional: bool, oracle: bool) -> Result<()> {
    let cfg = load_cfg(args, Purpose::Any)?;
    let world = world_of(&cfg)?;
    let tok = load_tokenizers(&cfg)?;
    let spec = EvalSpec { unconditional, ..eval_spec(&cfg, task) };
    let report = if oracle {
        pipeline::evaluate_oracle(&world, &tok.ssl, &spec)?
    } else {
        let path = checkpoint.unwrap_or_else(|| cfg.paths.finetune());
        let (model, params) = state::get_model(&Checkpoint::load(&path)?, "model/")?;
        pipeline::evaluate(&model, &params, &world, &tok.ssl, &spec, &cfg.decode)?.0
    };
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(path)?;
    print!("{}", describe(&ckpt));
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::MakeWorld(a) => make_world(&a),
        Command::TrainCodebooks(a) => train_codebooks(&a),
        Command::Pretrain { cfg, stage, resume } => pretrain(&cfg, stage, resume),
        Command::Finetune { cfg, from_scratch, resume } => finetune(&cfg, from_scratch, resume),
        Command::Generate { cfg, task, acoustic } => generate(&cfg, task.into(), acoustic),
        Command::Eval { cfg, task, checkpoint, unconditional, oracle } => {
            eval(&cfg, task.into(), checkpoint, unconditional, oracle)
        }
        Command::InspectCkpt { path } => inspect(&path),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
