use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ufa::decode_eval::{read_reports, write_reports, EvalContext, MetricReport};
use ufa::harness::{generate_artifacts, render_report, train_tokenizer_artifact, ExperimentConfig, Workspace, PRETRAIN_TASKS};
use ufa::model::ModelParameters;
use ufa::{Error, Result};

#[derive(Parser)]
#[command(name = "ufa", version, about = "Knowledge-prompt pre-training for customer-service dialogue")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the configured seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts, checkpoints and reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the weak pre-training corpus, the gold corpus and sentence pairs.
    GenCorpus(Common),
    /// Train the subword tokenizer on the pre-training corpus.
    TrainTokenizer(Common),
    /// Span-denoising pre-training.
    PretrainDenoise(Common),
    /// Knowledge-prompt multi-task pre-training.
    PretrainUfa(Common),
    /// Fine-tune the configured model variant on each configured task.
    Finetune(Common),
    /// Evaluate fine-tuned checkpoints on the test split.
    Evaluate(Common),
    /// Run the configured experiment end to end.
    Experiment(Common),
    /// Render the report file as tables.
    Report(Common),
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn finetuned_path(config: &ExperimentConfig, task: &str, seed: u64) -> PathBuf {
    config.checkpoint_dir().join(format!(
        "finetune-{}-{}-{}-seed{seed}.ckpt",
        config.model_variant.as_str(),
        config.prompt_variant.as_str(),
        task.replace(' ', "_")
    ))
}

fn save_model(params: &ModelParameters<f32>, path: PathBuf) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    params.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(c) => {
            let config = load_config(&c)?;
            generate_artifacts(&config)?;
            println!("wrote {}, {} and {}", config.corpus_path().display(), config.gold_path().display(), config.pairs_path().display());
        }
        Command::TrainTokenizer(c) => {
            let config = load_config(&c)?;
            let tok = train_tokenizer_artifact(&config)?;
            println!("wrote {} ({} tokens)", config.tokenizer_path().display(), tok.vocab_size());
        }
        Command::PretrainDenoise(c) => {
            let ws = Workspace::load(load_config(&c)?)?;
            let params = ws.denoise_model()?;
            save_model(&params, ws.config.checkpoint_dir().join("denoise.ckpt"))?;
        }
        Command::PretrainUfa(c) => {
            let ws = Workspace::load(load_config(&c)?)?;
            let (params, _) = ws.ufa_model(&PRETRAIN_TASKS)?;
            save_model(&params, ws.config.checkpoint_dir().join("ufa.ckpt"))?;
        }
        Command::Finetune(c) => {
            let ws = Workspace::load(load_config(&c)?)?;
            let config = &ws.config;
            for name in &config.tasks {
                let task = ws.registry.require(name)?;
                for &seed in &config.seeds {
                    let (params, id) = ws.finetune_single(config.model_variant, task, config.prompt_variant, seed)?;
                    println!("{name} seed {seed}: selected {id}");
                    save_model(&params, finetuned_path(config, name, seed))?;
                }
            }
        }
        Command::Evaluate(c) => {
            let ws = Workspace::load(load_config(&c)?)?;
            let config = &ws.config;
            let mut reports: Vec<MetricReport> = Vec::new();
            for name in &config.tasks {
                let task = ws.registry.require(name)?;
                for &seed in &config.seeds {
                    let path = finetuned_path(config, name, seed);
                    if !path.exists() {
                        return Err(Error::Orchestration(vec![format!("{} (finetune)", path.display())]));
                    }
                    let params = ModelParameters::load_expecting(&path, &ws.model_config())?;
                    let ctx = EvalContext {
                        seed,
                        checkpoint: path.display().to_string(),
                        split: "test".into(),
                        with_macro: task.builder_kind == ufa::promptkit::BuilderKind::SentencePair,
                    };
                    let mut report = ws.evaluate_params(&params, task, config.prompt_variant, &ctx)?;
                    report.experiment = "evaluate".into();
                    report.group = config.model_variant.as_str().into();
                    report.model_variant = config.model_variant.as_str().into();
                    reports.push(report);
                }
            }
            write_reports(config.report_path(), &reports)?;
            print!("{}", render_report(&reports));
        }
        Command::Experiment(c) => {
            let ws = Workspace::load(load_config(&c)?)?;
            let bundle = ws.run(ws.config.experiment)?;
            write_reports(ws.config.report_path(), &bundle.reports)?;
            for s in &bundle.stage2 {
                println!("stage-2 {}: tasks [{}] checkpoint {}", s.label, s.tasks.join(", "), s.checkpoint);
            }
            print!("{}", render_report(&bundle.reports));
        }
        Command::Report(c) => {
            let config = load_config(&c)?;
            let reports = read_reports(config.report_path())?;
            print!("{}", render_report(&reports));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
