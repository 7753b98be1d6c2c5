use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use avlm::decode::{build_icl_prompt, Generator, SamplerConfig};
use avlm::eval::{config_hash, BayesJudge};
use avlm::model::FusionMode;
use avlm::numcore::rng::derive_seed;
use avlm::synthgen::{CorpusConfig, Split, World, CORPUS_CONFIG_FILE};
use avlm::tokens::Emotion;
use avlm::training::{finetune, pretrain, TrainConfig};
use avlm_cli::pipeline::{self, EvalContext};
use avlm_cli::plan::{complementary_corpus, EvalSettings, ExperimentPlan, Row, Scale, Suite};
use avlm_cli::{Pipeline, MANIFEST_FILE};

#[derive(Parser)]
#[command(name = "avlm", version, about = "Desk-scale audio-visual speech-token language modeling")]
struct Cli {
    /// Run seed; every random choice derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON configuration for the command (corpus, training, eval or plan).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory or file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fusion {
    None,
    Concat,
    Infill,
    Prefix,
}

impl Fusion {
    fn mode(self) -> Option<FusionMode> {
        match self {
            Fusion::None => None,
            Fusion::Concat => Some(FusionMode::Concat),
            Fusion::Infill => Some(FusionMode::Infill),
            Fusion::Prefix => Some(FusionMode::Prefix),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Ppl,
    Avsr,
    Emotion,
    Controllability,
    Contingency,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Avsr,
    Generate,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Datagen {
        #[arg(long)]
        samples: Option<usize>,
        /// Visual carries emotion only on weak-audio clips.
        #[arg(long)]
        complementary: bool,
    },
    /// Adapt a base speech LM to a fusion mode on the corpus' training split.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// Base checkpoint; trained from scratch into `<out>/base` when absent.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Fusion::Prefix)]
        fusion: Fusion,
        #[arg(long, default_value_t = 0.0)]
        mask: f64,
        #[arg(long)]
        infill_ratio: Option<f64>,
    },
    /// Prompt fine-tuning of a pre-trained checkpoint.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Train on at most this many samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Sample speech responses for test prompts as JSON lines.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Force this emotion into every prompt instead of predicting it.
        #[arg(long)]
        emotion: Option<String>,
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
    /// Run one evaluation suite.
    Eval {
        /// Checkpoint directories, optionally labelled `label=path`.
        #[arg(long)]
        ckpt: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        suite: SuiteArg,
        /// Write plot-ready CSV tables next to the report.
        #[arg(long)]
        emit_csv: bool,
    },
    /// Run a whole experiment plan; completed stages are reused.
    Reproduce {
        #[arg(long)]
        preset: String,
        #[arg(long, value_enum, default_value_t = ScaleArg::Desk)]
        scale: ScaleArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Smoke,
}

fn read_config<T: DeserializeOwned>(path: &Option<PathBuf>, default: T) -> Result<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(default),
    }
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().context("--out is required")
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Datagen { samples, complementary } => {
            let base = if *complementary { complementary_corpus() } else { CorpusConfig::default() };
            let mut corpus: CorpusConfig = read_config(&cli.config, base)?;
            corpus.seed = cli.seed;
            if let Some(n) = samples {
                corpus.n_samples = *n;
            }
            let summary = pipeline::datagen(&corpus, out_dir(&cli)?)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Pretrain {
            data,
            base,
            fusion,
            mask,
            infill_ratio,
        } => {
            let out = out_dir(&cli)?;
            let plan = ExperimentPlan {
                seed: cli.seed,
                pretrain: read_config(&cli.config, ExperimentPlan::default().pretrain)?,
                ..Default::default()
            };
            let base_model = match base {
                Some(dir) => pipeline::load_model(dir)?,
                None => {
                    let mut plan = plan.clone();
                    plan.base_corpus = serde_json::from_str(
                        &fs::read_to_string(data.join(CORPUS_CONFIG_FILE)).context("reading corpus config")?,
                    )?;
                    plan.model.lm.vocab = plan.base_corpus.vocab;
                    let (m, report) = pipeline::train_base(&plan)?;
                    pipeline::save_trained(&m, &report, "base", plan.base_seed, &out.join("base"))?;
                    m
                }
            };
            let train = pipeline::load_data(data, Split::Train)?;
            let mut settings = plan.model.clone();
            settings.lm = base_model.config().lm.clone();
            let mut model = base_model.reconfigure(settings.config(fusion.mode(), *infill_ratio), derive_seed(cli.seed, "pretrain", 0))?;
            let cfg = TrainConfig {
                seed: derive_seed(cli.seed, "pretrain", 1),
                fusion_mode: fusion.mode(),
                train_mask_ratio: *mask,
                ..plan.pretrain
            };
            let report = pretrain(&mut model, &train, &cfg)?;
            pipeline::save_trained(&model, &report, "pretrain", cli.seed, out)?;
            let (a, b) = report.head_tail(20);
            println!("pretrained {} steps, loss {a:.4} -> {b:.4}", report.steps);
        }
        Command::Finetune { ckpt, data, task, limit } => {
            let mut model = pipeline::load_model(ckpt)?;
            let defaults = ExperimentPlan::default();
            let cfg = TrainConfig {
                seed: derive_seed(cli.seed, "finetune", 1),
                fusion_mode: model.config().fusion_mode(),
                ..read_config(&cli.config, defaults.finetune)?
            };
            let train = pipeline::load_data(data, Split::Train)?;
            let n = limit.or(defaults.finetune_limit).map_or(train.len(), |n| n.min(train.len()));
            let task = match task {
                TaskArg::Avsr => avlm::tokens::Task::Avsr,
                TaskArg::Generate => avlm::tokens::Task::Generate,
            };
            let report = finetune(&mut model, &train[..n], &cfg, task)?;
            pipeline::save_trained(&model, &report, "finetune", cli.seed, out_dir(&cli)?)?;
            let (a, b) = report.head_tail(20);
            println!("fine-tuned {} steps, loss {a:.4} -> {b:.4}", report.steps);
        }
        Command::Generate { ckpt, data, emotion, n } => {
            let model = pipeline::load_model(ckpt)?;
            let forced = emotion.as_deref().map(Emotion::parse).transpose()?;
            let sampler: SamplerConfig = read_config(
                &cli.config,
                SamplerConfig {
                    seed: cli.seed,
                    ..EvalSettings::default().sampler
                },
            )?;
            let corpus: CorpusConfig = serde_json::from_str(&fs::read_to_string(data.join(CORPUS_CONFIG_FILE))?)?;
            let judge = BayesJudge::new(&World::new(corpus.vocab), corpus.response_audio_strength);
            let test = pipeline::load_data(data, Split::Test)?;
            let gen = Generator::new(&model)?;
            let mut lines = Vec::new();
            for s in test.iter().take(*n) {
                let seed = derive_seed(sampler.seed, &s.id, 0);
                let (layout, clips) = build_icl_prompt(&model, &[], s, forced, seed)?;
                let slot = layout.token(layout.emotion_slot().context("prompt has no emotion slot")?);
                let prompted = slot.and_then(|t| corpus.vocab.emotion_of(t));
                let out = gen.respond(&layout, &clips, &sampler, seed)?;
                lines.push(serde_json::json!({
                    "id": s.id,
                    "emotion": s.emotion,
                    "prompted": prompted,
                    "judged": judge.judge(&out),
                    "tokens": out.tokens,
                }));
            }
            let text: String = lines.iter().map(|l| l.to_string() + "\n").collect();
            match &cli.out {
                Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
        Command::Eval {
            ckpt,
            data,
            suite,
            emit_csv,
        } => {
            let settings: EvalSettings = read_config(&cli.config, EvalSettings::default())?;
            let suite = match suite {
                SuiteArg::Ppl => Suite::Ppl,
                SuiteArg::Avsr => Suite::Avsr,
                SuiteArg::Emotion => Suite::Emotion,
                SuiteArg::Controllability => Suite::Controllability,
                SuiteArg::Contingency => Suite::Contingency,
            };
            let models = ckpt
                .iter()
                .map(|c| {
                    let (label, path) = c.split_once('=').unwrap_or((c.as_str(), c.as_str()));
                    let row = Row {
                        label: label.to_string(),
                        stage: path.to_string(),
                    };
                    Ok((row, pipeline::load_model(Path::new(path))?))
                })
                .collect::<Result<Vec<_>>>()?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("report.json"));
            let csv_dir = out.parent().map(|p| if p.as_os_str().is_empty() { Path::new(".") } else { p });
            let ctx = EvalContext {
                data,
                settings: &settings,
                seed: cli.seed,
                task: "eval",
                config_hash: config_hash(&(&settings, ckpt))?,
            };
            let report = pipeline::run_suite(suite, &ctx, &models, if *emit_csv { csv_dir } else { None })?;
            fs::write(&out, report.to_json()? + "\n").with_context(|| format!("writing {}", out.display()))?;
            println!("{}", serde_json::to_string_pretty(&report.metrics)?);
        }
        Command::Reproduce { preset, scale } => {
            let scale = match scale {
                ScaleArg::Desk => Scale::Desk,
                ScaleArg::Smoke => Scale::Smoke,
            };
            let plan = match &cli.config {
                Some(_) => read_config(&cli.config, ExperimentPlan::default())?,
                None => ExperimentPlan::preset(preset, cli.seed, scale)?,
            };
            let out = out_dir(&cli)?;
            let mut p = Pipeline::new(plan, out)?;
            p.verbose = true;
            let summary = p.run()?;
            for s in &summary.stages {
                println!("{:<28} {} {}", s.name, &s.config_hash[..12], if s.resumed { "reused" } else { "ran" });
            }
            println!("manifest: {}", out.join(MANIFEST_FILE).display());
            if summary.stages.is_empty() {
                bail!("plan has no stages");
            }
        }
    }
    Ok(())
}
