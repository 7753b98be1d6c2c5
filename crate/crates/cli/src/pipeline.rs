//! Stage execution, resumption and report writing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::Serialize;

use avlm::decode::SamplerConfig;
use avlm::eval::{
    avsr_error_rate, classification_metrics, config_hash, contingency, controllability, generate_and_judge, perplexity,
    recognize_emotions, BayesJudge, ClassificationMetrics, ControllabilityMatrix, MetricsReport,
};
use avlm::model::{load_checkpoint, save_checkpoint, CheckpointMeta, FusionMode, Model};
use avlm::numcore::rng::{derive_seed, substream};
use avlm::synthgen::{gen_corpus, generate_samples, load_split, CorpusConfig, CorpusSummary, DialogueSample, Split, World};
use avlm::tokens::{Emotion, Task};
use avlm::training::{
    finetune, indices_by_emotion, pretrain, standalone_fusion_classifier, train_base_lm, ClassifierConfig, Modality,
    TrainConfig, TrainReport,
};

use crate::error::{PipelineError, Result};
use crate::manifest::Manifest;
use crate::plan::{EvalSettings, ExperimentPlan, Row, Stage, Suite};

pub const MODEL_DIR: &str = "model";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CORPUS_SUMMARY_FILE: &str = "summary.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| PipelineError::io(path, e))
}

/// Writes `file` into `dir` when CSV output is wanted.
fn write_csv(dir: Option<&Path>, file: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let Some(dir) = dir else { return Ok(()) };
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let path = dir.join(file);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| PipelineError::io(&path, e))
}

fn pct(x: f64) -> String {
    format!("{}", (x * 100.0).round() as i64)
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

/// Writes a corpus and its summary into `out`.
pub fn datagen(corpus: &CorpusConfig, out: &Path) -> Result<CorpusSummary> {
    let summary = gen_corpus(corpus, out)?;
    write_json(&out.join(CORPUS_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

pub fn load_data(dir: &Path, split: Split) -> Result<Vec<DialogueSample>> {
    Ok(load_split(dir, split)?)
}

pub fn save_trained(model: &Model, report: &TrainReport, stage: &str, seed: u64, out: &Path) -> Result<()> {
    save_checkpoint(model, &CheckpointMeta::new(model, stage, seed), &out.join(MODEL_DIR))?;
    report.write_metrics(&out.join(METRICS_FILE))?;
    Ok(())
}

pub fn load_model(stage_dir: &Path) -> Result<Model> {
    let dir = stage_dir.join(MODEL_DIR);
    let dir = if dir.exists() { dir } else { stage_dir.to_path_buf() };
    Ok(load_checkpoint(&dir)?.0)
}

/// Trains the base speech LM from `plan.base_corpus` under `plan.base_seed`.
pub fn train_base(plan: &ExperimentPlan) -> Result<(Model, TrainReport)> {
    let corpus = CorpusConfig {
        seed: derive_seed(plan.base_seed, "base-corpus", 0),
        ..plan.base_corpus.clone()
    };
    let (samples, _) = generate_samples(&corpus)?;
    let train: Vec<DialogueSample> = samples.into_iter().filter(|(s, _)| *s == Split::Train).map(|(_, x)| x).collect();
    let mut model = Model::new(plan.model.base_config(), derive_seed(plan.base_seed, "base-init", 0))?;
    let cfg = TrainConfig {
        seed: derive_seed(plan.base_seed, "base-train", 0),
        fusion_mode: None,
        ..plan.base_train.clone()
    };
    let report = train_base_lm(&mut model, &train, &cfg)?;
    Ok((model, report))
}

fn limit<T>(v: &[T], n: Option<usize>) -> &[T] {
    &v[..n.map_or(v.len(), |n| n.min(v.len()))]
}

/// Key material for a stage: its definition, the settings it reads and
/// the content hashes of its inputs.
#[derive(Serialize)]
struct StageKey<'a> {
    stage: &'a Stage,
    seed: Option<u64>,
    settings: serde_json::Value,
    inputs: Vec<(String, String)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageStatus {
    pub name: String,
    pub config_hash: String,
    pub resumed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub preset: String,
    pub seed: u64,
    pub stages: Vec<StageStatus>,
    /// Headline metrics per report stage.
    pub reports: BTreeMap<String, BTreeMap<String, f64>>,
}

pub struct Pipeline {
    pub plan: ExperimentPlan,
    pub root: PathBuf,
    /// Print one line per stage to stderr.
    pub verbose: bool,
}

impl Pipeline {
    pub fn new(plan: ExperimentPlan, root: impl Into<PathBuf>) -> Result<Self> {
        plan.check()?;
        Ok(Self {
            plan,
            root: root.into(),
            verbose: false,
        })
    }

    fn key(&self, stage: &Stage, manifest: &Manifest) -> Result<String> {
        let p = &self.plan;
        let (seed, settings) = match stage {
            Stage::Datagen { .. } => (Some(p.seed), serde_json::Value::Null),
            Stage::BaseLm { .. } => (
                None,
                serde_json::json!({
                    "base_seed": p.base_seed,
                    "model": p.model.base_config(),
                    "corpus": p.base_corpus,
                    "train": p.base_train,
                }),
            ),
            Stage::Pretrain { .. } => (Some(p.seed), serde_json::json!({"model": p.model, "train": p.pretrain})),
            Stage::Finetune { .. } => (
                Some(p.seed),
                serde_json::json!({"train": p.finetune, "limit": p.finetune_limit}),
            ),
            Stage::Eval { .. } => (Some(p.seed), serde_json::to_value(&p.eval)?),
        };
        let inputs = stage.inputs().iter().flat_map(|s| manifest.stage_digest(s)).collect();
        Ok(config_hash(&StageKey {
            stage,
            seed,
            settings,
            inputs,
        })?)
    }

    /// Runs every stage not already current in `MANIFEST.json`.
    pub fn run(&self) -> Result<RunSummary> {
        fs::create_dir_all(&self.root).map_err(|e| PipelineError::io(&self.root, e))?;
        let mut manifest = Manifest::load(&self.root)?;
        let mut summary = RunSummary {
            preset: self.plan.preset.clone(),
            seed: self.plan.seed,
            stages: Vec::new(),
            reports: BTreeMap::new(),
        };
        for stage in &self.plan.stages {
            let name = stage.name().to_string();
            for input in stage.inputs() {
                manifest.verify_stage(&self.root, input).map_err(|e| match e {
                    PipelineError::MissingUpstream { needs, .. } => PipelineError::MissingUpstream {
                        stage: name.clone(),
                        needs,
                    },
                    other => other,
                })?;
            }
            let key = self.key(stage, &manifest)?;
            let resumed = manifest.is_current(&self.root, &name, &key)?;
            if !resumed {
                if self.verbose {
                    eprintln!("[{}] running {name}", self.plan.preset);
                }
                let dir = self.root.join(&name);
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
                }
                fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
                self.execute(stage, &dir).map_err(|e| PipelineError::Stage {
                    stage: name.clone(),
                    source: Box::new(e),
                })?;
                let seed = match stage {
                    Stage::BaseLm { .. } => self.plan.base_seed,
                    _ => self.plan.seed,
                };
                manifest.record_stage(&self.root, &name, &key, seed)?;
                manifest.save(&self.root)?;
            } else if self.verbose {
                eprintln!("[{}] {name} is current", self.plan.preset);
            }
            if let Stage::Eval { .. } = stage {
                let text = fs::read_to_string(self.root.join(&name).join(REPORT_FILE))
                    .map_err(|e| PipelineError::io(self.root.join(&name), e))?;
                let report: MetricsReport = serde_json::from_str(&text)?;
                summary.reports.insert(name.clone(), report.metrics);
            }
            summary.stages.push(StageStatus {
                name,
                config_hash: key,
                resumed,
            });
        }
        manifest.save(&self.root)?;
        write_json(&self.root.join(SUMMARY_FILE), &summary)?;
        Ok(summary)
    }

    fn dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    fn execute(&self, stage: &Stage, out: &Path) -> Result<()> {
        let p = &self.plan;
        match stage {
            Stage::Datagen { name, corpus } => {
                let corpus = CorpusConfig {
                    seed: derive_seed(p.seed, name, 0),
                    ..corpus.clone()
                };
                datagen(&corpus, out)?;
            }
            Stage::BaseLm { name } => {
                let (model, report) = train_base(p)?;
                save_trained(&model, &report, name, p.base_seed, out)?;
            }
            Stage::Pretrain {
                name,
                base,
                data,
                fusion,
                train_mask,
                infill_ratio,
            } => {
                let base = load_model(&self.dir(base))?;
                let train = load_data(&self.dir(data), Split::Train)?;
                let mut model = base.reconfigure(p.model.config(*fusion, *infill_ratio), derive_seed(p.seed, name, 0))?;
                let cfg = TrainConfig {
                    seed: derive_seed(p.seed, name, 1),
                    fusion_mode: *fusion,
                    train_mask_ratio: *train_mask,
                    ..p.pretrain.clone()
                };
                let report = pretrain(&mut model, &train, &cfg)?;
                save_trained(&model, &report, name, p.seed, out)?;
            }
            Stage::Finetune { name, from, data, task } => {
                let mut model = load_model(&self.dir(from))?;
                let train = load_data(&self.dir(data), Split::Train)?;
                let cfg = TrainConfig {
                    seed: derive_seed(p.seed, name, 1),
                    fusion_mode: model.config().fusion_mode(),
                    ..p.finetune.clone()
                };
                let report = finetune(&mut model, limit(&train, p.finetune_limit), &cfg, *task)?;
                save_trained(&model, &report, name, p.seed, out)?;
            }
            Stage::Eval { name, suite, data, rows } => {
                let models = rows
                    .iter()
                    .map(|r| Ok((r.clone(), load_model(&self.dir(&r.stage))?)))
                    .collect::<Result<Vec<_>>>()?;
                let ctx = EvalContext {
                    data: &self.dir(data),
                    settings: &p.eval,
                    seed: derive_seed(p.seed, name, 0),
                    task: name,
                    config_hash: config_hash(stage)?,
                };
                let report = run_suite(*suite, &ctx, &models, Some(out))?;
                write_json(&out.join(REPORT_FILE), &report)?;
            }
        }
        Ok(())
    }
}

pub struct EvalContext<'a> {
    pub data: &'a Path,
    pub settings: &'a EvalSettings,
    pub seed: u64,
    pub task: &'a str,
    pub config_hash: String,
}

impl EvalContext<'_> {
    fn report(&self) -> MetricsReport {
        MetricsReport {
            task: self.task.to_string(),
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            metrics: BTreeMap::new(),
            per_class: BTreeMap::new(),
            confusion: BTreeMap::new(),
        }
    }

    fn test(&self) -> Result<Vec<DialogueSample>> {
        let test = load_data(self.data, Split::Test)?;
        Ok(limit(&test, self.settings.test_limit).to_vec())
    }
}

/// Runs one evaluation suite, writing its CSV tables into `out` if given.
pub fn run_suite(suite: Suite, ctx: &EvalContext, models: &[(Row, Model)], out: Option<&Path>) -> Result<MetricsReport> {
    if suite != Suite::Contingency && models.is_empty() {
        return Err(PipelineError::Plan(format!("suite {suite:?} needs at least one model")));
    }
    let report = match suite {
        Suite::Ppl => ppl_suite(ctx, models, out)?,
        Suite::Avsr => avsr_suite(ctx, models, out)?,
        Suite::Emotion => emotion_suite(ctx, models, out)?,
        Suite::Controllability => controllability_suite(ctx, models, out)?,
        Suite::Contingency => contingency_suite(ctx, out)?,
    };
    check_report(&report)?;
    Ok(report)
}

fn ppl_suite(ctx: &EvalContext, models: &[(Row, Model)], out: Option<&Path>) -> Result<MetricsReport> {
    let test = ctx.test()?;
    let mut report = ctx.report();
    let mut header = vec!["model".to_string()];
    header.extend(ctx.settings.mask_grid.iter().map(|&m| format!("mask{}", pct(m))));
    let mut rows = Vec::new();
    for (row, model) in models {
        let mut line = vec![row.label.clone()];
        let mut last = 0.0;
        for &m in &ctx.settings.mask_grid {
            let ppl = perplexity(model, &test, m, ctx.seed)?;
            if !ppl.is_finite() || ppl < 1.0 {
                return Err(PipelineError::Invariant(format!("{} perplexity {ppl} at mask {m}", row.label)));
            }
            if ppl < last - 1e-9 && ctx.settings.mask_grid.windows(2).all(|w| w[0] <= w[1]) {
                // Nested masks normally make this monotone; record rather than fail.
                report.metrics.insert(format!("{}.nonmonotone_at_mask{}", row.label, pct(m)), 1.0);
            }
            last = ppl;
            report.metrics.insert(format!("{}.ppl.mask{}", row.label, pct(m)), ppl);
            line.push(fmt(ppl));
        }
        rows.push(line);
    }
    write_csv(out, "ppl.csv", &header, &rows)?;
    Ok(report)
}

fn avsr_suite(ctx: &EvalContext, models: &[(Row, Model)], out: Option<&Path>) -> Result<MetricsReport> {
    let test = ctx.test()?;
    let mut report = ctx.report();
    let mut conditions = vec![("clean".to_string(), 0.0, 0.0)];
    conditions.extend(ctx.settings.corruption_grid.iter().map(|&c| (format!("corrupt{}", pct(c)), c, 0.0)));
    conditions.extend(
        ctx.settings
            .mask_grid
            .iter()
            .filter(|&&m| m > 0.0)
            .map(|&m| (format!("mask{}", pct(m)), 0.0, m)),
    );
    let mut header = vec!["model".to_string()];
    header.extend(conditions.iter().map(|c| c.0.clone()));
    let mut rows = Vec::new();
    for (row, model) in models {
        let mut line = vec![row.label.clone()];
        for (cname, corruption, mask) in &conditions {
            let ter = avsr_error_rate(model, &test, *corruption, *mask, ctx.seed)?;
            report.metrics.insert(format!("{}.ter.{cname}", row.label), ter);
            line.push(fmt(ter));
        }
        rows.push(line);
    }
    write_csv(out, "token_error_rate.csv", &header, &rows)?;
    Ok(report)
}

fn judge_for(ctx: &EvalContext) -> Result<BayesJudge> {
    let corpus: CorpusConfig = {
        let path = ctx.data.join(avlm::synthgen::CORPUS_CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        serde_json::from_str(&text)?
    };
    Ok(BayesJudge::new(&World::new(corpus.vocab), corpus.response_audio_strength))
}

fn class_row(label: &str, task: &str, slice: &str, m: &ClassificationMetrics) -> Vec<String> {
    vec![
        label.to_string(),
        task.to_string(),
        slice.to_string(),
        m.n.to_string(),
        fmt(m.ua),
        fmt(m.wa),
        fmt(m.macro_f1),
    ]
}

fn emotion_suite(ctx: &EvalContext, models: &[(Row, Model)], out: Option<&Path>) -> Result<MetricsReport> {
    let test = ctx.test()?;
    let judge = judge_for(ctx)?;
    let labels: Vec<Emotion> = test.iter().map(|s| s.emotion).collect();
    let weak: Vec<usize> = (0..test.len()).filter(|&i| test[i].weak_audio).collect();
    let mut report = ctx.report();
    let header = ["model", "task", "slice", "n", "ua", "wa", "macro_f1"].map(String::from);
    let mut rows = Vec::new();
    let mut per_class = Vec::new();
    for (row, model) in models {
        let recognized = recognize_emotions(model, &test, ctx.seed)?;
        let sampler = SamplerConfig {
            seed: ctx.seed,
            ..ctx.settings.sampler.clone()
        };
        let judged: Vec<Emotion> = generate_and_judge(model, &test, &judge, &sampler)?
            .into_iter()
            .map(|(_, e)| e)
            .collect();
        for (task, preds) in [("recognition", &recognized), ("generation", &judged)] {
            let all = classification_metrics(preds, &labels)?;
            let key = format!("{}.{task}", row.label);
            report.add_classification(&format!("{key}.all"), &all);
            rows.push(class_row(&row.label, task, "all", &all));
            if task == "recognition" {
                for (e, f1) in &all.per_class_f1 {
                    per_class.push(vec![row.label.clone(), e.name().to_string(), fmt(*f1)]);
                }
            }
            if !weak.is_empty() {
                let p: Vec<Emotion> = weak.iter().map(|&i| preds[i]).collect();
                let l: Vec<Emotion> = weak.iter().map(|&i| labels[i]).collect();
                let m = classification_metrics(&p, &l)?;
                report.add_classification(&format!("{key}.weak_audio"), &m);
                rows.push(class_row(&row.label, task, "weak_audio", &m));
            }
        }
    }
    write_csv(out, "emotion.csv", &header, &rows)?;
    write_csv(out, "per_class_f1.csv",
        &["model", "emotion", "f1"].map(String::from),
        &per_class,
    )?;
    Ok(report)
}

/// One training sample per emotion, drawn with the suite seed.
pub fn pick_demos(train: &[DialogueSample], seed: u64) -> Result<Vec<&DialogueSample>> {
    let mut rng = substream(seed, "demos", 0);
    indices_by_emotion(train)
        .iter()
        .map(|idx| {
            idx.choose(&mut rng)
                .map(|&i| &train[i])
                .ok_or_else(|| PipelineError::Plan("training split lacks an emotion class".into()))
        })
        .collect()
}

fn heatmap_rows(mode: &str, m: &ControllabilityMatrix) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for o in Emotion::ALL {
        for f in Emotion::ALL {
            if o == f {
                continue;
            }
            let (c, a) = (m.counts[o.index()][f.index()], m.attempts[o.index()][f.index()]);
            rows.push(vec![
                mode.to_string(),
                o.name().to_string(),
                f.name().to_string(),
                c.to_string(),
                a.to_string(),
                fmt(if a == 0 { 0.0 } else { c as f64 / a as f64 }),
            ]);
        }
    }
    rows
}

fn controllability_suite(ctx: &EvalContext, models: &[(Row, Model)], out: Option<&Path>) -> Result<MetricsReport> {
    let all_test = load_data(ctx.data, Split::Test)?;
    let test = limit(&all_test, Some(ctx.settings.controllability_samples));
    let train = load_data(ctx.data, Split::Train)?;
    let demos = pick_demos(&train, ctx.seed)?;
    let judge = judge_for(ctx)?;
    let sampler = SamplerConfig {
        seed: ctx.seed,
        ..ctx.settings.sampler.clone()
    };
    let mut report = ctx.report();
    let mut rows = Vec::new();
    for (row, model) in models {
        for (mode, d) in [("zero_shot", &[][..]), ("icl", &demos[..])] {
            let m = controllability(model, test, d, &judge, &sampler)?;
            for o in 0..Emotion::COUNT {
                for f in 0..Emotion::COUNT {
                    if m.counts[o][f] > m.attempts[o][f] || (o == f && m.attempts[o][f] > 0) {
                        return Err(PipelineError::Invariant(format!("controllability cell ({o}, {f})")));
                    }
                }
            }
            report.metrics.insert(format!("{}.{mode}.successes", row.label), m.successes() as f64);
            report.metrics.insert(format!("{}.{mode}.attempts", row.label), m.total_attempts() as f64);
            report.confusion.insert(format!("{}.{mode}", row.label), m.counts);
            let mut r = heatmap_rows(mode, &m);
            for line in &mut r {
                line.insert(0, row.label.clone());
            }
            rows.extend(r);
        }
    }
    write_csv(out, "controllability.csv",
        &["model", "prompting", "original", "forced", "count", "attempts", "rate"].map(String::from),
        &rows,
    )?;
    Ok(report)
}

fn contingency_suite(ctx: &EvalContext, out: Option<&Path>) -> Result<MetricsReport> {
    let mut train = load_data(ctx.data, Split::Train)?;
    train.extend(load_data(ctx.data, Split::Dev)?);
    let test = ctx.test()?;
    let vocab = avlm::synthgen::load_vocab(ctx.data)?;
    let cfg = ClassifierConfig {
        seed: ctx.seed,
        ..ctx.settings.classifier.clone()
    };
    let mut report = ctx.report();
    let mut outcomes = BTreeMap::new();
    let mut rows = Vec::new();
    for m in Modality::ALL {
        let o = standalone_fusion_classifier(vocab, &train, &test, m, &cfg)?;
        report.add_classification(m.name(), &o.metrics);
        rows.push(vec![
            m.name().to_string(),
            fmt(o.metrics.ua),
            fmt(o.metrics.wa),
            fmt(o.metrics.macro_f1),
        ]);
        outcomes.insert(m, o);
    }
    write_csv(out, "classifiers.csv", &["modality", "ua", "wa", "macro_f1"].map(String::from), &rows)?;
    let c = contingency(
        &outcomes[&Modality::Both].correct,
        &outcomes[&Modality::Speech].correct,
        &outcomes[&Modality::Visual].correct,
    )?;
    if c.cells.values().sum::<usize>() != test.len() {
        return Err(PipelineError::Invariant("contingency cells do not partition the test set".into()));
    }
    let mut cells = Vec::new();
    for (k, v) in &c.cells {
        report.metrics.insert(format!("contingency.{k}"), *v as f64);
        let b = |i: usize| (k.as_bytes()[i] == b'1').to_string();
        cells.push(vec![b(1), b(3), b(5), v.to_string()]);
    }
    report.metrics.insert("contingency.agrees_with_single".into(), c.agrees_with_single() as f64);
    report.metrics.insert("contingency.fusion_only".into(), c.fusion_only() as f64);
    write_csv(out, "contingency.csv",
        &["fusion_correct", "speech_correct", "visual_correct", "count"].map(String::from),
        &cells,
    )?;
    Ok(report)
}

/// Rates lie in `[0, 1]` and confusion rows sum to class counts.
pub fn check_report(report: &MetricsReport) -> Result<()> {
    for (k, v) in &report.metrics {
        let bounded = [".ua", ".wa", ".f1", ".rate"].iter().any(|s| k.ends_with(s));
        if !v.is_finite() || (bounded && !(0.0..=1.0).contains(v)) {
            return Err(PipelineError::Invariant(format!("metric {k} = {v}")));
        }
    }
    for (k, f1s) in &report.per_class {
        if f1s.values().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(PipelineError::Invariant(format!("per-class F1 of {k} out of range")));
        }
    }
    Ok(())
}

/// Checkpoint fusion mode as a display name.
pub fn mode_name(mode: Option<FusionMode>) -> &'static str {
    mode.map_or("speech-only", FusionMode::name)
}

/// Convenience for commands: the task a fine-tune stage name implies.
pub fn parse_task(s: &str) -> Result<Task> {
    match s {
        "avsr" => Ok(Task::Avsr),
        "generate" | "emotion" => Ok(Task::Generate),
        other => Err(PipelineError::Plan(format!("unknown task `{other}`"))),
    }
}
