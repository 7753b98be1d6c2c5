//! Experiment plans: ordered stages plus the configuration they share.

use serde::{Deserialize, Serialize};

use avlm::decode::SamplerConfig;
use avlm::model::{FusionConfig, FusionMode, LmConfig, LoraConfig, ModelConfig};
use avlm::synthgen::CorpusConfig;
use avlm::tokens::{Task, Vocab};
use avlm::training::{ClassifierConfig, TrainConfig};

use crate::error::{PipelineError, Result};

pub const PRESETS: [&str; 7] = ["smoke", "table2", "table3", "table4", "table5", "fig4", "fig5"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Full desk-scale grid.
    Desk,
    /// Tiny corpus and models; exercises every stage in seconds.
    Smoke,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Ppl,
    Avsr,
    Emotion,
    Controllability,
    Contingency,
}

impl Suite {
    pub fn parse(s: &str) -> Result<Suite> {
        Ok(match s {
            "ppl" => Suite::Ppl,
            "avsr" => Suite::Avsr,
            "emotion" => Suite::Emotion,
            "controllability" => Suite::Controllability,
            "contingency" => Suite::Contingency,
            other => return Err(PipelineError::Plan(format!("unknown suite `{other}`"))),
        })
    }
}

/// A model evaluated under a display label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub stage: String,
}

/// Stage names double as output directories below the run root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stage {
    Datagen {
        name: String,
        corpus: CorpusConfig,
    },
    /// Plain speech LM standing in for the frozen pretrained base. Its
    /// corpus and initialization follow `base_seed`, not the plan seed.
    BaseLm {
        name: String,
    },
    Pretrain {
        name: String,
        base: String,
        data: String,
        fusion: Option<FusionMode>,
        train_mask: f64,
        /// Overrides the infill replacement ratio.
        infill_ratio: Option<f64>,
    },
    Finetune {
        name: String,
        from: String,
        data: String,
        task: Task,
    },
    Eval {
        name: String,
        suite: Suite,
        data: String,
        rows: Vec<Row>,
    },
}

impl Stage {
    pub fn name(&self) -> &str {
        match self {
            Stage::Datagen { name, .. }
            | Stage::BaseLm { name }
            | Stage::Pretrain { name, .. }
            | Stage::Finetune { name, .. }
            | Stage::Eval { name, .. } => name,
        }
    }

    /// Stages whose artifacts this one reads.
    pub fn inputs(&self) -> Vec<&str> {
        match self {
            Stage::Datagen { .. } | Stage::BaseLm { .. } => vec![],
            Stage::Pretrain { base, data, .. } => vec![base, data],
            Stage::Finetune { from, data, .. } => vec![from, data],
            Stage::Eval { data, rows, .. } => std::iter::once(data.as_str())
                .chain(rows.iter().map(|r| r.stage.as_str()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub lm: LmConfig,
    pub lora: LoraConfig,
    /// Template; each stage sets the mode.
    pub fusion: FusionConfig,
    pub d_emotion: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            lm: LmConfig::desk(),
            lora: LoraConfig {
                rank: 8,
                alpha: 16.0,
                dropout: 0.0,
            },
            fusion: FusionConfig::desk(FusionMode::Prefix),
            d_emotion: 32,
        }
    }
}

impl ModelSettings {
    pub fn config(&self, fusion: Option<FusionMode>, infill_ratio: Option<f64>) -> ModelConfig {
        ModelConfig {
            lm: self.lm.clone(),
            lora: Some(self.lora),
            fusion: fusion.map(|mode| FusionConfig {
                mode,
                infill_ratio: infill_ratio.unwrap_or(self.fusion.infill_ratio),
                ..self.fusion
            }),
            d_emotion: self.d_emotion,
        }
    }

    pub fn base_config(&self) -> ModelConfig {
        ModelConfig {
            lm: self.lm.clone(),
            lora: None,
            fusion: None,
            d_emotion: self.d_emotion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Evaluate on at most this many test samples.
    pub test_limit: Option<usize>,
    pub mask_grid: Vec<f64>,
    pub corruption_grid: Vec<f64>,
    /// Samples per controllability run; each yields three forced prompts.
    pub controllability_samples: usize,
    pub sampler: SamplerConfig,
    pub classifier: ClassifierConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            test_limit: None,
            mask_grid: avlm::eval::MASK_GRID.to_vec(),
            corruption_grid: avlm::eval::CORRUPTION_GRID.to_vec(),
            controllability_samples: 80,
            sampler: SamplerConfig {
                max_new_tokens: 120,
                ..SamplerConfig::default()
            },
            classifier: ClassifierConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub preset: String,
    pub seed: u64,
    pub base_seed: u64,
    pub model: ModelSettings,
    /// Corpus the base LM is trained on (its seed is replaced).
    pub base_corpus: CorpusConfig,
    pub base_train: TrainConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Fine-tune on at most this many training samples.
    pub finetune_limit: Option<usize>,
    pub eval: EvalSettings,
    pub stages: Vec<Stage>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            preset: "custom".into(),
            seed: 0,
            base_seed: 0,
            model: ModelSettings::default(),
            base_corpus: CorpusConfig::default(),
            base_train: TrainConfig {
                lr_base: 1e-2,
                batch_size: 8,
                grad_accum: 1,
                epochs: 4,
                ..TrainConfig::desk()
            },
            pretrain: TrainConfig::desk(),
            finetune: TrainConfig {
                icl_rate: 0.2,
                batch_size: 4,
                grad_accum: 1,
                epochs: 2,
                ..TrainConfig::desk()
            },
            finetune_limit: Some(1200),
            eval: EvalSettings::default(),
            stages: Vec::new(),
        }
    }
}

fn datagen(name: &str, corpus: CorpusConfig) -> Stage {
    Stage::Datagen {
        name: name.into(),
        corpus,
    }
}

fn pretrain(name: &str, fusion: Option<FusionMode>, train_mask: f64) -> Stage {
    Stage::Pretrain {
        name: format!("pretrain/{name}"),
        base: "base".into(),
        data: "data".into(),
        fusion,
        train_mask,
        infill_ratio: None,
    }
}

fn finetune(name: &str, from: &str, task: Task) -> Stage {
    Stage::Finetune {
        name: format!("finetune/{name}"),
        from: format!("pretrain/{from}"),
        data: "data".into(),
        task,
    }
}

fn eval(name: &str, suite: Suite, rows: &[(&str, &str)]) -> Stage {
    Stage::Eval {
        name: format!("reports/{name}"),
        suite,
        data: "data".into(),
        rows: rows
            .iter()
            .map(|&(label, stage)| Row {
                label: label.into(),
                stage: stage.into(),
            })
            .collect(),
    }
}

/// Visual carries emotion only on weak-audio clips.
pub fn complementary_corpus() -> CorpusConfig {
    CorpusConfig {
        background_visual_strength: 0.0,
        ..CorpusConfig::default()
    }
}

impl ExperimentPlan {
    pub fn preset(name: &str, seed: u64, scale: Scale) -> Result<Self> {
        let mut plan = ExperimentPlan {
            preset: name.into(),
            seed,
            ..Default::default()
        };
        let data = || datagen("data", CorpusConfig::default());
        let base = || Stage::BaseLm { name: "base".into() };
        let emotion_models = || {
            vec![
                pretrain("speech", None, 0.0),
                pretrain("prefix30", Some(FusionMode::Prefix), 0.3),
                finetune("speech-gen", "speech", Task::Generate),
                finetune("avlm-gen", "prefix30", Task::Generate),
            ]
        };
        plan.stages = match name {
            "table4" => {
                let mut infill = pretrain("infill50", Some(FusionMode::Infill), 0.0);
                if let Stage::Pretrain { infill_ratio, .. } = &mut infill {
                    *infill_ratio = Some(0.5);
                }
                let mut s = vec![data(), base(), pretrain("speech", None, 0.0), infill];
                for m in [0, 30, 50, 70] {
                    s.push(pretrain(&format!("prefix{m}"), Some(FusionMode::Prefix), m as f64 / 100.0));
                }
                s.push(eval(
                    "table4",
                    Suite::Ppl,
                    &[
                        ("speech-only", "pretrain/speech"),
                        ("infill@50", "pretrain/infill50"),
                        ("prefix@0", "pretrain/prefix0"),
                        ("prefix@30", "pretrain/prefix30"),
                        ("prefix@50", "pretrain/prefix50"),
                        ("prefix@70", "pretrain/prefix70"),
                    ],
                ));
                s
            }
            "table3" => vec![
                data(),
                base(),
                pretrain("speech", None, 0.0),
                pretrain("prefix30", Some(FusionMode::Prefix), 0.3),
                finetune("speech-avsr", "speech", Task::Avsr),
                finetune("avlm-avsr", "prefix30", Task::Avsr),
                eval(
                    "table3",
                    Suite::Avsr,
                    &[("speech-only", "finetune/speech-avsr"), ("avlm", "finetune/avlm-avsr")],
                ),
            ],
            "table5" | "fig4" => {
                let mut s = vec![data(), base()];
                s.extend(emotion_models());
                s.push(eval(
                    name,
                    Suite::Emotion,
                    &[("speech-only", "finetune/speech-gen"), ("avlm", "finetune/avlm-gen")],
                ));
                s
            }
            "fig5" => vec![
                data(),
                base(),
                pretrain("prefix30", Some(FusionMode::Prefix), 0.3),
                finetune("avlm-gen", "prefix30", Task::Generate),
                eval("fig5", Suite::Controllability, &[("avlm", "finetune/avlm-gen")]),
            ],
            "table2" => vec![
                datagen("data", complementary_corpus()),
                eval("table2", Suite::Contingency, &[]),
            ],
            "smoke" => {
                let mut s = vec![data(), base()];
                s.extend(emotion_models());
                s.push(finetune("avlm-avsr", "prefix30", Task::Avsr));
                s.push(eval(
                    "ppl",
                    Suite::Ppl,
                    &[("speech-only", "pretrain/speech"), ("prefix@30", "pretrain/prefix30")],
                ));
                s.push(eval("avsr", Suite::Avsr, &[("avlm", "finetune/avlm-avsr")]));
                s.push(eval(
                    "emotion",
                    Suite::Emotion,
                    &[("speech-only", "finetune/speech-gen"), ("avlm", "finetune/avlm-gen")],
                ));
                s.push(eval("controllability", Suite::Controllability, &[("avlm", "finetune/avlm-gen")]));
                s.push(eval("contingency", Suite::Contingency, &[]));
                s
            }
            other => return Err(PipelineError::UnknownPreset(other.into())),
        };
        if scale == Scale::Smoke || name == "smoke" {
            plan.shrink();
        }
        plan.check()?;
        Ok(plan)
    }

    /// Replaces every size and budget with a tiny one.
    pub fn shrink(&mut self) {
        let corpus = |c: &CorpusConfig| CorpusConfig {
            n_samples: 40,
            seconds: [0.4, 0.8],
            response_seconds: [0.3, 0.5],
            vocab: Vocab::new(32, 16, 16, 24).expect("valid sizes"),
            ..c.clone()
        };
        self.base_corpus = corpus(&self.base_corpus);
        for stage in &mut self.stages {
            if let Stage::Datagen { corpus: c, .. } = stage {
                *c = corpus(c);
            }
        }
        self.model = ModelSettings {
            lm: LmConfig {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                d_ff: 32,
                vocab: self.base_corpus.vocab,
                max_seq: 512,
                dropout: 0.0,
            },
            lora: LoraConfig {
                rank: 2,
                alpha: 4.0,
                dropout: 0.0,
            },
            fusion: FusionConfig {
                d_expr: 8,
                d_jaw: 4,
                d_adapter_hidden: 8,
                n_cross_layers: 1,
                d_cross_ff: 8,
                ..self.model.fusion
            },
            d_emotion: 8,
        };
        for t in [&mut self.base_train, &mut self.pretrain, &mut self.finetune] {
            t.max_steps = Some(4);
            t.batch_size = 2;
            t.grad_accum = 1;
            t.warmup_steps = 1;
        }
        self.finetune_limit = Some(16);
        self.eval.test_limit = Some(6);
        self.eval.controllability_samples = 3;
        self.eval.sampler.max_new_tokens = 16;
        self.eval.classifier.d_model = 8;
        self.eval.classifier.d_ff = 16;
        self.eval.classifier.epochs = 1;
    }

    /// Every stage name is unique and consumes only earlier stages.
    pub fn check(&self) -> Result<()> {
        let mut seen: Vec<&str> = Vec::new();
        for stage in &self.stages {
            for input in stage.inputs() {
                if !seen.contains(&input) {
                    return Err(PipelineError::MissingUpstream {
                        stage: stage.name().into(),
                        needs: input.into(),
                    });
                }
            }
            if seen.contains(&stage.name()) {
                return Err(PipelineError::Plan(format!("stage `{}` appears twice", stage.name())));
            }
            if stage.name().split('/').any(|c| c.is_empty() || c == "." || c == "..") {
                return Err(PipelineError::Plan(format!("stage name `{}` is not a clean relative path", stage.name())));
            }
            seen.push(stage.name());
        }
        if self.model.lm.vocab != self.base_corpus.vocab {
            return Err(PipelineError::Plan("model and base corpus vocabularies differ".into()));
        }
        for stage in &self.stages {
            if let Stage::Datagen { corpus, .. } = stage {
                if corpus.vocab != self.model.lm.vocab {
                    return Err(PipelineError::Plan(format!("corpus `{}` uses another vocabulary", stage.name())));
                }
            }
        }
        Ok(())
    }

    pub fn stage(&self, name: &str) -> Option<&Stage> {
        self.stages.iter().find(|s| s.name() == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_ordered() {
        for name in PRESETS {
            for scale in [Scale::Desk, Scale::Smoke] {
                let plan = ExperimentPlan::preset(name, 1, scale).unwrap();
                assert!(!plan.stages.is_empty());
                let json = serde_json::to_string(&plan).unwrap();
                assert_eq!(serde_json::from_str::<ExperimentPlan>(&json).unwrap(), plan);
            }
        }
        assert!(matches!(
            ExperimentPlan::preset("table9", 0, Scale::Desk),
            Err(PipelineError::UnknownPreset(_))
        ));
    }

    #[test]
    fn table4_grid_layout() {
        let plan = ExperimentPlan::preset("table4", 0, Scale::Desk).unwrap();
        let Some(Stage::Eval { rows, suite, .. }) = plan.stage("reports/table4") else {
            panic!("missing eval stage");
        };
        assert_eq!(*suite, Suite::Ppl);
        let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["speech-only", "infill@50", "prefix@0", "prefix@30", "prefix@50", "prefix@70"]);
        assert_eq!(plan.eval.mask_grid, [0.0, 0.1, 0.3, 0.5, 0.7]);
    }

    #[test]
    fn out_of_order_and_duplicate_stages_rejected() {
        let mut plan = ExperimentPlan::preset("fig5", 0, Scale::Smoke).unwrap();
        plan.stages.swap(1, 2);
        assert!(matches!(plan.check(), Err(PipelineError::MissingUpstream { .. })));
        let mut plan = ExperimentPlan::preset("fig5", 0, Scale::Smoke).unwrap();
        let dup = plan.stages[0].clone();
        plan.stages.push(dup);
        assert!(matches!(plan.check(), Err(PipelineError::Plan(_))));
    }
}
