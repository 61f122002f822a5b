//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::drift::DetectorConfig;
use crate::error::{Result, TameError};
use crate::experts::ExpertArchitecture;
use crate::nn::{conv_expert_specs, mlp_specs, SgdConfig};
use crate::selector::{PruneConfig, SelectorArch, SelectorConfig};

use super::stream::{parse_class_groups, StreamKind, StreamSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertKind {
    Conv,
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub stream: StreamSpec,
    pub data_dir: PathBuf,
    pub detector: DetectorConfig,
    pub sgd: SgdConfig,
    pub selector: SelectorConfig,
    pub prune: PruneConfig,
    /// Selector buffer capacity.
    pub cs: usize,
    /// Capacity of each expert's prune buffer.
    pub cp: usize,
    pub expert_kind: ExpertKind,
    pub expert_hidden: Vec<usize>,
    /// Learning-rate warm-up length of every new expert, in batches.
    pub warmup_steps: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Fill every row of the accuracy matrix, not only the final one.
    pub eval_each_segment: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            stream: StreamSpec::default(),
            data_dir: PathBuf::from("data/mnist"),
            detector: DetectorConfig::default(),
            sgd: SgdConfig::default(),
            selector: SelectorConfig {
                arch: SelectorArch::Conv,
                epochs: 20,
                max_shift: 1,
                sgd: SgdConfig {
                    batch_size: 32,
                    ..Default::default()
                },
                ..Default::default()
            },
            prune: PruneConfig {
                retrain_shift: 1,
                ..Default::default()
            },
            cs: 2500,
            cp: 1000,
            expert_kind: ExpertKind::Conv,
            expert_hidden: vec![100],
            warmup_steps: 100,
            seed: 0,
            out: None,
            eval_each_segment: true,
        }
    }
}

/// Seeds of the independent random streams of one run, all derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub stream: u64,
    pub pool: u64,
    pub buffers: u64,
    pub selector: u64,
    pub retrain: u64,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| TameError::config(format!("bad value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(TameError::config(format!(
            "bad boolean '{value}' for key '{key}'"
        ))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_limit(key: &str, value: &str) -> Result<Option<usize>> {
    match value {
        "" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn join(values: &[usize]) -> String {
    values
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    pub fn seeds(&self) -> Seeds {
        Seeds {
            stream: self.seed,
            pool: self.seed.wrapping_add(1),
            buffers: self.seed.wrapping_add(2),
            selector: self.seed.wrapping_add(3),
            retrain: self.seed.wrapping_add(4),
        }
    }

    /// A small synthetic configuration that runs in seconds.
    pub fn synthetic_default() -> Self {
        let mut cfg = ExperimentConfig {
            expert_kind: ExpertKind::Mlp,
            expert_hidden: vec![32],
            ..Default::default()
        };
        cfg.stream.kind = StreamKind::SplitSynthetic;
        cfg.stream.batch_size = 32;
        cfg.stream.epochs = 10;
        cfg.sgd.learning_rate = 0.05;
        cfg.sgd.batch_size = 32;
        cfg.selector = SelectorConfig {
            hidden: 64,
            ..Default::default()
        };
        cfg.stream.synthetic.test_per_task = 200;
        cfg
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "stream" => self.stream.kind = v.parse()?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "class_groups" => self.stream.class_groups = parse_class_groups(v)?,
            "permuted_tasks" => self.stream.permuted_tasks = parse(key, v)?,
            "sequence" => {
                let seq = parse_list(key, v)?;
                self.stream.sequence = (!seq.is_empty()).then_some(seq);
            }
            "train_limit" => self.stream.train_limit = parse_limit(key, v)?,
            "test_limit" => self.stream.test_limit = parse_limit(key, v)?,
            "synthetic_dim" => self.stream.synthetic.dim = parse(key, v)?,
            "synthetic_tasks" => self.stream.synthetic.tasks = parse(key, v)?,
            "synthetic_classes" => self.stream.synthetic.classes_per_task = parse(key, v)?,
            "task_separation" => self.stream.synthetic.task_separation = parse(key, v)?,
            "class_separation" => self.stream.synthetic.class_separation = parse(key, v)?,
            "noise" => self.stream.synthetic.noise = parse(key, v)?,
            "label_noise" => self.stream.synthetic.label_noise = parse(key, v)?,
            "train_per_task" => self.stream.synthetic.train_per_task = parse(key, v)?,
            "test_per_task" => self.stream.synthetic.test_per_task = parse(key, v)?,
            "epochs" => self.stream.epochs = parse(key, v)?,
            "batch_size" => {
                self.stream.batch_size = parse(key, v)?;
                self.sgd.batch_size = self.stream.batch_size;
            }
            "alpha" => self.detector.alpha = parse(key, v)?,
            "window" => self.detector.window_size = parse(key, v)?,
            "min_fill" => self.detector.min_fill = parse(key, v)?,
            "lr" => self.sgd.learning_rate = parse(key, v)?,
            "momentum" => self.sgd.momentum = parse(key, v)?,
            "nesterov" => self.sgd.nesterov = parse_bool(key, v)?,
            "weight_decay" => self.sgd.weight_decay = parse(key, v)?,
            "cs" => self.cs = parse(key, v)?,
            "cp" => self.cp = parse(key, v)?,
            "expert_prune" => self.prune.expert_rate = parse(key, v)?,
            "selector_prune" => self.prune.selector_rate = parse(key, v)?,
            "retrain_epochs" => self.prune.retrain_epochs = parse(key, v)?,
            "retrain_lr" => self.prune.retrain_sgd.learning_rate = parse(key, v)?,
            "retrain_momentum" => self.prune.retrain_sgd.momentum = parse(key, v)?,
            "retrain_nesterov" => self.prune.retrain_sgd.nesterov = parse_bool(key, v)?,
            "retrain_weight_decay" => self.prune.retrain_sgd.weight_decay = parse(key, v)?,
            "retrain_batch_size" => self.prune.retrain_sgd.batch_size = parse(key, v)?,
            "selector_arch" => {
                self.selector.arch = match v {
                    "mlp" => SelectorArch::Mlp,
                    "conv" => SelectorArch::Conv,
                    _ => return Err(TameError::config(format!("unknown selector_arch '{v}'"))),
                }
            }
            "selector_hidden" => self.selector.hidden = parse(key, v)?,
            "selector_epochs" => self.selector.epochs = parse(key, v)?,
            "retrain_shift" => self.prune.retrain_shift = parse(key, v)?,
            "retrain_min_steps" => self.prune.retrain_min_steps = parse(key, v)?,
            "retrain_anneal" => self.prune.retrain_anneal = parse_bool(key, v)?,
            "selector_shift" => self.selector.max_shift = parse(key, v)?,
            "selector_lr" => self.selector.sgd.learning_rate = parse(key, v)?,
            "selector_momentum" => self.selector.sgd.momentum = parse(key, v)?,
            "selector_weight_decay" => self.selector.sgd.weight_decay = parse(key, v)?,
            "selector_batch_size" => self.selector.sgd.batch_size = parse(key, v)?,
            "expert_arch" => {
                self.expert_kind = match v {
                    "conv" => ExpertKind::Conv,
                    "mlp" => ExpertKind::Mlp,
                    _ => return Err(TameError::config(format!("unknown expert_arch '{v}'"))),
                }
            }
            "expert_hidden" => self.expert_hidden = parse_list(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = (!v.is_empty()).then(|| PathBuf::from(v)),
            "eval_each_segment" => self.eval_each_segment = parse_bool(key, v)?,
            other => return Err(TameError::config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                TameError::config(format!("line {}: expected key = value", n + 1))
            })?;
            self.set(k, v)
                .map_err(|e| TameError::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Reads a config file. A relative `data_dir` is resolved against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = ExperimentConfig::parse_str(&text)?;
        if cfg.data_dir.is_relative()
            && text.lines().any(|l| l.trim_start().starts_with("data_dir"))
        {
            if let Some(parent) = path.parent() {
                cfg.data_dir = parent.join(&cfg.data_dir);
            }
        }
        Ok(cfg)
    }

    /// Every key with its current value; parses back to an equal config.
    pub fn to_kv_string(&self) -> String {
        let s = &self.stream;
        let syn = &s.synthetic;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("stream", s.kind.as_str().to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv(
            "class_groups",
            s.class_groups
                .iter()
                .map(|g| g.iter().map(usize::to_string).collect::<Vec<_>>().join("-"))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("permuted_tasks", s.permuted_tasks.to_string());
        kv(
            "sequence",
            s.sequence.as_deref().map(join).unwrap_or_default(),
        );
        let limit = |l: Option<usize>| l.map_or("none".to_string(), |n| n.to_string());
        kv("train_limit", limit(s.train_limit));
        kv("test_limit", limit(s.test_limit));
        kv("synthetic_dim", syn.dim.to_string());
        kv("synthetic_tasks", syn.tasks.to_string());
        kv("synthetic_classes", syn.classes_per_task.to_string());
        kv("task_separation", syn.task_separation.to_string());
        kv("class_separation", syn.class_separation.to_string());
        kv("noise", syn.noise.to_string());
        kv("label_noise", syn.label_noise.to_string());
        kv("train_per_task", syn.train_per_task.to_string());
        kv("test_per_task", syn.test_per_task.to_string());
        kv("epochs", s.epochs.to_string());
        kv("batch_size", s.batch_size.to_string());
        kv("alpha", self.detector.alpha.to_string());
        kv("window", self.detector.window_size.to_string());
        kv("min_fill", self.detector.min_fill.to_string());
        kv("lr", self.sgd.learning_rate.to_string());
        kv("momentum", self.sgd.momentum.to_string());
        kv("nesterov", self.sgd.nesterov.to_string());
        kv("weight_decay", self.sgd.weight_decay.to_string());
        kv("cs", self.cs.to_string());
        kv("cp", self.cp.to_string());
        kv("expert_prune", self.prune.expert_rate.to_string());
        kv("selector_prune", self.prune.selector_rate.to_string());
        kv("retrain_epochs", self.prune.retrain_epochs.to_string());
        kv(
            "retrain_lr",
            self.prune.retrain_sgd.learning_rate.to_string(),
        );
        kv(
            "retrain_momentum",
            self.prune.retrain_sgd.momentum.to_string(),
        );
        kv(
            "retrain_nesterov",
            self.prune.retrain_sgd.nesterov.to_string(),
        );
        kv(
            "retrain_weight_decay",
            self.prune.retrain_sgd.weight_decay.to_string(),
        );
        kv(
            "retrain_batch_size",
            self.prune.retrain_sgd.batch_size.to_string(),
        );
        kv(
            "selector_arch",
            match self.selector.arch {
                SelectorArch::Mlp => "mlp",
                SelectorArch::Conv => "conv",
            }
            .to_string(),
        );
        kv("selector_hidden", self.selector.hidden.to_string());
        kv("selector_epochs", self.selector.epochs.to_string());
        kv("retrain_shift", self.prune.retrain_shift.to_string());
        kv(
            "retrain_min_steps",
            self.prune.retrain_min_steps.to_string(),
        );
        kv("retrain_anneal", self.prune.retrain_anneal.to_string());
        kv("selector_shift", self.selector.max_shift.to_string());
        kv("selector_lr", self.selector.sgd.learning_rate.to_string());
        kv("selector_momentum", self.selector.sgd.momentum.to_string());
        kv(
            "selector_weight_decay",
            self.selector.sgd.weight_decay.to_string(),
        );
        kv(
            "selector_batch_size",
            self.selector.sgd.batch_size.to_string(),
        );
        kv(
            "expert_arch",
            match self.expert_kind {
                ExpertKind::Conv => "conv",
                ExpertKind::Mlp => "mlp",
            }
            .to_string(),
        );
        kv("expert_hidden", join(&self.expert_hidden));
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("seed", self.seed.to_string());
        kv(
            "out",
            self.out
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv("eval_each_segment", self.eval_each_segment.to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.sgd.validate()?;
        self.selector.sgd.validate()?;
        self.prune.validate()?;
        if self.stream.batch_size == 0 || self.stream.epochs == 0 {
            return Err(TameError::config("batch_size and epochs must be >= 1"));
        }
        if self.selector.hidden == 0 {
            return Err(TameError::config("selector_hidden must be >= 1"));
        }
        Ok(())
    }

    /// Expert layout for inputs of `input_shape` with `classes` outputs.
    pub fn expert_architecture(
        &self,
        input_shape: &[usize],
        classes: usize,
    ) -> Result<ExpertArchitecture> {
        let specs = match self.expert_kind {
            ExpertKind::Conv => {
                if input_shape.len() != 3 {
                    return Err(TameError::config(
                        "conv experts need image inputs; use expert_arch = mlp",
                    ));
                }
                conv_expert_specs(input_shape, classes)?
            }
            ExpertKind::Mlp => mlp_specs(input_shape, &self.expert_hidden, classes),
        };
        Ok(ExpertArchitecture {
            input_shape: input_shape.to_vec(),
            specs,
        })
    }
}
