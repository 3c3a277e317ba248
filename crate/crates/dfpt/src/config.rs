//! Run configuration: sectioned `key = value` text (TOML subset).
//!
//! Every key has a default. The persisted copy in a run directory is the
//! resolved config with all of them written out.

use std::path::{Path, PathBuf};

use dfpt_core::data::{gen_synth, LabeledDataset, SynthSpec};
use dfpt_core::dfpt::{GradientFlow, PromptConfig};
use dfpt_core::models::ArchSpec;
use dfpt_core::trainer::{Method, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{IoError, Result};
use crate::format::load_dataset;
use crate::loaders::{load_cifar_binary, load_idx, CifarLayout};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub train: TrainSection,
    pub prompt: PromptSection,
    pub output: OutputSection,
    /// Filled in when a run directory is written; ignored on input.
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// `synth`, `files`, `idx`, `cifar10` or `cifar100`.
    pub source: String,
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub channels: usize,
    pub difficulty: f64,
    pub seed: u64,
    /// Dataset files (`files`) or IDX image files (`idx`).
    pub train: String,
    pub test: String,
    pub train_labels: String,
    pub test_labels: String,
    /// Directory of CIFAR binary batches.
    pub dir: String,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SynthSpec::default();
        Self {
            source: "synth".into(),
            classes: s.classes,
            per_class: s.per_class,
            size: s.size,
            channels: s.channels,
            difficulty: s.difficulty,
            seed: s.seed,
            train: String::new(),
            test: String::new(),
            train_labels: String::new(),
            test_labels: String::new(),
            dir: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub teacher: String,
    pub student: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            teacher: "tiny-resnet-T".into(),
            student: "tiny-resnet-S".into(),
        }
    }
}

/// Teacher pre-training schedule; the remaining settings come from `[train]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub milestones: Vec<usize>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            milestones: t.milestones,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// `ce`, `kd`, `dfpt` or `dfpt-t`.
    pub method: String,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub teacher_lr_scale: f64,
    pub prompt_lr_scale: f64,
    /// Zero disables clipping.
    pub prompt_clip: f64,
    pub seed: u64,
    pub compensate: bool,
    /// `through-frozen` or `detached-base`.
    pub flow: String,
    pub augment: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self::from(&TrainConfig::default())
    }
}

impl From<&TrainConfig> for TrainSection {
    fn from(c: &TrainConfig) -> Self {
        Self {
            method: c.method.label().into(),
            lambda: c.lambda,
            alpha: c.alpha,
            beta: c.beta,
            tau: c.tau,
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            momentum: c.momentum,
            weight_decay: c.weight_decay,
            milestones: c.milestones.clone(),
            lr_decay: c.lr_decay,
            teacher_lr_scale: c.teacher_lr_scale,
            prompt_lr_scale: c.prompt_lr_scale,
            prompt_clip: c.prompt_clip.unwrap_or(0.0),
            seed: c.seed,
            compensate: c.compensate,
            flow: flow_label(c.flow).into(),
            augment: c.augment,
        }
    }
}

fn flow_label(f: GradientFlow) -> &'static str {
    match f {
        GradientFlow::ThroughFrozen => "through-frozen",
        GradientFlow::DetachedBase => "detached-base",
    }
}

impl TrainSection {
    pub fn to_config(&self) -> Result<TrainConfig> {
        let method = Method::parse(&self.method).ok_or_else(|| invalid(format!("unknown method `{}`", self.method)))?;
        let flow = match self.flow.as_str() {
            "through-frozen" => GradientFlow::ThroughFrozen,
            "detached-base" => GradientFlow::DetachedBase,
            other => return Err(invalid(format!("unknown flow `{other}`"))),
        };
        let c = TrainConfig {
            method,
            lambda: self.lambda,
            alpha: self.alpha,
            beta: self.beta,
            tau: self.tau,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            milestones: self.milestones.clone(),
            lr_decay: self.lr_decay,
            teacher_lr_scale: self.teacher_lr_scale,
            prompt_lr_scale: self.prompt_lr_scale,
            prompt_clip: (self.prompt_clip > 0.0).then_some(self.prompt_clip),
            seed: self.seed,
            compensate: self.compensate,
            flow,
            augment: self.augment,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Empty `r1` / `blocks` expand to one entry per teacher stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub r1: Vec<usize>,
    pub r2: f64,
    pub kernels: Vec<usize>,
    pub blocks: Vec<usize>,
    pub fusion_convs: usize,
    pub fresh_head: bool,
    pub activation: bool,
}

impl Default for PromptSection {
    fn default() -> Self {
        let p = PromptConfig::for_stages(0);
        Self {
            r1: Vec::new(),
            r2: p.r2,
            kernels: p.kernels,
            blocks: Vec::new(),
            fusion_convs: p.fusion_convs,
            fresh_head: p.fresh_head,
            activation: p.activation,
        }
    }
}

impl PromptSection {
    pub fn to_config(&self, stages: usize) -> PromptConfig {
        let fill = |v: &[usize], d: usize| if v.is_empty() { vec![d; stages] } else { v.to_vec() };
        PromptConfig {
            r1: fill(&self.r1, 4),
            r2: self.r2,
            kernels: self.kernels.clone(),
            blocks: fill(&self.blocks, 1),
            fusion_convs: self.fusion_convs,
            fresh_head: self.fresh_head,
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "runs/default".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    /// `<git blob hash>  <path>` per binary input.
    pub inputs: Vec<String>,
}

fn invalid(msg: String) -> IoError {
    IoError::Config { line: 0, msg }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            if let Some(key) = msg.strip_prefix("unknown field `").and_then(|s| s.split('`').next()) {
                return IoError::UnknownKey(key.to_string());
            }
            let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1).unwrap_or(0);
            IoError::Config { line, msg }
        })?;
        cfg.provenance = Provenance::default();
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(IoError::io(path))?;
        Self::parse(&text)
    }

    /// Materializes stage-dependent defaults and validates every section.
    pub fn resolve(&mut self) -> Result<()> {
        let teacher = ArchSpec::named(&self.model.teacher, 2)?;
        ArchSpec::named(&self.model.student, 2)?;
        let stages = teacher.num_stages();
        let p = self.prompt.to_config(stages);
        p.validate(&teacher.stage_channels())?;
        self.prompt.r1 = p.r1;
        self.prompt.blocks = p.blocks;
        let train = self.train.to_config()?;
        self.train.method = train.method.label().into();
        self.pretrain_config()?;
        self.synth_spec().validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        self.train.to_config()
    }

    pub fn pretrain_config(&self) -> Result<TrainConfig> {
        let c = TrainConfig {
            method: Method::CeOnly,
            epochs: self.pretrain.epochs,
            milestones: self.pretrain.milestones.clone(),
            ..self.train.to_config()?
        };
        c.validate()?;
        Ok(c)
    }

    pub fn prompt_config(&self, stages: usize) -> PromptConfig {
        self.prompt.to_config(stages)
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let d = &self.data;
        SynthSpec {
            classes: d.classes,
            per_class: d.per_class,
            size: d.size,
            channels: d.channels,
            difficulty: d.difficulty,
            seed: d.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Train and test splits plus the files they were read from; relative
    /// paths resolve against `base`.
    pub fn load_data(&self, base: &Path) -> Result<(LabeledDataset, LabeledDataset, Vec<PathBuf>)> {
        let d = &self.data;
        let path = |p: &str| -> Result<PathBuf> {
            if p.is_empty() {
                return Err(invalid(format!("data source `{}` needs a path that is not set", d.source)));
            }
            Ok(base.join(p))
        };
        match d.source.as_str() {
            "synth" => {
                let (tr, te) = gen_synth(&self.synth_spec())?;
                Ok((tr, te, Vec::new()))
            }
            "files" => {
                let (a, b) = (path(&d.train)?, path(&d.test)?);
                Ok((load_dataset(&a)?, load_dataset(&b)?, vec![a, b]))
            }
            "idx" => {
                let files = [path(&d.train)?, path(&d.train_labels)?, path(&d.test)?, path(&d.test_labels)?];
                let tr = load_idx(&files[0], &files[1], d.classes, "train")?;
                let te = load_idx(&files[2], &files[3], d.classes, "test")?;
                Ok((tr, te, files.to_vec()))
            }
            "cifar10" | "cifar100" => {
                let layout = if d.source == "cifar10" {
                    CifarLayout::Cifar10
                } else {
                    CifarLayout::Cifar100
                };
                let dir = path(&d.dir)?;
                let tr = load_cifar_binary(&dir, layout, true)?;
                let te = load_cifar_binary(&dir, layout, false)?;
                let mut files: Vec<PathBuf> = layout.files(true).into_iter().map(|f| dir.join(f)).collect();
                files.extend(layout.files(false).into_iter().map(|f| dir.join(f)));
                Ok((tr, te, files))
            }
            other => Err(invalid(format!("unknown data source `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_resolves_to_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.train_config().unwrap(), TrainConfig::default());
        assert_eq!(c.prompt.r1, vec![4; 3]);
        assert_eq!(c.prompt.blocks, vec![1; 3]);
    }

    #[test]
    fn resolved_copy_round_trips_with_every_key() {
        let c = RunConfig::parse("[train]\nmethod = \"dfpt-kd-dagger\"\nepochs = 3\n").unwrap();
        assert_eq!(c.train.method, "dfpt-t");
        let text = c.to_toml();
        for key in ["lambda", "prompt_clip", "flow", "difficulty", "kernels", "teacher_lr_scale"] {
            assert!(text.contains(&format!("{key} = ")), "{key} missing");
        }
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(RunConfig::parse("[train]\nlamda = 0.5\n"), Err(IoError::UnknownKey(k)) if k == "lamda"));
        assert!(matches!(RunConfig::parse("[bogus]\nx = 1\n"), Err(IoError::UnknownKey(k)) if k == "bogus"));
        assert!(matches!(RunConfig::parse("[train]\nmethod = \"x\"\n"), Err(IoError::Config { .. })));
        assert!(matches!(RunConfig::parse("[train]\nlambda = 2.0\n"), Err(IoError::Core(_))));
        assert!(matches!(RunConfig::parse("\n[train]\nepochs = \"x\"\n"), Err(IoError::Config { line: 3, .. })));
    }

    #[test]
    fn clip_zero_disables() {
        let c = RunConfig::parse("[train]\nprompt_clip = 0.0\n").unwrap();
        assert_eq!(c.train_config().unwrap().prompt_clip, None);
    }
}
