//! Experiment configuration files (TOML).

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use cmn_core::baselines::{transfer_pair, AblationSource, BaselineKind};
use cmn_core::nn::{InitScheme, InputShape, NetworkSpec};
use cmn_core::tasks::{gen_noise_task, gen_synthetic_tasks, load_csv_dataset, CsvLayout, CsvSchema, Provenance};
use cmn_core::trainer::EvalScope;
use cmn_core::{
    rng, ConsolidationConfig, Dtype, GateEmbedding, ModelConfig, OptimizerConfig, RunConfig, SyntheticMode,
    SyntheticSpec, TaskSequence, TransferStrategy,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Cmn,
    Baseline(BaselineKind),
    Ablation(TransferStrategy),
}

impl Method {
    pub fn parse(s: &str) -> Result<Self, String> {
        if s == "cmn" {
            return Ok(Method::Cmn);
        }
        if let Some(k) = BaselineKind::ALL.iter().find(|k| k.name() == s) {
            return Ok(Method::Baseline(*k));
        }
        if let Some(rest) = s.strip_prefix("ablation:") {
            return TransferStrategy::parse(rest).map(Method::Ablation).map_err(|e| e.to_string());
        }
        Err(format!(
            "unknown method `{s}`; expected cmn, one, joint, finetune, scratch or ablation:<cell|none|matrix|direct>"
        ))
    }

    /// Whether the method produces an accuracy matrix.
    pub fn has_matrix(self) -> bool {
        matches!(self, Method::Cmn | Method::Baseline(BaselineKind::Finetune))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Cmn => f.write_str("cmn"),
            Method::Baseline(k) => f.write_str(k.name()),
            Method::Ablation(s) => write!(f, "ablation:{}", s.name()),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Method::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    Synthetic {
        tasks: usize,
        #[serde(default = "blobs")]
        mode: SyntheticMode,
        classes_per_task: usize,
        input: InputShape,
        #[serde(default = "hundred")]
        train_per_class: usize,
        #[serde(default = "hundred")]
        test_per_class: usize,
        separation: f64,
        #[serde(default = "one")]
        noise: f64,
        #[serde(default)]
        relatedness: f64,
        #[serde(default)]
        shared_shift: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        task_train_per_class: Option<Vec<usize>>,
        /// Data seed; the run seed when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// Tasks of pure noise; only useful as a control.
    Noise {
        #[serde(default = "one_task")]
        tasks: usize,
        input: InputShape,
        classes: usize,
        samples: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Csv {
        files: Vec<CsvFiles>,
        #[serde(default = "label")]
        label_column: String,
        #[serde(default = "vector")]
        layout: CsvLayout,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvFiles {
    pub train: PathBuf,
    pub test: PathBuf,
}

fn blobs() -> SyntheticMode {
    SyntheticMode::GaussianBlobs
}
fn hundred() -> usize {
    100
}
fn one() -> f64 {
    1.0
}
fn one_task() -> usize {
    1
}
fn label() -> String {
    "label".into()
}
fn vector() -> CsvLayout {
    CsvLayout::Vector
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneConfig {
    TinyMlp { width: usize },
    TinyConv { channels: [usize; 2] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOptions {
    #[serde(default)]
    pub embedding: GateEmbedding,
    #[serde(default = "fan_in")]
    pub init: InitScheme,
}

fn fan_in() -> InitScheme {
    InitScheme::FanInUniform
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            embedding: GateEmbedding::Full,
            init: fan_in(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Schedule matched one and joint runs and report anterograde forgetting.
    #[serde(default = "yes")]
    pub af: bool,
    /// Score untrained networks and report forward transfer.
    #[serde(default = "yes")]
    pub fwt: bool,
    #[serde(default = "five")]
    pub random_inits: usize,
}

fn yes() -> bool {
    true
}
fn five() -> usize {
    5
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            af: true,
            fwt: true,
            random_inits: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub source: AblationSource,
    #[serde(default = "two_hundred")]
    pub noise_samples: usize,
}

fn two_hundred() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub method: Method,
    #[serde(default = "zero_seed")]
    pub seeds: Vec<u64>,
    #[serde(default = "f64_dtype")]
    pub dtype: Dtype,
    /// Output directory, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub task: TaskConfig,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub model: ModelOptions,
    #[serde(default = "OptimizerConfig::short_default")]
    pub short: OptimizerConfig,
    #[serde(default = "OptimizerConfig::long_default")]
    pub long: OptimizerConfig,
    #[serde(default)]
    pub consolidation: ConsolidationConfig,
    #[serde(default)]
    pub eval_scope: EvalScope,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationConfig>,
}

fn zero_seed() -> Vec<u64> {
    vec![0]
}
fn f64_dtype() -> Dtype {
    Dtype::F64
}

impl ExperimentConfig {
    /// Parses and validates. Relative paths inside the file are resolved
    /// against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::config("<document>", e.message().to_string()))?;
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::config(if path == "." { "<root>".into() } else { path }, e.into_inner().message().to_string())
        })?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let TaskConfig::Csv { files, .. } = &mut self.task {
            for f in files {
                f.train = base.join(&f.train);
                f.test = base.join(&f.test);
            }
        }
        if let Some(out) = &mut self.output {
            *out = base.join(&*out);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds", "at least one seed is required"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(CliError::config("seeds", "seeds must be distinct"));
        }
        match &self.task {
            TaskConfig::Synthetic { tasks, .. } | TaskConfig::Noise { tasks, .. } if *tasks == 0 => {
                return Err(CliError::config("task.tasks", "at least one task is required"));
            }
            TaskConfig::Csv { files, .. } if files.is_empty() => {
                return Err(CliError::config("task.files", "at least one task is required"));
            }
            TaskConfig::Noise { classes, samples, .. } if samples < classes || *classes == 0 => {
                return Err(CliError::config("task.samples", "noise tasks need samples ≥ classes ≥ 1"));
            }
            _ => {}
        }
        if let TaskConfig::Synthetic { .. } = &self.task {
            self.synthetic_spec(0)?
                .expect("synthetic task")
                .validate()
                .map_err(|e| CliError::from_core_in("task", e))?;
        }
        match self.backbone {
            BackboneConfig::TinyMlp { width: 0 } => return Err(CliError::config("backbone.width", "must be positive")),
            BackboneConfig::TinyConv { channels } if channels.contains(&0) => {
                return Err(CliError::config("backbone.channels", "must be positive"))
            }
            BackboneConfig::TinyConv { .. } if !matches!(self.input(), Some(InputShape::Image { .. }) | None) => {
                return Err(CliError::config("backbone.kind", "tiny_conv needs an image input"))
            }
            _ => {}
        }
        self.short.validate().map_err(|e| CliError::from_core_in("short", e))?;
        self.long.validate().map_err(|e| CliError::from_core_in("long", e))?;
        self.consolidation
            .validate()
            .map_err(|e| CliError::from_core_in("consolidation", e))?;
        if self.metrics.random_inits == 0 {
            return Err(CliError::config("metrics.random_inits", "must be at least 1"));
        }
        match (self.method, &self.ablation, &self.task) {
            (Method::Ablation(_), None, _) => {
                return Err(CliError::config("ablation", "ablation methods need an [ablation] section"))
            }
            (Method::Ablation(_), Some(_), t) if !matches!(t, TaskConfig::Synthetic { .. }) => {
                return Err(CliError::config("task.kind", "ablations generate their target from a synthetic task"))
            }
            (Method::Ablation(_), Some(a), _) if a.noise_samples == 0 => {
                return Err(CliError::config("ablation.noise_samples", "must be positive"))
            }
            (m, Some(_), _) if !matches!(m, Method::Ablation(_)) => {
                return Err(CliError::config("ablation", format!("method {m} takes no [ablation] section")))
            }
            _ => {}
        }
        Ok(())
    }

    /// Input shape when it is known without reading files.
    fn input(&self) -> Option<InputShape> {
        match &self.task {
            TaskConfig::Synthetic { input, .. } | TaskConfig::Noise { input, .. } => Some(*input),
            TaskConfig::Csv { .. } => None,
        }
    }

    fn synthetic_spec(&self, run_seed: u64) -> Result<Option<SyntheticSpec>> {
        let TaskConfig::Synthetic {
            mode,
            classes_per_task,
            input,
            train_per_class,
            test_per_class,
            separation,
            noise,
            relatedness,
            shared_shift,
            task_train_per_class,
            seed,
            ..
        } = &self.task
        else {
            return Ok(None);
        };
        Ok(Some(SyntheticSpec {
            mode: *mode,
            classes_per_task: *classes_per_task,
            input: *input,
            train_per_class: *train_per_class,
            test_per_class: *test_per_class,
            separation: *separation,
            noise: *noise,
            relatedness: *relatedness,
            shared_shift: *shared_shift,
            task_train_per_class: task_train_per_class.clone(),
            seed: seed.unwrap_or(run_seed),
        }))
    }

    /// The task sequence of one run.
    pub fn tasks(&self, run_seed: u64) -> Result<TaskSequence> {
        if let (Method::Ablation(_), Some(a)) = (self.method, &self.ablation) {
            let spec = self.synthetic_spec(run_seed)?.expect("validated");
            return Ok(transfer_pair(a.source, &spec, a.noise_samples)?);
        }
        Ok(match &self.task {
            TaskConfig::Synthetic { tasks, .. } => gen_synthetic_tasks(&self.synthetic_spec(run_seed)?.expect("synthetic"), *tasks)?,
            TaskConfig::Noise { tasks, input, classes, samples, seed } => {
                let data_seed = seed.unwrap_or(run_seed);
                let list = (0..*tasks)
                    .map(|k| gen_noise_task(*input, *classes, *samples, rng::derive(data_seed, &[k as u64])))
                    .collect::<cmn_core::Result<Vec<_>>>()?;
                TaskSequence::new(list, Provenance::Noise)?
            }
            TaskConfig::Csv { files, label_column, layout } => {
                let schema = CsvSchema {
                    label_column: label_column.clone(),
                    layout: *layout,
                    classes: None,
                };
                let list = files
                    .iter()
                    .map(|f| load_csv_dataset(&f.train, &f.test, &schema))
                    .collect::<cmn_core::Result<Vec<_>>>()?;
                TaskSequence::new(list, Provenance::Csv)?
            }
        })
    }

    pub fn backbone_spec(&self, input: InputShape) -> NetworkSpec {
        match self.backbone {
            BackboneConfig::TinyMlp { width } => NetworkSpec::tiny_mlp(input.numel(), width, 1),
            BackboneConfig::TinyConv { channels } => NetworkSpec::tiny_conv(input, channels, 1),
        }
    }

    pub fn run_config(&self, input: InputShape) -> RunConfig {
        let model = ModelConfig {
            backbone: self.backbone_spec(input),
            strategy: match self.method {
                Method::Ablation(s) => s,
                _ => TransferStrategy::Cell,
            },
            embedding: self.model.embedding,
            init: self.model.init,
        };
        RunConfig {
            model,
            short: self.short,
            long: self.long,
            consolidation: self.consolidation,
            eval_scope: self.eval_scope,
            curves: true,
        }
    }

    /// Same experiment with every phase capped at `epochs`.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.short.epochs = epochs;
        self.long.epochs = epochs;
        self
    }

    /// SHA-256 of the canonical JSON form, ignoring the output location.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = None;
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Name used for the default output directory.
    pub fn label(&self, fallback: &str) -> String {
        self.name.clone().unwrap_or_else(|| fallback.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
method = "cmn"
[task]
kind = "synthetic"
tasks = 2
classes_per_task = 2
input = { kind = "vector", dim = 4 }
separation = 6.0
[backbone]
kind = "tiny_mlp"
width = 8
"#;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml_str(text, Path::new("."))
    }

    #[test]
    fn defaults_follow_the_reference_settings() {
        let cfg = parse(MINIMAL).unwrap();
        assert_eq!(cfg.short.lr, 0.01);
        assert_eq!(cfg.long.lr, 0.1);
        assert_eq!(cfg.consolidation.temperature, 2.0);
        assert_eq!(cfg.consolidation.beta, 0.8);
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.dtype, Dtype::F64);
    }

    #[test]
    fn errors_name_the_field() {
        let err = parse(&format!("{MINIMAL}[consolidation]\ntemperature = -1.0\n")).unwrap_err();
        assert!(matches!(&err, CliError::Config { path, .. } if path == "consolidation.temperature"), "{err}");
        assert_eq!(err.exit_code(), 2);

        let err = parse(&format!("{MINIMAL}[short]\nlr = 0.0\n")).unwrap_err();
        assert!(matches!(&err, CliError::Config { path, .. } if path == "short.lr"), "{err}");

        let err = parse(&MINIMAL.replace("separation = 6.0", "separation = -1.0")).unwrap_err();
        assert!(matches!(&err, CliError::Config { path, .. } if path == "task.separation"), "{err}");

        let err = parse(&format!("{MINIMAL}[consolidation]\ntemprature = 1.0\n")).unwrap_err();
        assert!(err.to_string().contains("temprature"), "{err}");
        assert!(matches!(&err, CliError::Config { path, .. } if path.starts_with("consolidation")), "{err}");

        let err = parse(&format!("bogus = 1\n{MINIMAL}")).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");

        let err = parse(&MINIMAL.replace("\"cmn\"", "\"ablation:sideways\"")).unwrap_err();
        assert!(matches!(&err, CliError::Config { path, .. } if path == "method"), "{err}");

        let err = parse(&format!("{MINIMAL}[consolidation]\ntemperature = \"hot\"\n")).unwrap_err();
        assert!(matches!(&err, CliError::Config { path, .. } if path == "consolidation.temperature"), "{err}");
    }

    #[test]
    fn methods_round_trip() {
        for s in ["cmn", "one", "joint", "finetune", "scratch", "ablation:cell", "ablation:none", "ablation:matrix", "ablation:direct"] {
            assert_eq!(Method::parse(s).unwrap().to_string(), s);
        }
        assert!(Method::parse("lwf").is_err());
    }

    #[test]
    fn ablation_needs_its_section() {
        let err = parse(&MINIMAL.replace("\"cmn\"", "\"ablation:cell\"")).unwrap_err();
        assert!(matches!(&err, CliError::Config { path, .. } if path == "ablation"), "{err}");
        let ok = parse(&format!("{}[ablation]\nsource = \"noise\"\n", MINIMAL.replace("\"cmn\"", "\"ablation:cell\""))).unwrap();
        assert_eq!(ok.tasks(3).unwrap().len(), 2);
    }

    #[test]
    fn digest_ignores_output_only() {
        let a = parse(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output = Some("elsewhere".into());
        assert_eq!(a.digest(), b.digest());
        b.seeds = vec![1];
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn data_seed_defaults_to_the_run_seed() {
        let cfg = parse(MINIMAL).unwrap();
        let a = cfg.tasks(1).unwrap();
        let b = cfg.tasks(2).unwrap();
        assert_ne!(a.tasks[0].train.x, b.tasks[0].train.x);
        let fixed = parse(&MINIMAL.replace("separation = 6.0", "separation = 6.0\nseed = 9")).unwrap();
        assert_eq!(fixed.tasks(1).unwrap().tasks[0].train.x, fixed.tasks(2).unwrap().tasks[0].train.x);
    }
}
