//! Task datasets: synthetic generators, unlearnable noise tasks and CSV
//! ingestion.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::InputShape;
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Examples with task-local labels `0..classes`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    /// Row-major `[n × features]`.
    pub x: Vec<f64>,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub name: String,
    pub input: InputShape,
    pub classes: usize,
    /// First global class index of this task.
    pub offset: usize,
    pub train: Split,
    pub test: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Train,
    Test,
}

impl TaskDataset {
    pub fn new(name: impl Into<String>, input: InputShape, classes: usize, train: Split, test: Split) -> Result<Self> {
        let d = input.numel();
        for (which, s) in [("train", &train), ("test", &test)] {
            if s.x.len() != s.y.len() * d {
                return Err(Error::invalid(format!(
                    "{which} split has {} values for {} examples of {d} features",
                    s.x.len(),
                    s.y.len()
                )));
            }
            if let Some(&l) = s.y.iter().find(|&&l| l >= classes) {
                return Err(Error::LabelOutOfRange { label: l, range: 0..classes });
            }
        }
        if classes == 0 {
            return Err(Error::invalid("a task needs at least one class"));
        }
        Ok(TaskDataset {
            name: name.into(),
            input,
            classes,
            offset: 0,
            train,
            test,
        })
    }

    pub fn split(&self, which: Which) -> &Split {
        match which {
            Which::Train => &self.train,
            Which::Test => &self.test,
        }
    }

    pub fn global_classes(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.classes
    }

    /// Batch of the chosen examples with global labels.
    pub fn batch<T: Scalar>(&self, which: Which, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let s = self.split(which);
        let d = self.input.numel();
        if idx.is_empty() {
            return Err(Error::invalid(format!("empty batch from task `{}`", self.name)));
        }
        let mut x = Vec::with_capacity(idx.len() * d);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend(s.x[i * d..(i + 1) * d].iter().map(|&v| T::from_f64(v)));
            y.push(self.offset + s.y[i]);
        }
        let mut shape = vec![idx.len()];
        shape.extend(self.input.dims());
        Ok((Tensor::new(shape, x)?, y))
    }

    pub fn all<T: Scalar>(&self, which: Which) -> Result<(Tensor<T>, Vec<usize>)> {
        let idx: Vec<usize> = (0..self.split(which).len()).collect();
        self.batch(which, &idx)
    }

    /// Both splits merged, for joint training.
    pub fn union(name: &str, tasks: &[TaskDataset]) -> Result<TaskDataset> {
        let first = tasks.first().ok_or_else(|| Error::invalid("union of no tasks"))?;
        let mut train = Split::default();
        let mut test = Split::default();
        let mut classes = 0;
        for t in tasks {
            if t.input != first.input {
                return Err(Error::invalid("tasks with different input shapes"));
            }
            for (dst, src) in [(&mut train, &t.train), (&mut test, &t.test)] {
                dst.x.extend_from_slice(&src.x);
                dst.y.extend(src.y.iter().map(|&l| t.offset + l - first.offset));
            }
            classes = classes.max(t.offset + t.classes - first.offset);
        }
        let mut out = TaskDataset::new(name, first.input, classes, train, test)?;
        out.offset = first.offset;
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic,
    Csv,
    Noise,
    Mixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<TaskDataset>,
    pub provenance: Provenance,
}

impl TaskSequence {
    /// Assigns contiguous global class ranges in order.
    pub fn new(mut tasks: Vec<TaskDataset>, provenance: Provenance) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::invalid("a task sequence needs at least one task"));
        }
        let input = tasks[0].input;
        let mut offset = 0;
        for t in &mut tasks {
            if t.input != input {
                return Err(Error::invalid(format!("task `{}` has a different input shape", t.name)));
            }
            t.offset = offset;
            offset += t.classes;
        }
        Ok(TaskSequence { tasks, provenance })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn total_classes(&self) -> usize {
        self.tasks.last().map_or(0, |t| t.offset + t.classes)
    }

    pub fn input(&self) -> InputShape {
        self.tasks[0].input
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticMode {
    /// Isotropic clusters around class centers.
    GaussianBlobs,
    /// Small images of oriented sinusoidal stripes.
    StripedPatterns,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub mode: SyntheticMode,
    pub classes_per_task: usize,
    pub input: InputShape,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Distance of blob centers from the origin, or stripe amplitude.
    pub separation: f64,
    /// Standard deviation of the additive Gaussian noise.
    #[serde(default = "one")]
    pub noise: f64,
    /// Blob centers of class `c` in every task share a direction component of
    /// this weight; stripe orientations share it as an angle offset. 0 gives
    /// unrelated tasks.
    #[serde(default)]
    pub relatedness: f64,
    /// Task `k` aligns its class `c` with the shared direction of class
    /// `(c + k·shift) mod classes`, so related tasks can disagree on which
    /// class a region belongs to.
    #[serde(default)]
    pub shared_shift: usize,
    /// Per-task override of `train_per_class`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_train_per_class: Option<Vec<usize>>,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn blobs(classes: usize, dim: usize, separation: f64, seed: u64) -> Self {
        SyntheticSpec {
            mode: SyntheticMode::GaussianBlobs,
            classes_per_task: classes,
            input: InputShape::Vector { dim },
            train_per_class: 100,
            test_per_class: 100,
            separation,
            noise: 1.0,
            relatedness: 0.0,
            shared_shift: 0,
            task_train_per_class: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("classes_per_task", self.classes_per_task),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
        ] {
            if v == 0 {
                return Err(Error::field(name, "must be positive"));
            }
        }
        if self.input.numel() == 0 {
            return Err(Error::invalid("degenerate input shape"));
        }
        if !(self.separation >= 0.0) || !self.separation.is_finite() {
            return Err(Error::field("separation", "must be finite and non-negative"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::field("noise", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.relatedness) {
            return Err(Error::field("relatedness", "must lie in [0, 1]"));
        }
        if self.mode == SyntheticMode::StripedPatterns && !matches!(self.input, InputShape::Image { .. }) {
            return Err(Error::invalid("striped patterns need an image input"));
        }
        if self.task_train_per_class.as_ref().is_some_and(|v| v.contains(&0)) {
            return Err(Error::field("task_train_per_class", "entries must be positive"));
        }
        Ok(())
    }

    fn train_count(&self, task: usize) -> usize {
        self.task_train_per_class
            .as_ref()
            .and_then(|v| v.get(task).copied())
            .unwrap_or(self.train_per_class)
    }
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Shuffled examples `per_class` of each class, drawn by `draw(class, rng)`.
fn sample_split(classes: usize, per_class: usize, rng: &mut Rng, mut draw: impl FnMut(usize, &mut Rng) -> Vec<f64>) -> Split {
    let mut order: Vec<usize> = (0..classes * per_class).map(|i| i / per_class).collect();
    order.shuffle(rng);
    let mut s = Split::default();
    for c in order {
        s.x.extend(draw(c, rng));
        s.y.push(c);
    }
    s
}

/// `tasks` tasks with disjoint classes, a pure function of `spec`.
pub fn gen_synthetic_tasks(spec: &SyntheticSpec, tasks: usize) -> Result<TaskSequence> {
    spec.validate()?;
    if tasks == 0 {
        return Err(Error::invalid("at least one task is required"));
    }
    let d = spec.input.numel();
    let c = spec.classes_per_task;
    let mut shared_rng = rng::stream(spec.seed, &[rng::tag("shared")]);
    let out = match spec.mode {
        SyntheticMode::GaussianBlobs => {
            let shared: Vec<Vec<f64>> = (0..c)
                .map(|_| {
                    let mut v = gaussian(&mut shared_rng, d);
                    unit(&mut v);
                    v
                })
                .collect();
            (0..tasks)
                .map(|k| {
                    let mut r = rng::stream(spec.seed, &[rng::tag("blobs"), k as u64]);
                    let rho = spec.relatedness;
                    let centers: Vec<Vec<f64>> = (0..c)
                        .map(|cls| {
                            let mut fresh = gaussian(&mut r, d);
                            unit(&mut fresh);
                            let mut v: Vec<f64> = shared[(cls + k * spec.shared_shift) % c]
                                .iter()
                                .zip(&fresh)
                                .map(|(s, f)| rho * s + (1.0 - rho * rho).sqrt() * f)
                                .collect();
                            unit(&mut v);
                            v.iter_mut().for_each(|x| *x *= spec.separation);
                            v
                        })
                        .collect();
                    let mut draw = |cls: usize, r: &mut Rng| {
                        centers[cls]
                            .iter()
                            .map(|&m| m + spec.noise * normal(r))
                            .collect::<Vec<f64>>()
                    };
                    let train = sample_split(c, spec.train_count(k), &mut r, &mut draw);
                    let test = sample_split(c, spec.test_per_class, &mut r, &mut draw);
                    TaskDataset::new(format!("blobs{}", k + 1), spec.input, c, train, test)
                })
                .collect::<Result<Vec<_>>>()?
        }
        SyntheticMode::StripedPatterns => {
            let InputShape::Image { channels, height, width } = spec.input else {
                unreachable!("validated")
            };
            let base = shared_rng.random_range(0.0..std::f64::consts::PI);
            (0..tasks)
                .map(|k| {
                    let mut r = rng::stream(spec.seed, &[rng::tag("stripes"), k as u64]);
                    let own = r.random_range(0.0..std::f64::consts::PI);
                    let rho = spec.relatedness;
                    let offset = rho * base + (1.0 - rho) * own;
                    let params: Vec<(f64, f64)> = (0..c)
                        .map(|cls| {
                            let angle = offset + std::f64::consts::PI * cls as f64 / c as f64;
                            let freq = 1.0 + (cls % 2) as f64;
                            (angle, freq)
                        })
                        .collect();
                    let mut draw = |cls: usize, r: &mut Rng| {
                        let (angle, freq) = params[cls];
                        let phase = r.random_range(0.0..std::f64::consts::TAU);
                        let (s, co) = angle.sin_cos();
                        let mut img = Vec::with_capacity(channels * height * width);
                        for _ in 0..channels {
                            for i in 0..height {
                                for j in 0..width {
                                    let u = (i as f64 * co + j as f64 * s) / height as f64;
                                    let v = spec.separation * (std::f64::consts::TAU * freq * u + phase).sin();
                                    img.push(v + spec.noise * normal(r));
                                }
                            }
                        }
                        img
                    };
                    let train = sample_split(c, spec.train_count(k), &mut r, &mut draw);
                    let test = sample_split(c, spec.test_per_class, &mut r, &mut draw);
                    TaskDataset::new(format!("stripes{}", k + 1), spec.input, c, train, test)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    TaskSequence::new(out, Provenance::Synthetic)
}

/// Standard-normal features with uniformly random labels; train and test
/// both hold `n` examples.
pub fn gen_noise_task(input: InputShape, classes: usize, n: usize, seed: u64) -> Result<TaskDataset> {
    if classes == 0 || n < classes {
        return Err(Error::invalid(format!("noise task needs n ≥ classes ≥ 1, got n={n}, classes={classes}")));
    }
    let d = input.numel();
    let mut r = rng::stream(seed, &[rng::tag("noise")]);
    let split = |r: &mut Rng| Split {
        x: gaussian(r, n * d),
        y: (0..n).map(|_| r.random_range(0..classes)).collect(),
    };
    let train = split(&mut r);
    let test = split(&mut r);
    TaskDataset::new("noise", input, classes, train, test)
}

/// How CSV feature columns are interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsvLayout {
    Vector,
    /// Features form a square single-channel image.
    SquareImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    #[serde(default = "label_column")]
    pub label_column: String,
    #[serde(default = "vector_layout")]
    pub layout: CsvLayout,
    /// Allowed label values in class order; defaults to the sorted distinct
    /// labels of the file.
    #[serde(default)]
    pub classes: Option<Vec<i64>>,
}

fn label_column() -> String {
    "label".into()
}

fn vector_layout() -> CsvLayout {
    CsvLayout::Vector
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            label_column: label_column(),
            layout: CsvLayout::Vector,
            classes: None,
        }
    }
}

/// Rows of a CSV file, in file order. Rows and columns in errors are 1-based;
/// row 1 is the first line after the header.
pub fn parse_csv(text: &str, origin: &Path, schema: &CsvSchema) -> Result<(InputShape, Vec<i64>, Split)> {
    let csv_err = |row: usize, column: usize, message: String| Error::Csv {
        path: origin.to_path_buf(),
        row,
        column,
        message,
    };
    let mut reader = csv::ReaderBuilder::new().quoting(false).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| csv_err(0, 0, e.to_string()))?.clone();
    let label_col = headers
        .iter()
        .position(|h| h == schema.label_column)
        .ok_or_else(|| csv_err(0, 0, format!("no `{}` column", schema.label_column)))?;
    let features = headers.len() - 1;
    if features == 0 {
        return Err(csv_err(0, 0, "no feature columns".into()));
    }
    let input = match schema.layout {
        CsvLayout::Vector => InputShape::Vector { dim: features },
        CsvLayout::SquareImage => {
            let side = (features as f64).sqrt().round() as usize;
            if side * side != features {
                return Err(csv_err(0, 0, format!("{features} features do not form a square image")));
            }
            InputShape::Image { channels: 1, height: side, width: side }
        }
    };
    let mut raw_labels = Vec::new();
    let mut x = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| csv_err(row, 0, e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(csv_err(row, rec.len().min(headers.len()) + 1, format!("expected {} fields, found {}", headers.len(), rec.len())));
        }
        for (c, field) in rec.iter().enumerate() {
            if c == label_col {
                let l = field
                    .trim()
                    .parse::<i64>()
                    .map_err(|e| csv_err(row, c + 1, format!("label `{field}`: {e}")))?;
                raw_labels.push(l);
            } else {
                let v = field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| csv_err(row, c + 1, format!("value `{field}`: {e}")))?;
                if !v.is_finite() {
                    return Err(csv_err(row, c + 1, format!("non-finite value `{field}`")));
                }
                x.push(v);
            }
        }
    }
    let classes: Vec<i64> = match &schema.classes {
        Some(c) => c.clone(),
        None => raw_labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect(),
    };
    let mut y = Vec::with_capacity(raw_labels.len());
    for (r, l) in raw_labels.iter().enumerate() {
        let idx = classes
            .iter()
            .position(|c| c == l)
            .ok_or_else(|| csv_err(r + 1, label_col + 1, format!("label {l} is not a declared class")))?;
        y.push(idx);
    }
    Ok((input, classes, Split { x, y }))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// A task from a training file and a test file sharing one schema. Without a
/// declared class list, classes are the distinct labels of the training file.
pub fn load_csv_dataset(train: &Path, test: &Path, schema: &CsvSchema) -> Result<TaskDataset> {
    let (input, classes, train_split) = parse_csv(&read(train)?, train, schema)?;
    let fixed = CsvSchema {
        classes: Some(classes.clone()),
        ..schema.clone()
    };
    let (test_input, _, test_split) = parse_csv(&read(test)?, test, &fixed)?;
    if test_input != input {
        return Err(Error::invalid(format!(
            "{} and {} have different feature counts",
            train.display(),
            test.display()
        )));
    }
    let name = train.file_stem().map_or("csv".into(), |s| s.to_string_lossy().into_owned());
    TaskDataset::new(name, input, classes.len(), train_split, test_split)
}

/// `label,f0,f1,…` text for a split; labels are task-local.
pub fn to_csv(split: &Split, features: usize) -> String {
    let mut out = String::from("label");
    for i in 0..features {
        let _ = write!(out, ",f{i}");
    }
    out.push('\n');
    for (i, &l) in split.y.iter().enumerate() {
        let _ = write!(out, "{l}");
        for v in &split.x[i * features..(i + 1) * features] {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}
