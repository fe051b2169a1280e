//! Seeded few-shot tasks with base and novel class splits.
//!
//! Each class is named by a word sequence. Its "image" prototype is the
//! embedded word sequence itself, scaled, and samples add Gaussian noise to
//! the prototype. A tied two-tower encoder therefore starts with meaningful
//! zero-shot accuracy that noise pulls away from 100%.

use std::fs;
use std::io::Write;
use std::path::Path;

use gatelab_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::FrozenEncoder;
use crate::error::{LabError, Result};
use crate::rng;

/// Test samples per class in both evaluation splits.
pub const TEST_PER_CLASS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub n_base_classes: usize,
    pub n_novel_classes: usize,
    pub shots: usize,
    pub n_patch_tokens: usize,
    pub patch_dim: usize,
    pub prototype_scale: f64,
    pub noise_std: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            n_base_classes: 20,
            n_novel_classes: 10,
            shots: 16,
            n_patch_tokens: 16,
            patch_dim: 64,
            prototype_scale: 1.0,
            noise_std: 0.3,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(LabError::BadValue {
                key: format!("task.{key}"),
                reason: reason.into(),
            })
        };
        if self.shots == 0 {
            return bad("shots", "must be at least 1");
        }
        if self.n_base_classes < 2 {
            return bad("n_base_classes", "must be at least 2");
        }
        if self.n_novel_classes < 2 {
            return bad("n_novel_classes", "must be at least 2");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std", "must be non-negative");
        }
        if !self.prototype_scale.is_finite() {
            return bad("prototype_scale", "must be finite");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    BaseTrain,
    BaseTest,
    NovelTest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(n_patch_tokens, patch_dim)`
    pub patches: Tensor,
    /// Index into the split's class list.
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub seed: u64,
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub base_train: Vec<Sample>,
    pub base_test: Vec<Sample>,
    pub novel_test: Vec<Sample>,
}

fn prototypes(spec: &TaskSpec, enc: &FrozenEncoder, classes: &[usize]) -> Result<Vec<Tensor>> {
    classes
        .iter()
        .map(|&c| {
            let mut p = enc.embed_words(&enc.class_token_ids(c))?;
            p.scale_in_place(spec.prototype_scale);
            Ok(p)
        })
        .collect()
}

fn draw(spec: &TaskSpec, seed: u64, split: Split, label: usize, class: usize, proto: &Tensor, count: usize) -> Vec<Sample> {
    let tag = match split {
        Split::BaseTrain => "train",
        Split::BaseTest | Split::NovelTest => "test",
    };
    let mut r = rng::stream(seed, &format!("data.{tag}.{class}"));
    (0..count)
        .map(|_| {
            let noise = rng::gaussian(&mut r, proto.shape(), spec.noise_std);
            let mut x = proto.clone();
            x.axpy(1.0, &noise).expect("noise matches prototype shape");
            Sample { patches: x, label, split }
        })
        .collect()
}

/// Draws the three splits. The result depends only on the task, the encoder
/// configuration and `seed`.
pub fn generate(spec: &TaskSpec, enc: &FrozenEncoder, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let cfg = enc.config();
    if spec.n_patch_tokens != cfg.n_patch_tokens || spec.patch_dim != cfg.vision_width {
        return Err(LabError::Config(format!(
            "task patches ({} x {}) do not match the encoder ({} x {})",
            spec.n_patch_tokens, spec.patch_dim, cfg.n_patch_tokens, cfg.vision_width
        )));
    }
    if cfg.n_word_tokens != cfg.n_patch_tokens || cfg.text_width != cfg.vision_width {
        return Err(LabError::Config(
            "class prototypes need equal word/patch token counts and equal tower widths".into(),
        ));
    }
    let base_classes: Vec<usize> = (0..spec.n_base_classes).collect();
    let novel_classes: Vec<usize> = (spec.n_base_classes..spec.n_base_classes + spec.n_novel_classes).collect();
    let base_protos = prototypes(spec, enc, &base_classes)?;
    let novel_protos = prototypes(spec, enc, &novel_classes)?;

    let mut base_train = Vec::new();
    let mut base_test = Vec::new();
    let mut novel_test = Vec::new();
    for (label, (&c, p)) in base_classes.iter().zip(&base_protos).enumerate() {
        base_train.extend(draw(spec, seed, Split::BaseTrain, label, c, p, spec.shots));
        base_test.extend(draw(spec, seed, Split::BaseTest, label, c, p, TEST_PER_CLASS));
    }
    for (label, (&c, p)) in novel_classes.iter().zip(&novel_protos).enumerate() {
        novel_test.extend(draw(spec, seed, Split::NovelTest, label, c, p, TEST_PER_CLASS));
    }
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        base_classes,
        novel_classes,
        base_train,
        base_test,
        novel_test,
    })
}

/// Stacks sample patches into `(B, n_patch_tokens, patch_dim)`.
pub fn stack(samples: &[&Sample]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| LabError::invalid("cannot stack an empty batch"))?;
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.patches.shape());
    let mut data = Vec::with_capacity(samples.len() * first.patches.numel());
    for s in samples {
        if s.patches.shape() != first.patches.shape() {
            return Err(LabError::Shape("samples of different shapes in one batch".into()));
        }
        data.extend_from_slice(s.patches.data());
    }
    Ok(Tensor::new(shape, data)?)
}

/// `2ab / (a + b)` for accuracies in (0, 100].
pub fn harmonic_mean(base_acc: f64, novel_acc: f64) -> Result<f64> {
    for v in [base_acc, novel_acc] {
        if !(v > 0.0 && v <= 100.0) {
            return Err(LabError::invalid(format!("accuracy {v} outside (0, 100]")));
        }
    }
    Ok(2.0 * base_acc * novel_acc / (base_acc + novel_acc))
}

#[derive(Serialize, Deserialize)]
struct Header {
    task: TaskSpec,
    seed: u64,
    base_classes: Vec<usize>,
    novel_classes: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    split: Split,
    label: usize,
    patches: Vec<f64>,
}

impl Dataset {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&Header {
            task: self.spec.clone(),
            seed: self.seed,
            base_classes: self.base_classes.clone(),
            novel_classes: self.novel_classes.clone(),
        })?);
        out.push('\n');
        for s in self.base_train.iter().chain(&self.base_test).chain(&self.novel_test) {
            out.push_str(&serde_json::to_string(&SampleLine {
                split: s.split,
                label: s.label,
                patches: s.patches.data().to_vec(),
            })?);
            out.push('\n');
        }
        let mut f = fs::File::create(path).map_err(|e| LabError::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| LabError::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let err = |line: usize, reason: String| LabError::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines.next().ok_or_else(|| err(1, "empty dataset file".into()))?;
        let header: Header = serde_json::from_str(head).map_err(|e| err(1, e.to_string()))?;
        let shape = [header.task.n_patch_tokens, header.task.patch_dim];
        let mut ds = Dataset {
            spec: header.task,
            seed: header.seed,
            base_classes: header.base_classes,
            novel_classes: header.novel_classes,
            base_train: Vec::new(),
            base_test: Vec::new(),
            novel_test: Vec::new(),
        };
        for (i, raw) in lines {
            let line: SampleLine = serde_json::from_str(raw).map_err(|e| err(i + 1, e.to_string()))?;
            let patches = Tensor::new(shape.to_vec(), line.patches).map_err(|e| err(i + 1, e.to_string()))?;
            let classes = match line.split {
                Split::NovelTest => ds.novel_classes.len(),
                _ => ds.base_classes.len(),
            };
            if line.label >= classes {
                return Err(err(i + 1, format!("label {} outside {classes} classes", line.label)));
            }
            let sample = Sample {
                patches,
                label: line.label,
                split: line.split,
            };
            match line.split {
                Split::BaseTrain => ds.base_train.push(sample),
                Split::BaseTest => ds.base_test.push(sample),
                Split::NovelTest => ds.novel_test.push(sample),
            }
        }
        Ok(ds)
    }
}
