//! Experiment configuration: a sectioned `key = value` text format.
//!
//! A config file is a sequence of `[section]` headers and `key = value` lines.
//! Blank lines are skipped and lines whose first non-space character is `#`
//! are comments; values are otherwise taken verbatim, so paths may contain
//! `#`. Parsing collects *every* problem — unknown sections and keys, type
//! errors, missing required keys, constraint violations — into one
//! [`Error::Config`] with line references instead of stopping at the first.
//!
//! Most keys have defaults; only `data.source`, `model.patch`, `model.dim`,
//! `model.depth`, `model.heads`, and `run.out` must be written. A parsed
//! config re-emits in a canonical key order with fully resolved defaults
//! ([`ExperimentConfig::emit`]), and parsing that emission reproduces the
//! config exactly, so the copy echoed next to a run's outputs is a complete,
//! stable record of what ran.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{AugmentPolicy, ImageShape, PartitionSpec, SynthSpec};
use crate::error::{Diagnostic, Error, Result};
use crate::fed::{FedConfig, Method, Stage};
use crate::model::ModelConfig;

/// Bumped when the file format itself changes meaning.
pub const CONFIG_VERSION: u32 = 1;

/// Where the train/test images come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    /// Deterministic generated dataset; shape and sizes set in `[data]`.
    Synth,
    /// Image and label containers on disk.
    Files,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub source: DataSource,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Held-out generator images the token codebook is fit on (synth only).
    pub pool_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub noise: f64,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Codebook pool for file-sourced data.
    pub pool_images: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSection {
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSection {
    pub clients: usize,
    pub alpha: f64,
    pub resample_empty: bool,
    /// Load a fixed assignment instead of drawing one.
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelsSection {
    pub fraction: f64,
    pub semi_fl: bool,
    /// Pseudo-label confidence floor for the consistency client; 0 keeps all.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSection {
    /// `None` skips pretraining entirely (scratch baseline).
    pub method: Option<Method>,
    pub rounds: u64,
    pub selected: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub warmup_rounds: u64,
    pub weight_decay: f64,
    pub mu: f64,
    pub mask_ratio: f64,
    pub blockwise: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneSection {
    pub rounds: u64,
    pub selected: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub warmup_rounds: u64,
    pub weight_decay: f64,
    pub mu: f64,
    pub eval_interval: u64,
}

/// View sampler settings; crops are pinned to the input shape so augmented
/// views always keep the model's geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSection {
    pub enabled: bool,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub flip_p: f64,
    pub rotate_deg: f64,
    pub jitter: f64,
    pub grayscale_p: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerSection {
    pub k: usize,
    pub iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    pub precision: u32,
    pub out: PathBuf,
}

/// Everything one experiment needs, fully defaulted and validated.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub partition: PartitionSection,
    pub labels: LabelsSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub augment: AugmentSection,
    pub tokenizer: TokenizerSection,
    pub run: RunSection,
}

const SECTIONS: &[&str] = &[
    "data",
    "model",
    "partition",
    "labels",
    "pretrain",
    "finetune",
    "augment",
    "tokenizer",
    "run",
];

/// Raw `(section, key) -> (line, value)` pairs plus syntax diagnostics.
struct Raw {
    items: BTreeMap<(String, String), (usize, String)>,
    diags: Vec<Diagnostic>,
}

impl Raw {
    fn parse(text: &str) -> Raw {
        enum Ctx {
            /// Before the first header.
            Start,
            /// Inside a reported-bad section; its keys are swallowed silently.
            Unknown,
            Known(String),
        }
        let mut items = BTreeMap::new();
        let mut diags = Vec::new();
        let mut ctx = Ctx::Start;
        for (i, raw_line) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw_line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if let Some(name) = trimmed.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    diags.push(diag(line, "section header is missing its closing ']'"));
                    ctx = Ctx::Unknown;
                    continue;
                };
                let name = name.trim();
                if SECTIONS.contains(&name) {
                    ctx = Ctx::Known(name.to_string());
                } else {
                    diags.push(diag(line, format!("unknown section [{name}]")));
                    ctx = Ctx::Unknown;
                }
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                diags.push(diag(line, format!("expected `key = value`, got `{trimmed}`")));
                continue;
            };
            let sec = match &ctx {
                Ctx::Start => {
                    diags.push(diag(line, "key appears before any [section] header"));
                    continue;
                }
                Ctx::Unknown => continue,
                Ctx::Known(sec) => sec,
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if items
                .insert((sec.clone(), key.clone()), (line, value))
                .is_some()
            {
                diags.push(diag(line, format!("duplicate key {sec}.{key}")));
            }
        }
        Raw { items, diags }
    }

    fn take(&mut self, sec: &str, key: &str) -> Option<(usize, String)> {
        self.items.remove(&(sec.to_string(), key.to_string()))
    }
}

fn diag(line: usize, message: impl Into<String>) -> Diagnostic {
    Diagnostic {
        line,
        message: message.into(),
    }
}

/// Where each explicitly written key sits, for line-accurate constraint
/// diagnostics. Defaulted keys report line 0.
type LineMap = BTreeMap<String, usize>;

struct Extractor {
    raw: Raw,
    lines: LineMap,
    diags: Vec<Diagnostic>,
}

impl Extractor {
    fn note(&mut self, sec: &str, key: &str) -> Option<String> {
        let (line, value) = self.raw.take(sec, key)?;
        self.lines.insert(format!("{sec}.{key}"), line);
        Some(value)
    }

    fn parsed<T>(
        &mut self,
        sec: &str,
        key: &str,
        what: &str,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Option<T> {
        let value = self.note(sec, key)?;
        match parse(&value) {
            Some(v) => Some(v),
            None => {
                let line = self.lines[&format!("{sec}.{key}")];
                self.diags
                    .push(diag(line, format!("{sec}.{key}: expected {what}, got `{value}`")));
                None
            }
        }
    }

    fn usize(&mut self, sec: &str, key: &str, default: usize) -> usize {
        self.parsed(sec, key, "a non-negative integer", |v| v.parse().ok())
            .unwrap_or(default)
    }

    fn u64(&mut self, sec: &str, key: &str, default: u64) -> u64 {
        self.parsed(sec, key, "a non-negative integer", |v| v.parse().ok())
            .unwrap_or(default)
    }

    fn f64(&mut self, sec: &str, key: &str, default: f64) -> f64 {
        self.parsed(sec, key, "a finite number", |v| {
            v.parse::<f64>().ok().filter(|x| x.is_finite())
        })
        .unwrap_or(default)
    }

    fn bool(&mut self, sec: &str, key: &str, default: bool) -> bool {
        self.parsed(sec, key, "true or false", |v| match v {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        })
        .unwrap_or(default)
    }

    fn path(&mut self, sec: &str, key: &str) -> Option<PathBuf> {
        let value = self.note(sec, key)?;
        if value.is_empty() {
            let line = self.lines[&format!("{sec}.{key}")];
            self.diags.push(diag(line, format!("{sec}.{key}: empty path")));
            return None;
        }
        Some(PathBuf::from(value))
    }

    fn required<T>(&mut self, got: Option<T>, sec: &str, key: &str) -> Option<T> {
        if got.is_none() && !self.lines.contains_key(&format!("{sec}.{key}")) {
            self.diags
                .push(diag(0, format!("missing required key {sec}.{key}")));
        }
        got
    }

    /// The line a key was written on, or 0 when it was defaulted.
    fn line(&self, name: &str) -> usize {
        self.lines.get(name).copied().unwrap_or(0)
    }

    fn reject(&mut self, key: &str, message: impl Into<String>) {
        let line = self.line(key);
        self.diags
            .push(diag(line, format!("{key}: {}", message.into())));
    }
}

/// Parse, default, and validate a config from its text.
///
/// Any problem — syntax, types, unknown names, constraint violations — comes
/// back as [`Error::Config`] listing every diagnostic at once.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut raw = Raw::parse(text);
    let syntax = std::mem::take(&mut raw.diags);
    let mut ex = Extractor {
        raw,
        lines: LineMap::new(),
        diags: syntax,
    };

    let source = ex.parsed("data", "source", "synth or files", |v| match v {
        "synth" => Some(DataSource::Synth),
        "files" => Some(DataSource::Files),
        _ => None,
    });
    let source = ex.required(source, "data", "source");
    let data = DataSection {
        source: source.unwrap_or(DataSource::Synth),
        classes: ex.usize("data", "classes", 3),
        train_per_class: ex.usize("data", "train_per_class", 200),
        test_per_class: ex.usize("data", "test_per_class", 60),
        pool_per_class: ex.usize("data", "pool_per_class", 40),
        height: ex.usize("data", "height", 16),
        width: ex.usize("data", "width", 16),
        channels: ex.usize("data", "channels", 1),
        noise: ex.f64("data", "noise", 0.15),
        train_images: ex.path("data", "train_images"),
        train_labels: ex.path("data", "train_labels"),
        test_images: ex.path("data", "test_images"),
        test_labels: ex.path("data", "test_labels"),
        pool_images: ex.path("data", "pool_images"),
    };

    let patch = ex.parsed("model", "patch", "a non-negative integer", |v| v.parse().ok());
    let patch = ex.required(patch, "model", "patch");
    let dim = ex.parsed("model", "dim", "a non-negative integer", |v| v.parse().ok());
    let dim = ex.required(dim, "model", "dim");
    let depth = ex.parsed("model", "depth", "a non-negative integer", |v| v.parse().ok());
    let depth = ex.required(depth, "model", "depth");
    let heads = ex.parsed("model", "heads", "a non-negative integer", |v| v.parse().ok());
    let heads = ex.required(heads, "model", "heads");
    let dim = dim.unwrap_or(32);
    let model = ModelSection {
        patch: patch.unwrap_or(4),
        dim,
        depth: depth.unwrap_or(2),
        heads: heads.unwrap_or(4),
        mlp_ratio: ex.usize("model", "mlp_ratio", 4),
        dec_dim: ex.usize("model", "dec_dim", dim),
        dec_depth: ex.usize("model", "dec_depth", 1),
    };

    let partition = PartitionSection {
        clients: ex.usize("partition", "clients", 1),
        alpha: ex.f64("partition", "alpha", 100.0),
        resample_empty: ex.bool("partition", "resample_empty", false),
        manifest: ex.path("partition", "manifest"),
    };

    let labels = LabelsSection {
        fraction: ex.f64("labels", "fraction", 1.0),
        semi_fl: ex.bool("labels", "semi_fl", false),
        confidence: ex.f64("labels", "confidence", 0.0),
    };

    let method = ex.parsed("pretrain", "method", "mae, beit, or none", |v| match v {
        "mae" => Some(Some(Method::Mae)),
        "beit" => Some(Some(Method::Beit)),
        "none" => Some(None),
        _ => None,
    });
    let pretrain = PretrainSection {
        method: method.unwrap_or(None),
        rounds: ex.u64("pretrain", "rounds", 0),
        selected: ex.usize("pretrain", "selected", partition.clients),
        epochs: ex.usize("pretrain", "epochs", 1),
        batch: ex.usize("pretrain", "batch", 32),
        lr: ex.f64("pretrain", "lr", 1e-3),
        lr_floor: ex.f64("pretrain", "lr_floor", 0.0),
        warmup_rounds: ex.u64("pretrain", "warmup_rounds", 0),
        weight_decay: ex.f64("pretrain", "weight_decay", 0.0),
        mu: ex.f64("pretrain", "mu", 0.0),
        mask_ratio: ex.f64("pretrain", "mask_ratio", 0.5),
        blockwise: ex.bool("pretrain", "blockwise", false),
    };

    let finetune = FinetuneSection {
        rounds: ex.u64("finetune", "rounds", 0),
        selected: ex.usize("finetune", "selected", partition.clients),
        epochs: ex.usize("finetune", "epochs", 1),
        batch: ex.usize("finetune", "batch", 32),
        lr: ex.f64("finetune", "lr", 1e-3),
        lr_floor: ex.f64("finetune", "lr_floor", 0.0),
        warmup_rounds: ex.u64("finetune", "warmup_rounds", 0),
        weight_decay: ex.f64("finetune", "weight_decay", 0.0),
        mu: ex.f64("finetune", "mu", 0.0),
        eval_interval: ex.u64("finetune", "eval_interval", 0),
    };

    let augment = AugmentSection {
        enabled: ex.bool("augment", "enabled", false),
        scale_lo: ex.f64("augment", "scale_lo", 1.0),
        scale_hi: ex.f64("augment", "scale_hi", 1.0),
        flip_p: ex.f64("augment", "flip_p", 0.0),
        rotate_deg: ex.f64("augment", "rotate_deg", 0.0),
        jitter: ex.f64("augment", "jitter", 0.0),
        grayscale_p: ex.f64("augment", "grayscale_p", 0.0),
    };

    let tokenizer = TokenizerSection {
        k: ex.usize("tokenizer", "k", 64),
        iters: ex.usize("tokenizer", "iters", 25),
    };

    let out = ex.path("run", "out");
    let out = ex.required(out, "run", "out");
    let run = RunSection {
        seed: ex.u64("run", "seed", 0),
        precision: ex.parsed("run", "precision", "32 or 64", |v| match v {
            "32" => Some(32),
            "64" => Some(64),
            _ => None,
        })
        .unwrap_or(64),
        out: out.unwrap_or_default(),
    };

    for ((sec, key), (line, _)) in &ex.raw.items {
        ex.diags.push(diag(*line, format!("unknown key {sec}.{key}")));
    }

    let cfg = ExperimentConfig {
        data,
        model,
        partition,
        labels,
        pretrain,
        finetune,
        augment,
        tokenizer,
        run,
    };
    if ex.diags.is_empty() {
        cfg.cross_validate(&mut ex);
    }
    if ex.diags.is_empty() {
        Ok(cfg)
    } else {
        ex.diags.sort_by_key(|d| d.line);
        Err(Error::Config(ex.diags))
    }
}

/// Read and parse a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

impl ExperimentConfig {
    fn cross_validate(&self, ex: &mut Extractor) {
        let m = &self.model;
        if m.patch == 0 {
            ex.reject("model.patch", "patch side must be positive");
        } else {
            if self.data.height < m.patch || self.data.height % m.patch != 0 {
                ex.reject(
                    "model.patch",
                    format!("patch side {} does not tile height {}", m.patch, self.data.height),
                );
            }
            if self.data.width < m.patch || self.data.width % m.patch != 0 {
                ex.reject(
                    "model.patch",
                    format!("patch side {} does not tile width {}", m.patch, self.data.width),
                );
            }
        }
        for (key, v) in [
            ("model.dim", m.dim),
            ("model.depth", m.depth),
            ("model.heads", m.heads),
            ("model.mlp_ratio", m.mlp_ratio),
            ("model.dec_dim", m.dec_dim),
            ("model.dec_depth", m.dec_depth),
            ("data.channels", self.data.channels),
        ] {
            if v == 0 {
                ex.reject(key, "must be positive");
            }
        }
        if m.heads != 0 && m.dim % m.heads != 0 {
            ex.reject(
                "model.heads",
                format!("width {} is not a multiple of {} heads", m.dim, m.heads),
            );
        }

        match self.data.source {
            DataSource::Synth => {
                if self.data.classes < 2 {
                    ex.reject("data.classes", "need at least two classes");
                }
                if self.data.train_per_class == 0 {
                    ex.reject("data.train_per_class", "must be positive");
                }
                if self.data.test_per_class == 0 {
                    ex.reject("data.test_per_class", "must be positive");
                }
                if self.data.noise < 0.0 {
                    ex.reject("data.noise", "must be non-negative");
                }
                if self.pretrain.method == Some(Method::Beit) && self.data.pool_per_class == 0 {
                    ex.reject(
                        "data.pool_per_class",
                        "token codebooks are fit on the held-out pool; need at least one image per class",
                    );
                }
            }
            DataSource::Files => {
                for (key, path) in [
                    ("data.train_images", &self.data.train_images),
                    ("data.train_labels", &self.data.train_labels),
                    ("data.test_images", &self.data.test_images),
                    ("data.test_labels", &self.data.test_labels),
                ] {
                    if path.is_none() {
                        ex.diags
                            .push(diag(0, format!("missing required key {key} (source = files)")));
                    }
                }
                if self.pretrain.method == Some(Method::Beit) && self.data.pool_images.is_none() {
                    ex.diags.push(diag(
                        0,
                        "missing required key data.pool_images (token codebooks need a patch pool)",
                    ));
                }
            }
        }

        if self.partition.clients == 0 {
            ex.reject("partition.clients", "need at least one client");
        }
        if self.partition.alpha <= 0.0 {
            ex.reject("partition.alpha", "concentration must be positive");
        }

        if !(self.labels.fraction > 0.0 && self.labels.fraction <= 1.0) {
            ex.reject("labels.fraction", "must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.labels.confidence) {
            ex.reject("labels.confidence", "must lie in 0..=1");
        }
        if self.labels.semi_fl {
            if self.labels.fraction >= 1.0 {
                ex.reject(
                    "labels.semi_fl",
                    "the extra unlabeled client would hold nothing at fraction 1; lower labels.fraction",
                );
            }
            if !self.augment.enabled {
                ex.reject(
                    "labels.semi_fl",
                    "consistency training draws augmented views; enable [augment]",
                );
            }
        }

        let stages: &[(&str, usize, usize, usize, u64, u64, f64, f64, f64, f64)] = &[
            (
                "pretrain",
                self.pretrain.selected,
                self.pretrain.epochs,
                self.pretrain.batch,
                self.pretrain.rounds,
                self.pretrain.warmup_rounds,
                self.pretrain.lr,
                self.pretrain.lr_floor,
                self.pretrain.weight_decay,
                self.pretrain.mu,
            ),
            (
                "finetune",
                self.finetune.selected,
                self.finetune.epochs,
                self.finetune.batch,
                self.finetune.rounds,
                self.finetune.warmup_rounds,
                self.finetune.lr,
                self.finetune.lr_floor,
                self.finetune.weight_decay,
                self.finetune.mu,
            ),
        ];
        for &(name, selected, epochs, batch, rounds, warmup, lr, floor, wd, mu) in stages {
            if selected == 0 || selected > self.partition.clients {
                ex.reject(
                    &format!("{name}.selected"),
                    format!(
                        "cohort of {selected} from {} clients is out of range",
                        self.partition.clients
                    ),
                );
            }
            if epochs == 0 {
                ex.reject(&format!("{name}.epochs"), "must be positive");
            }
            if batch == 0 {
                ex.reject(&format!("{name}.batch"), "must be positive");
            }
            if warmup > rounds {
                ex.reject(
                    &format!("{name}.warmup_rounds"),
                    format!("warm-up of {warmup} rounds exceeds the {rounds} scheduled"),
                );
            }
            if lr < 0.0 {
                ex.reject(&format!("{name}.lr"), "must be non-negative");
            }
            if floor < 0.0 || floor > lr {
                ex.reject(
                    &format!("{name}.lr_floor"),
                    "must lie between zero and the peak rate",
                );
            }
            if wd < 0.0 {
                ex.reject(&format!("{name}.weight_decay"), "must be non-negative");
            }
            if mu < 0.0 {
                ex.reject(&format!("{name}.mu"), "must be non-negative");
            }
        }

        if self.pretrain.method.is_some() && m.patch != 0 {
            let gamma = self.pretrain.mask_ratio;
            if !(gamma > 0.0 && gamma < 1.0) {
                ex.reject(
                    "pretrain.mask_ratio",
                    "must lie strictly between 0 and 1 (both fully visible and fully hidden are degenerate)",
                );
            } else if self.data.height % m.patch == 0 && self.data.width % m.patch == 0 {
                let patches = (self.data.height / m.patch) * (self.data.width / m.patch);
                let hidden = (gamma * patches as f64 + 0.5).floor() as usize;
                if hidden == 0 || hidden >= patches {
                    ex.reject(
                        "pretrain.mask_ratio",
                        format!(
                            "ratio {gamma} rounds to {hidden} of {patches} patches hidden; need at least one hidden and one visible"
                        ),
                    );
                }
            }
        }

        if self.augment.enabled {
            if !(self.augment.scale_lo > 0.0 && self.augment.scale_lo <= self.augment.scale_hi) {
                ex.reject("augment.scale_lo", "need 0 < scale_lo <= scale_hi");
            }
            for (key, p) in [
                ("augment.flip_p", self.augment.flip_p),
                ("augment.grayscale_p", self.augment.grayscale_p),
            ] {
                if !(0.0..=1.0).contains(&p) {
                    ex.reject(key, "probability must lie in [0, 1]");
                }
            }
            if self.augment.rotate_deg < 0.0 {
                ex.reject("augment.rotate_deg", "must be non-negative");
            }
            if self.augment.jitter < 0.0 {
                ex.reject("augment.jitter", "must be non-negative");
            }
        }

        if self.tokenizer.k < 2 {
            ex.reject("tokenizer.k", "codebooks need at least two entries");
        }
        if self.tokenizer.iters == 0 {
            ex.reject("tokenizer.iters", "must be positive");
        }

        if self.run.out.as_os_str().is_empty() {
            ex.reject("run.out", "empty path");
        }
    }

    /// Canonical text form: every key explicit, fixed order, shortest
    /// round-trip number formatting. Parsing the emission reproduces `self`.
    pub fn emit(&self) -> String {
        let mut s = String::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());

        writeln!(s, "[data]").unwrap();
        let source = match self.data.source {
            DataSource::Synth => "synth",
            DataSource::Files => "files",
        };
        writeln!(s, "source = {source}").unwrap();
        writeln!(s, "classes = {}", self.data.classes).unwrap();
        writeln!(s, "train_per_class = {}", self.data.train_per_class).unwrap();
        writeln!(s, "test_per_class = {}", self.data.test_per_class).unwrap();
        writeln!(s, "pool_per_class = {}", self.data.pool_per_class).unwrap();
        writeln!(s, "height = {}", self.data.height).unwrap();
        writeln!(s, "width = {}", self.data.width).unwrap();
        writeln!(s, "channels = {}", self.data.channels).unwrap();
        writeln!(s, "noise = {}", self.data.noise).unwrap();
        for (key, value) in [
            ("train_images", path(&self.data.train_images)),
            ("train_labels", path(&self.data.train_labels)),
            ("test_images", path(&self.data.test_images)),
            ("test_labels", path(&self.data.test_labels)),
            ("pool_images", path(&self.data.pool_images)),
        ] {
            if let Some(value) = value {
                writeln!(s, "{key} = {value}").unwrap();
            }
        }

        writeln!(s, "\n[model]").unwrap();
        writeln!(s, "patch = {}", self.model.patch).unwrap();
        writeln!(s, "dim = {}", self.model.dim).unwrap();
        writeln!(s, "depth = {}", self.model.depth).unwrap();
        writeln!(s, "heads = {}", self.model.heads).unwrap();
        writeln!(s, "mlp_ratio = {}", self.model.mlp_ratio).unwrap();
        writeln!(s, "dec_dim = {}", self.model.dec_dim).unwrap();
        writeln!(s, "dec_depth = {}", self.model.dec_depth).unwrap();

        writeln!(s, "\n[partition]").unwrap();
        writeln!(s, "clients = {}", self.partition.clients).unwrap();
        writeln!(s, "alpha = {}", self.partition.alpha).unwrap();
        writeln!(s, "resample_empty = {}", self.partition.resample_empty).unwrap();
        if let Some(value) = path(&self.partition.manifest) {
            writeln!(s, "manifest = {value}").unwrap();
        }

        writeln!(s, "\n[labels]").unwrap();
        writeln!(s, "fraction = {}", self.labels.fraction).unwrap();
        writeln!(s, "semi_fl = {}", self.labels.semi_fl).unwrap();
        writeln!(s, "confidence = {}", self.labels.confidence).unwrap();

        writeln!(s, "\n[pretrain]").unwrap();
        let method = match self.pretrain.method {
            Some(Method::Mae) => "mae",
            Some(Method::Beit) => "beit",
            _ => "none",
        };
        writeln!(s, "method = {method}").unwrap();
        writeln!(s, "rounds = {}", self.pretrain.rounds).unwrap();
        writeln!(s, "selected = {}", self.pretrain.selected).unwrap();
        writeln!(s, "epochs = {}", self.pretrain.epochs).unwrap();
        writeln!(s, "batch = {}", self.pretrain.batch).unwrap();
        writeln!(s, "lr = {}", self.pretrain.lr).unwrap();
        writeln!(s, "lr_floor = {}", self.pretrain.lr_floor).unwrap();
        writeln!(s, "warmup_rounds = {}", self.pretrain.warmup_rounds).unwrap();
        writeln!(s, "weight_decay = {}", self.pretrain.weight_decay).unwrap();
        writeln!(s, "mu = {}", self.pretrain.mu).unwrap();
        writeln!(s, "mask_ratio = {}", self.pretrain.mask_ratio).unwrap();
        writeln!(s, "blockwise = {}", self.pretrain.blockwise).unwrap();

        writeln!(s, "\n[finetune]").unwrap();
        writeln!(s, "rounds = {}", self.finetune.rounds).unwrap();
        writeln!(s, "selected = {}", self.finetune.selected).unwrap();
        writeln!(s, "epochs = {}", self.finetune.epochs).unwrap();
        writeln!(s, "batch = {}", self.finetune.batch).unwrap();
        writeln!(s, "lr = {}", self.finetune.lr).unwrap();
        writeln!(s, "lr_floor = {}", self.finetune.lr_floor).unwrap();
        writeln!(s, "warmup_rounds = {}", self.finetune.warmup_rounds).unwrap();
        writeln!(s, "weight_decay = {}", self.finetune.weight_decay).unwrap();
        writeln!(s, "mu = {}", self.finetune.mu).unwrap();
        writeln!(s, "eval_interval = {}", self.finetune.eval_interval).unwrap();

        writeln!(s, "\n[augment]").unwrap();
        writeln!(s, "enabled = {}", self.augment.enabled).unwrap();
        writeln!(s, "scale_lo = {}", self.augment.scale_lo).unwrap();
        writeln!(s, "scale_hi = {}", self.augment.scale_hi).unwrap();
        writeln!(s, "flip_p = {}", self.augment.flip_p).unwrap();
        writeln!(s, "rotate_deg = {}", self.augment.rotate_deg).unwrap();
        writeln!(s, "jitter = {}", self.augment.jitter).unwrap();
        writeln!(s, "grayscale_p = {}", self.augment.grayscale_p).unwrap();

        writeln!(s, "\n[tokenizer]").unwrap();
        writeln!(s, "k = {}", self.tokenizer.k).unwrap();
        writeln!(s, "iters = {}", self.tokenizer.iters).unwrap();

        writeln!(s, "\n[run]").unwrap();
        writeln!(s, "seed = {}", self.run.seed).unwrap();
        writeln!(s, "precision = {}", self.run.precision).unwrap();
        writeln!(s, "out = {}", self.run.out.display()).unwrap();
        s
    }

    pub fn image_shape(&self) -> ImageShape {
        ImageShape {
            h: self.data.height,
            w: self.data.width,
            c: self.data.channels,
        }
    }

    /// Model geometry with the class count resolved from the loaded data.
    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            image_h: self.data.height,
            image_w: self.data.width,
            channels: self.data.channels,
            patch: self.model.patch,
            dim: self.model.dim,
            depth: self.model.depth,
            heads: self.model.heads,
            mlp_ratio: self.model.mlp_ratio,
            dec_dim: self.model.dec_dim,
            dec_depth: self.model.dec_depth,
            vocab: self.tokenizer.k,
            num_classes,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            classes: self.data.classes,
            train_per_class: self.data.train_per_class,
            test_per_class: self.data.test_per_class,
            pool_per_class: self.data.pool_per_class,
            shape: self.image_shape(),
            noise: self.data.noise,
            seed: self.run.seed,
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            clients: self.partition.clients,
            alpha: self.partition.alpha,
            seed: self.run.seed,
            resample_empty: self.partition.resample_empty,
        }
    }

    /// The view sampler, or `None` when augmentation is off. Crops keep the
    /// full input extent so every view matches the model geometry.
    pub fn augment_policy(&self) -> Option<AugmentPolicy> {
        if !self.augment.enabled {
            return None;
        }
        Some(AugmentPolicy {
            scale_lo: self.augment.scale_lo,
            scale_hi: self.augment.scale_hi,
            crop_h: self.data.height,
            crop_w: self.data.width,
            flip_p: self.augment.flip_p,
            rotate_deg: self.augment.rotate_deg,
            jitter: self.augment.jitter,
            grayscale_p: self.augment.grayscale_p,
        })
    }

    /// Round settings for the pretraining stage, or `None` when skipped.
    pub fn pretrain_fed(&self) -> Option<FedConfig> {
        let method = self.pretrain.method?;
        Some(FedConfig {
            clients: self.partition.clients,
            select: self.pretrain.selected,
            epochs: self.pretrain.epochs,
            rounds: self.pretrain.rounds,
            batch: self.pretrain.batch,
            stage: Stage::Pretrain,
            method,
            mu: self.pretrain.mu,
            semi_fl: false,
            confidence: 0.0,
            mask_ratio: self.pretrain.mask_ratio,
            blockwise: self.pretrain.blockwise,
            lr: self.pretrain.lr,
            lr_floor: self.pretrain.lr_floor,
            warmup_rounds: self.pretrain.warmup_rounds,
            weight_decay: self.pretrain.weight_decay,
            eval_interval: 0,
            augment: None,
            trace: false,
            seed: self.run.seed,
        })
    }

    /// Round settings for the fine-tuning stage.
    pub fn finetune_fed(&self) -> FedConfig {
        FedConfig {
            clients: self.partition.clients,
            select: self.finetune.selected,
            epochs: self.finetune.epochs,
            rounds: self.finetune.rounds,
            batch: self.finetune.batch,
            stage: Stage::Finetune,
            method: Method::Supervised,
            mu: self.finetune.mu,
            semi_fl: self.labels.semi_fl,
            confidence: self.labels.confidence,
            mask_ratio: 0.5,
            blockwise: false,
            lr: self.finetune.lr,
            lr_floor: self.finetune.lr_floor,
            warmup_rounds: self.finetune.warmup_rounds,
            weight_decay: self.finetune.weight_decay,
            eval_interval: self.finetune.eval_interval,
            augment: self.augment_policy(),
            trace: false,
            seed: self.run.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
[data]
source = synth

[model]
patch = 4
dim = 32
depth = 2
heads = 4

[run]
out = runs/demo
";

    fn diags(err: Error) -> Vec<Diagnostic> {
        match err {
            Error::Config(d) => d,
            other => panic!("expected config diagnostics, got {other}"),
        }
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.data.classes, 3);
        assert_eq!(cfg.partition.clients, 1);
        assert_eq!(cfg.pretrain.method, None);
        assert_eq!(cfg.pretrain.selected, 1);
        assert_eq!(cfg.model.dec_dim, 32);
        assert_eq!(cfg.run.precision, 64);
        assert_eq!(cfg.run.out, PathBuf::from("runs/demo"));
    }

    #[test]
    fn empty_file_lists_every_required_key() {
        let msgs: Vec<String> = diags(parse_config("").unwrap_err())
            .into_iter()
            .map(|d| d.message)
            .collect();
        for key in [
            "data.source",
            "model.patch",
            "model.dim",
            "model.depth",
            "model.heads",
            "run.out",
        ] {
            assert!(
                msgs.iter().any(|m| m.contains(key)),
                "no diagnostic names {key}: {msgs:?}"
            );
        }
        assert_eq!(msgs.len(), 6);
    }

    #[test]
    fn unknown_names_and_type_errors_carry_lines() {
        let text = format!("{MINIMAL}\n[nope]\nx = 1\n\n[labels]\nfraction = soon\nbogus = 1\n");
        let ds = diags(parse_config(&text).unwrap_err());
        let find = |needle: &str| {
            ds.iter()
                .find(|d| d.message.contains(needle))
                .unwrap_or_else(|| panic!("no diagnostic contains {needle}: {ds:?}"))
        };
        assert!(find("unknown section [nope]").line > 0);
        assert!(find("labels.fraction: expected a finite number").line > 0);
        assert!(find("unknown key labels.bogus").line > 0);
    }

    #[test]
    fn full_mask_ratio_is_rejected() {
        let text = format!("{MINIMAL}\n[pretrain]\nmethod = mae\nrounds = 1\nmask_ratio = 1.0\n");
        let ds = diags(parse_config(&text).unwrap_err());
        assert!(ds.iter().any(|d| d.message.contains("pretrain.mask_ratio")));
    }

    #[test]
    fn cohort_larger_than_client_count_is_rejected() {
        let text = format!("{MINIMAL}\n[partition]\nclients = 3\n\n[finetune]\nselected = 5\n");
        let ds = diags(parse_config(&text).unwrap_err());
        assert!(ds.iter().any(|d| d.message.contains("finetune.selected")));
    }

    #[test]
    fn semi_fl_needs_unlabeled_data_and_views() {
        let text = format!("{MINIMAL}\n[labels]\nsemi_fl = true\n");
        let ds = diags(parse_config(&text).unwrap_err());
        assert!(ds.iter().any(|d| d.message.contains("fraction 1")));
        assert!(ds.iter().any(|d| d.message.contains("augment")));
    }

    #[test]
    fn confidence_outside_the_unit_interval_is_rejected() {
        let text = format!("{MINIMAL}\n[labels]\nconfidence = 1.5\n");
        let ds = diags(parse_config(&text).unwrap_err());
        assert!(ds.iter().any(|d| d.message.contains("labels.confidence")));
    }

    #[test]
    fn confidence_reaches_the_finetune_stage_only() {
        let text = format!(
            "{MINIMAL}\n[labels]\nconfidence = 0.9\n\n[pretrain]\nmethod = mae\nrounds = 1\n"
        );
        let cfg = parse_config(&text).unwrap();
        assert_eq!(cfg.finetune_fed().confidence, 0.9);
        assert_eq!(cfg.pretrain_fed().unwrap().confidence, 0.0);
    }

    #[test]
    fn emission_round_trips_and_is_idempotent() {
        let text = format!(
            "{MINIMAL}\n[pretrain]\nmethod = beit\nrounds = 7\nlr = 2e-3\n\n[partition]\nclients = 4\nalpha = 0.5\n"
        );
        let cfg = parse_config(&text).unwrap();
        let emitted = cfg.emit();
        let reparsed = parse_config(&emitted).unwrap();
        assert_eq!(reparsed, cfg);
        assert_eq!(reparsed.emit(), emitted);
        // Scientific notation normalizes to plain decimal on the way through.
        assert!(emitted.contains("lr = 0.002"));
    }

    #[test]
    fn duplicate_keys_are_reported() {
        let text = format!("{MINIMAL}\n[labels]\nfraction = 0.5\nfraction = 0.7\n");
        let ds = diags(parse_config(&text).unwrap_err());
        assert!(ds.iter().any(|d| d.message.contains("duplicate key labels.fraction")));
    }
}
