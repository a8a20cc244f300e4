//! Model shapes, parameter naming, and deterministic initialisation.
//!
//! Parameters live in a fixed, named order. That order *is* the wire format:
//! the optimiser state, the federated weight exchange, and checkpoints all
//! index into it, so it never depends on map iteration or thread timing.

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Error, Result};
use crate::numerics::tensor::{Real, Tensor};
use crate::seeds;

/// Weight matrices start from a truncated normal with this deviation.
const WEIGHT_STD: f64 = 0.02;

/// Geometry shared by every model variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    /// Patch side length; must divide both image extents.
    pub patch: usize,
    /// Encoder width.
    pub dim: usize,
    /// Encoder depth in transformer blocks.
    pub depth: usize,
    pub heads: usize,
    /// Hidden width of each block's MLP, as a multiple of the width.
    pub mlp_ratio: usize,
    /// Width of the reconstruction decoder.
    pub dec_dim: usize,
    /// Depth of the reconstruction decoder.
    pub dec_depth: usize,
    /// Codebook size for the token-prediction objective.
    pub vocab: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.patch > 0, "patch side must be positive");
        ensure!(
            self.image_h % self.patch == 0 && self.image_w % self.patch == 0,
            "{}x{} image is not divisible into {}x{} patches",
            self.image_h,
            self.image_w,
            self.patch,
            self.patch
        );
        ensure!(self.channels > 0, "images need at least one channel");
        ensure!(
            self.depth > 0 && self.dim > 0 && self.heads > 0 && self.mlp_ratio > 0,
            "encoder shape must be positive"
        );
        ensure!(
            self.dim % self.heads == 0,
            "width {} is not divisible into {} heads",
            self.dim,
            self.heads
        );
        ensure!(
            self.dec_dim > 0 && self.dec_depth > 0,
            "decoder shape must be positive"
        );
        ensure!(
            self.dec_dim % self.heads == 0,
            "decoder width {} is not divisible into {} heads",
            self.dec_dim,
            self.heads
        );
        ensure!(self.vocab >= 2, "codebook needs at least two entries");
        ensure!(self.num_classes >= 2, "classification needs at least two classes");
        ensure!(
            self.num_patches() >= 2,
            "model needs at least two patches to mask anything"
        );
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch, self.image_w / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Values per patch row: p²·C.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Which parameter set a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Masked-patch pixel reconstruction: encoder + decoder + mask token.
    PretrainMae,
    /// Masked-patch token prediction: encoder + mask token + token head.
    PretrainBeit,
    /// Supervised classification: encoder + linear classifier.
    Classifier,
}

impl ModelKind {
    pub fn tag(self) -> u64 {
        match self {
            ModelKind::PretrainMae => 0,
            ModelKind::PretrainBeit => 1,
            ModelKind::Classifier => 2,
        }
    }

    pub fn from_tag(tag: u64) -> Option<Self> {
        match tag {
            0 => Some(ModelKind::PretrainMae),
            1 => Some(ModelKind::PretrainBeit),
            2 => Some(ModelKind::Classifier),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::PretrainMae => "mae",
            ModelKind::PretrainBeit => "beit",
            ModelKind::Classifier => "classifier",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// Truncated normal, σ = `WEIGHT_STD`, resampled beyond 2σ.
    Weight,
    Zero,
    One,
}

fn block_layout(prefix: &str, dim: usize, mlp_ratio: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    let hidden = dim * mlp_ratio;
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    push(format!("{prefix}/ln1/gamma"), vec![1, dim], Init::One);
    push(format!("{prefix}/ln1/beta"), vec![1, dim], Init::Zero);
    for proj in ["wq", "wk", "wv", "wo"] {
        push(format!("{prefix}/attn/{proj}"), vec![dim, dim], Init::Weight);
        if proj == "wk" {
            // The key projection carries no bias: a constant added to every
            // key shifts each row of attention scores uniformly, and the row
            // softmax cancels the shift, so the parameter could never train.
            continue;
        }
        let bias = &proj[1..];
        push(format!("{prefix}/attn/b{bias}"), vec![1, dim], Init::Zero);
    }
    push(format!("{prefix}/ln2/gamma"), vec![1, dim], Init::One);
    push(format!("{prefix}/ln2/beta"), vec![1, dim], Init::Zero);
    push(format!("{prefix}/mlp/w1"), vec![dim, hidden], Init::Weight);
    push(format!("{prefix}/mlp/b1"), vec![1, hidden], Init::Zero);
    push(format!("{prefix}/mlp/w2"), vec![hidden, dim], Init::Weight);
    push(format!("{prefix}/mlp/b2"), vec![1, dim], Init::Zero);
}

/// The full named layout for one model kind, in wire order.
fn layout(cfg: &ModelConfig, kind: ModelKind) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let p = cfg.num_patches();
    out.push(("embed/weight".into(), vec![cfg.patch_dim(), cfg.dim], Init::Weight));
    out.push(("embed/bias".into(), vec![1, cfg.dim], Init::Zero));
    out.push(("pos/enc".into(), vec![p, cfg.dim], Init::Weight));
    for l in 0..cfg.depth {
        block_layout(&format!("enc{l}"), cfg.dim, cfg.mlp_ratio, &mut out);
    }
    out.push(("enc_final/ln/gamma".into(), vec![1, cfg.dim], Init::One));
    out.push(("enc_final/ln/beta".into(), vec![1, cfg.dim], Init::Zero));
    match kind {
        ModelKind::PretrainMae => {
            out.push(("mask/token".into(), vec![1, cfg.dec_dim], Init::Weight));
            out.push(("dec/proj/weight".into(), vec![cfg.dim, cfg.dec_dim], Init::Weight));
            out.push(("dec/proj/bias".into(), vec![1, cfg.dec_dim], Init::Zero));
            out.push(("dec/pos".into(), vec![p, cfg.dec_dim], Init::Weight));
            for l in 0..cfg.dec_depth {
                block_layout(&format!("dec{l}"), cfg.dec_dim, cfg.mlp_ratio, &mut out);
            }
            out.push(("dec_final/ln/gamma".into(), vec![1, cfg.dec_dim], Init::One));
            out.push(("dec_final/ln/beta".into(), vec![1, cfg.dec_dim], Init::Zero));
            out.push(("dec/head/weight".into(), vec![cfg.dec_dim, cfg.patch_dim()], Init::Weight));
            out.push(("dec/head/bias".into(), vec![1, cfg.patch_dim()], Init::Zero));
        }
        ModelKind::PretrainBeit => {
            out.push(("mask/token".into(), vec![1, cfg.dim], Init::Weight));
            out.push(("beit_head/weight".into(), vec![cfg.dim, cfg.vocab], Init::Weight));
            out.push(("beit_head/bias".into(), vec![1, cfg.vocab], Init::Zero));
        }
        ModelKind::Classifier => {
            // A fresh classification head starts at zero so fine-tuning from
            // different encoders begins from identical logits.
            out.push(("cls/weight".into(), vec![cfg.dim, cfg.num_classes], Init::Zero));
            out.push(("cls/bias".into(), vec![1, cfg.num_classes], Init::Zero));
        }
    }
    out
}

/// Named parameter tensors in wire order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F: Real> {
    kind: ModelKind,
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ModelParams<F> {
    /// Fresh parameters for `kind`, drawn from the model-initialisation
    /// stream of `master_seed`. Draws happen in f64 and are rounded into `F`,
    /// so 32- and 64-bit runs start from the same point.
    pub fn init(cfg: &ModelConfig, kind: ModelKind, master_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeds::stream(master_seed, &[seeds::domain::INIT, kind.tag()]);
        let normal = Normal::new(0.0f64, WEIGHT_STD)
            .map_err(|e| Error::internal(format!("weight distribution: {e}")))?;
        let draw = |rng: &mut dyn rand::RngCore| loop {
            let x = normal.sample(rng);
            if x.abs() <= 2.0 * WEIGHT_STD {
                return x;
            }
        };
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(cfg, kind) {
            let numel: usize = shape.iter().product();
            let data = match init {
                Init::Weight => (0..numel).map(|_| F::from_f64(draw(&mut rng))).collect(),
                Init::Zero => vec![F::zero(); numel],
                Init::One => vec![F::one(); numel],
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?.with_grad());
        }
        Ok(Self::assemble(kind, names, tensors))
    }

    /// Rebuild from named tensors (a checkpoint, say), validating that they
    /// form exactly the layout of `kind` under `cfg`.
    pub fn from_named(
        cfg: &ModelConfig,
        kind: ModelKind,
        mut tensors_by_name: HashMap<String, Tensor<F>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let expected = layout(cfg, kind);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, _) in &expected {
            let t = tensors_by_name.remove(name).ok_or_else(|| {
                Error::format(format!("missing parameter {name:?} for a {} model", kind.name()))
            })?;
            ensure!(
                t.shape() == &shape[..],
                "parameter {name:?} has shape {:?}, expected {shape:?}",
                t.shape()
            );
            names.push(name.clone());
            tensors.push(t.with_grad());
        }
        if let Some(extra) = tensors_by_name.keys().next() {
            return Err(Error::format(format!(
                "unexpected parameter {extra:?} for a {} model",
                kind.name()
            )));
        }
        Ok(Self::assemble(kind, names, tensors))
    }

    /// Classifier parameters whose encoder is copied from a pretrained model.
    /// The head starts at zero, same as a scratch classifier's head.
    pub fn classifier_from_encoder(cfg: &ModelConfig, pretrained: &ModelParams<F>) -> Result<Self> {
        cfg.validate()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, _) in layout(cfg, ModelKind::Classifier) {
            let tensor = match pretrained.index.get(&name) {
                Some(&i) => {
                    let src = &pretrained.tensors[i];
                    ensure!(
                        src.shape() == &shape[..],
                        "encoder parameter {name:?} has shape {:?}, expected {shape:?}",
                        src.shape()
                    );
                    let mut t = src.clone();
                    t.grad = None;
                    t.with_grad()
                }
                None => {
                    ensure!(
                        name.starts_with("cls/"),
                        "pretrained model is missing encoder parameter {name:?}"
                    );
                    Tensor::zeros(shape).with_grad()
                }
            };
            names.push(name);
            tensors.push(tensor);
        }
        Ok(Self::assemble(ModelKind::Classifier, names, tensors))
    }

    fn assemble(kind: ModelKind, names: Vec<String>, tensors: Vec<Tensor<F>>) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        ModelParams {
            kind,
            names,
            tensors,
            index,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("no parameter named {name:?}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        Ok(&self.tensors[self.position(name)?])
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}
