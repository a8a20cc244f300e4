//! The two-stage federated loop: sample a cohort, train locally, merge.
//!
//! A stage is either masked pretraining (no labels touched) or supervised
//! fine-tuning (labeled subsets only). Every random choice — cohort, epoch
//! order, masks, augmentations — comes from a stream keyed by the master seed
//! and the coordinates of the draw, so runs are bitwise reproducible no matter
//! how many worker threads execute the clients.

pub mod aggregate;
pub mod client;
pub mod fedprox;
pub mod select;
pub mod semifl;
pub mod server;

pub use aggregate::aggregate;
pub use client::{
    client_update_consistency, client_update_finetune, client_update_pretrain, epoch_order,
    ClientState, ClientUpdate,
};
pub use fedprox::{fedprox_penalty, proximal_term};
pub use select::select_clients;
pub use semifl::{consistency_loss, pseudo_labels};
pub use server::{evaluate_classifier, run_stage, EvalSummary, StageData, StageOutput};

use crate::data::AugmentPolicy;
use crate::error::{ensure, Result};
use crate::model::ModelKind;

/// Which half of the pipeline a federated run belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    /// Label used in metrics rows and file names.
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }

    /// Stream-tag value, so the two stages never share random draws.
    pub fn tag(self) -> u64 {
        match self {
            Stage::Pretrain => 0,
            Stage::Finetune => 1,
        }
    }
}

/// Local training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Reconstruct masked patches in pixel space.
    Mae,
    /// Predict codebook tokens of masked patches.
    Beit,
    /// Cross-entropy on labeled images.
    Supervised,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mae => "mae",
            Method::Beit => "beit",
            Method::Supervised => "supervised",
        }
    }

    /// The parameter layout this objective trains.
    pub fn model_kind(self) -> ModelKind {
        match self {
            Method::Mae => ModelKind::PretrainMae,
            Method::Beit => ModelKind::PretrainBeit,
            Method::Supervised => ModelKind::Classifier,
        }
    }
}

/// Everything a federated stage needs to know, minus the data itself.
#[derive(Debug, Clone)]
pub struct FedConfig {
    /// Number of participating clients.
    pub clients: usize,
    /// Cohort size drawn each round.
    pub select: usize,
    /// Local epochs per selected client per round.
    pub epochs: usize,
    /// Communication rounds. Zero is allowed and returns the initial model
    /// untouched, which gives recipes a uniform way to skip a stage.
    pub rounds: u64,
    /// Local mini-batch size.
    pub batch: usize,
    pub stage: Stage,
    pub method: Method,
    /// Proximal strength. Zero disables the term entirely — not merely
    /// numerically, but structurally, so plain averaging stays bit-identical.
    pub mu: f64,
    /// After round `rounds / 2`, add one extra client that holds every
    /// unlabeled sample and trains with the consistency objective.
    pub semi_fl: bool,
    /// During consistency training, drop images whose pseudo-label arrives
    /// with a top-class probability below this. Zero keeps everything; a
    /// batch with no confident image is skipped, and a round with no
    /// confident image at all makes the unlabeled client abstain.
    pub confidence: f64,
    /// Fraction of patches hidden during pretraining.
    pub mask_ratio: f64,
    /// Mask contiguous rectangles instead of independent patches.
    pub blockwise: bool,
    /// Peak learning rate after warm-up.
    pub lr: f64,
    /// Value the cosine decay approaches.
    pub lr_floor: f64,
    /// Rounds of linear warm-up (scaled by local epochs internally).
    pub warmup_rounds: u64,
    pub weight_decay: f64,
    /// Evaluate the global model on the test split every this many rounds
    /// (fine-tuning only; zero disables evaluation).
    pub eval_interval: u64,
    /// View sampler for the consistency objective.
    pub augment: Option<AugmentPolicy>,
    /// Keep a copy of the global model after every round. Off by default;
    /// meant for step-by-step comparisons against reference trainers.
    pub trace: bool,
    /// Master seed every random stream derives from.
    pub seed: u64,
}

impl FedConfig {
    /// Pretraining defaults for a single client; tests and recipes override
    /// the fields they care about.
    pub fn pretrain(method: Method) -> Self {
        FedConfig {
            clients: 1,
            select: 1,
            epochs: 1,
            rounds: 1,
            batch: 32,
            stage: Stage::Pretrain,
            method,
            mu: 0.0,
            semi_fl: false,
            confidence: 0.0,
            mask_ratio: 0.5,
            blockwise: false,
            lr: 1e-3,
            lr_floor: 0.0,
            warmup_rounds: 0,
            weight_decay: 0.0,
            eval_interval: 0,
            augment: None,
            trace: false,
            seed: 0,
        }
    }

    /// Fine-tuning defaults, analogous to [`FedConfig::pretrain`].
    pub fn finetune() -> Self {
        FedConfig {
            stage: Stage::Finetune,
            method: Method::Supervised,
            ..FedConfig::pretrain(Method::Mae)
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.clients >= 1, "need at least one client");
        ensure!(
            self.select >= 1 && self.select <= self.clients,
            "cohort size {} must lie in 1..={}",
            self.select,
            self.clients
        );
        ensure!(self.epochs >= 1, "need at least one local epoch");
        ensure!(self.batch >= 1, "batch size must be positive");
        match (self.stage, self.method) {
            (Stage::Pretrain, Method::Mae | Method::Beit) => {}
            (Stage::Finetune, Method::Supervised) => {}
            (s, m) => {
                return Err(crate::error::Error::contract(format!(
                    "{} cannot run with the {} objective",
                    s.name(),
                    m.name()
                )))
            }
        }
        ensure!(
            self.mu.is_finite() && self.mu >= 0.0,
            "proximal strength must be finite and non-negative, got {}",
            self.mu
        );
        if self.stage == Stage::Pretrain {
            ensure!(
                self.mask_ratio > 0.0 && self.mask_ratio < 1.0,
                "mask ratio must lie strictly between 0 and 1, got {}",
                self.mask_ratio
            );
        }
        ensure!(
            self.lr.is_finite() && self.lr >= 0.0,
            "learning rate must be finite and non-negative"
        );
        ensure!(
            self.lr_floor.is_finite() && self.lr_floor >= 0.0 && self.lr_floor <= self.lr,
            "learning-rate floor must lie in 0..=lr"
        );
        ensure!(
            self.weight_decay.is_finite() && self.weight_decay >= 0.0,
            "weight decay must be finite and non-negative"
        );
        ensure!(
            self.warmup_rounds <= self.rounds,
            "warm-up ({} rounds) exceeds the run ({} rounds)",
            self.warmup_rounds,
            self.rounds
        );
        if self.semi_fl {
            ensure!(
                self.stage == Stage::Finetune,
                "the consistency client only exists during fine-tuning"
            );
            ensure!(
                self.augment.is_some(),
                "consistency training needs an augmentation policy"
            );
        }
        ensure!(
            (0.0..=1.0).contains(&self.confidence),
            "pseudo-label confidence must lie in 0..=1, got {}",
            self.confidence
        );
        if self.eval_interval > 0 {
            ensure!(
                self.stage == Stage::Finetune,
                "pretrained models have no classifier head to evaluate"
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_method_pairings_are_enforced() {
        let mut cfg = FedConfig::pretrain(Method::Mae);
        assert!(cfg.validate().is_ok());
        cfg.method = Method::Supervised;
        assert!(cfg.validate().is_err());

        let mut cfg = FedConfig::finetune();
        assert!(cfg.validate().is_ok());
        cfg.method = Method::Beit;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cohort_bounds_are_checked() {
        let mut cfg = FedConfig::pretrain(Method::Mae);
        cfg.clients = 3;
        cfg.select = 4;
        assert!(cfg.validate().is_err());
        cfg.select = 0;
        assert!(cfg.validate().is_err());
        cfg.select = 3;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn zero_rounds_is_legal() {
        let mut cfg = FedConfig::pretrain(Method::Mae);
        cfg.rounds = 0;
        assert!(cfg.validate().is_ok());
        // ...but warm-up cannot outlast the run.
        cfg.warmup_rounds = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn consistency_client_needs_finetuning_and_views() {
        let mut cfg = FedConfig::pretrain(Method::Mae);
        cfg.semi_fl = true;
        assert!(cfg.validate().is_err());

        let mut cfg = FedConfig::finetune();
        cfg.semi_fl = true;
        assert!(cfg.validate().is_err());
        cfg.augment = Some(crate::data::AugmentPolicy::identity(
            crate::data::ImageShape {
                h: 8,
                w: 8,
                c: 1,
            },
        ));
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn evaluation_is_a_finetuning_affair() {
        let mut cfg = FedConfig::pretrain(Method::Beit);
        cfg.eval_interval = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = FedConfig::finetune();
        cfg.eval_interval = 5;
        assert!(cfg.validate().is_ok());
    }
}
