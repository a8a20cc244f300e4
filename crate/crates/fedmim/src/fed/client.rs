//! A client's local work for one round.
//!
//! Every flavour — masked pretraining, supervised fine-tuning, consistency
//! training — runs the same engine: copy the global model, walk the local
//! shard for `epochs` epochs in a stream-shuffled order, take one AdamW step
//! per mini-batch, and hand back the trained copy with its sample count.
//! The optimiser state lives in [`ClientState`] and survives across rounds;
//! it is never averaged.
//!
//! The reported loss is the sample-weighted mean of the task loss over every
//! batch of the invocation, measured before each step and excluding the
//! proximal penalty, so curves stay comparable across `mu` settings.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::{AugmentPolicy, Dataset};
use crate::error::{ensure, Error, Result};
use crate::fed::fedprox::proximal_term;
use crate::fed::semifl::consistency_loss;
use crate::fed::{FedConfig, Method, Stage};
use crate::masking::{blockwise_mask, random_mask, MaskPlan};
use crate::model::{
    beit_loss, classify, decode_beit, decode_mae, encode_beit, encode_full, encode_mae, mae_loss,
    patchify, BoundParams, ModelConfig, ModelParams,
};
use crate::numerics::graph::Graph;
use crate::numerics::optimizer::{adamw_step, zero_grads, AdamW, OptimizerState};
use crate::numerics::schedule::Schedule;
use crate::numerics::tensor::Real;
use crate::seeds::{self, domain};
use crate::tokenizer::{tokenize, Codebook};

/// What the server keeps per client between rounds.
#[derive(Debug, Clone)]
pub struct ClientState<F: Real> {
    pub id: usize,
    /// AdamW moments, carried across rounds so momentum is not reset every
    /// time the client is selected.
    pub opt: OptimizerState<F>,
}

impl<F: Real> ClientState<F> {
    pub fn new(id: usize, params: &ModelParams<F>) -> Self {
        ClientState {
            id,
            opt: OptimizerState::new(params.tensors()),
        }
    }
}

/// What a client sends back after local training.
#[derive(Debug, Clone)]
pub struct ClientUpdate<F: Real> {
    pub id: usize,
    pub params: ModelParams<F>,
    /// Samples this client trained on; the merge weight.
    pub size: usize,
    /// Sample-weighted mean task loss over the invocation.
    pub loss: f64,
    /// Learning rate of the round's first local epoch.
    pub lr: f64,
}

/// The exact order a client walks its shard in epoch `e` of round `t`.
///
/// Public so audits can verify the plan: whatever the thread schedule, a
/// client only ever reads a permutation of its own indices.
pub fn epoch_order(
    seed: u64,
    stage: Stage,
    client: usize,
    t: u64,
    e: usize,
    indices: &[usize],
) -> Vec<usize> {
    let mut order = indices.to_vec();
    let mut rng = seeds::stream(
        seed,
        &[domain::SHUFFLE, stage.tag(), client as u64, t, e as u64],
    );
    order.shuffle(&mut rng);
    order
}

enum Objective<'a, F: Real> {
    Mae,
    Beit(&'a Codebook<F>),
    Supervised,
    Consistency(&'a AugmentPolicy),
}

/// Local masked pretraining on the client's full shard.
pub fn client_update_pretrain<F: Real>(
    cfg: &FedConfig,
    mcfg: &ModelConfig,
    state: &mut ClientState<F>,
    train: &Dataset<F>,
    indices: &[usize],
    codebook: Option<&Codebook<F>>,
    w_t: &ModelParams<F>,
    t: u64,
) -> Result<Option<ClientUpdate<F>>> {
    ensure!(
        cfg.stage == Stage::Pretrain,
        "pretraining update called for a {} stage",
        cfg.stage.name()
    );
    let objective = match cfg.method {
        Method::Mae => Objective::Mae,
        Method::Beit => Objective::Beit(
            codebook.ok_or_else(|| Error::contract("token pretraining needs a fitted codebook"))?,
        ),
        Method::Supervised => {
            return Err(Error::contract("pretraining cannot use the supervised objective"))
        }
    };
    run_local(cfg, mcfg, state, train, indices, w_t, t, objective)
}

/// Supervised fine-tuning on the client's labelled subset.
pub fn client_update_finetune<F: Real>(
    cfg: &FedConfig,
    mcfg: &ModelConfig,
    state: &mut ClientState<F>,
    train: &Dataset<F>,
    labeled: &[usize],
    w_t: &ModelParams<F>,
    t: u64,
) -> Result<Option<ClientUpdate<F>>> {
    ensure!(
        cfg.stage == Stage::Finetune && cfg.method == Method::Supervised,
        "supervised update called for {} / {}",
        cfg.stage.name(),
        cfg.method.name()
    );
    run_local(cfg, mcfg, state, train, labeled, w_t, t, Objective::Supervised)
}

/// Consistency training for the dedicated unlabeled client.
///
/// Returns `None` — the client abstains — when the confidence filter rejects
/// every image in every batch, on top of the usual empty-shard case.
pub fn client_update_consistency<F: Real>(
    cfg: &FedConfig,
    mcfg: &ModelConfig,
    state: &mut ClientState<F>,
    train: &Dataset<F>,
    unlabeled: &[usize],
    w_t: &ModelParams<F>,
    t: u64,
) -> Result<Option<ClientUpdate<F>>> {
    ensure!(
        cfg.semi_fl,
        "consistency update called without the extra unlabeled client enabled"
    );
    let policy = cfg
        .augment
        .as_ref()
        .ok_or_else(|| Error::contract("consistency training needs an augmentation policy"))?;
    run_local(
        cfg,
        mcfg,
        state,
        train,
        unlabeled,
        w_t,
        t,
        Objective::Consistency(policy),
    )
}

#[allow(clippy::too_many_arguments)]
fn run_local<F: Real>(
    cfg: &FedConfig,
    mcfg: &ModelConfig,
    state: &mut ClientState<F>,
    train: &Dataset<F>,
    indices: &[usize],
    w_t: &ModelParams<F>,
    t: u64,
    objective: Objective<'_, F>,
) -> Result<Option<ClientUpdate<F>>> {
    if indices.is_empty() {
        return Ok(None);
    }
    ensure!(
        t >= 1 && t <= cfg.rounds,
        "round {t} lies outside 1..={}",
        cfg.rounds
    );
    ensure!(
        indices.iter().all(|&i| i < train.len()),
        "client {} was handed indices beyond the dataset",
        state.id
    );
    let expected = match &objective {
        Objective::Mae => Method::Mae.model_kind(),
        Objective::Beit(_) => Method::Beit.model_kind(),
        Objective::Supervised | Objective::Consistency(_) => Method::Supervised.model_kind(),
    };
    ensure!(
        w_t.kind() == expected,
        "objective expects a {} model, got {}",
        expected.name(),
        w_t.kind().name()
    );

    let epochs = cfg.epochs as u64;
    let sched = Schedule::new(
        F::from_f64(cfg.lr),
        F::from_f64(cfg.lr_floor),
        cfg.warmup_rounds * epochs,
        cfg.rounds * epochs,
    )?;
    let hyper = AdamW::new(F::from_f64(cfg.weight_decay));
    let mut local = w_t.clone();
    let mut first_lr = 0.0;
    let mut weighted = 0.0;
    let mut seen = 0usize;

    for e in 0..cfg.epochs {
        let lr = sched.at((t - 1) * epochs + e as u64)?;
        if e == 0 {
            first_lr = lr.to_f64();
        }
        let order = epoch_order(cfg.seed, cfg.stage, state.id, t, e, indices);
        // One draw stream per epoch, consumed image by image in walk order,
        // so masks and views depend on the coordinates of the draw alone.
        let coords = [cfg.stage.tag(), state.id as u64, t, e as u64];
        let mut mask_rng =
            seeds::stream(cfg.seed, &[domain::MASK, coords[0], coords[1], coords[2], coords[3]]);
        let mut aug_rng =
            seeds::stream(cfg.seed, &[domain::AUGMENT, coords[0], coords[1], coords[2], coords[3]]);
        for batch in order.chunks(cfg.batch) {
            let stepped = step_batch(
                cfg,
                mcfg,
                &objective,
                train,
                batch,
                &mut local,
                &mut state.opt,
                &hyper,
                lr,
                w_t,
                &mut mask_rng,
                &mut aug_rng,
            )?;
            if let Some((value, counted)) = stepped {
                weighted += value * counted as f64;
                seen += counted;
            }
        }
    }

    // The consistency objective can reject every batch; an update that never
    // stepped has nothing to report, so the client abstains this round.
    if seen == 0 {
        return Ok(None);
    }

    // Gradient buffers are per-step scratch; the update ships parameters only.
    for t in local.tensors_mut() {
        t.grad = None;
    }

    Ok(Some(ClientUpdate {
        id: state.id,
        params: local,
        size: indices.len(),
        loss: weighted / seen as f64,
        lr: first_lr,
    }))
}

fn draw_plan(cfg: &FedConfig, mcfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<MaskPlan> {
    if cfg.blockwise {
        let (gh, gw) = mcfg.grid();
        blockwise_mask(gh, gw, cfg.mask_ratio, rng)
    } else {
        random_mask(mcfg.num_patches(), cfg.mask_ratio, rng)
    }
}

/// One optimizer step on one batch. Returns the data-loss value and how many
/// images entered it, or `None` when the batch was skipped without a step
/// (nothing survived the consistency filter).
#[allow(clippy::too_many_arguments)]
fn step_batch<F: Real>(
    cfg: &FedConfig,
    mcfg: &ModelConfig,
    objective: &Objective<'_, F>,
    train: &Dataset<F>,
    batch: &[usize],
    local: &mut ModelParams<F>,
    opt: &mut OptimizerState<F>,
    hyper: &AdamW<F>,
    lr: F,
    w_t: &ModelParams<F>,
    mask_rng: &mut ChaCha8Rng,
    aug_rng: &mut ChaCha8Rng,
) -> Result<Option<(f64, usize)>> {
    let mut g = Graph::new();
    let (total, value, counted) = {
        let bp = BoundParams::bind(&mut g, local)?;
        let (data_loss, counted) = match objective {
            Objective::Mae => {
                let mut rows = Vec::with_capacity(batch.len());
                for &i in batch {
                    let patches = patchify(
                        train.image(i),
                        mcfg.image_h,
                        mcfg.image_w,
                        mcfg.channels,
                        mcfg.patch,
                    )?;
                    let pt = g.constant(vec![mcfg.num_patches(), mcfg.patch_dim()], patches)?;
                    let plan = draw_plan(cfg, mcfg, mask_rng)?;
                    let enc = encode_mae(&mut g, &bp, mcfg, pt, &plan)?;
                    let dec = decode_mae(&mut g, &bp, mcfg, enc, &plan)?;
                    let li = mae_loss(&mut g, dec, pt, &plan)?;
                    rows.push(g.reshape(li, vec![1, 1])?);
                }
                let cat = g.concat_rows(&rows)?;
                (g.mean_all(cat), batch.len())
            }
            Objective::Beit(cb) => {
                let mut rows = Vec::with_capacity(batch.len());
                for &i in batch {
                    let patches = patchify(
                        train.image(i),
                        mcfg.image_h,
                        mcfg.image_w,
                        mcfg.channels,
                        mcfg.patch,
                    )?;
                    let tokens = patches
                        .chunks(mcfg.patch_dim())
                        .map(|p| tokenize(p, cb))
                        .collect::<Result<Vec<_>>>()?;
                    let pt = g.constant(vec![mcfg.num_patches(), mcfg.patch_dim()], patches)?;
                    let plan = draw_plan(cfg, mcfg, mask_rng)?;
                    let enc = encode_beit(&mut g, &bp, mcfg, pt, &plan)?;
                    let logits = decode_beit(&mut g, &bp, enc)?;
                    let li = beit_loss(&mut g, logits, &plan, &tokens)?;
                    rows.push(g.reshape(li, vec![1, 1])?);
                }
                let cat = g.concat_rows(&rows)?;
                (g.mean_all(cat), batch.len())
            }
            Objective::Supervised => {
                let mut rows = Vec::with_capacity(batch.len());
                let mut labels = Vec::with_capacity(batch.len());
                for &i in batch {
                    let patches = patchify(
                        train.image(i),
                        mcfg.image_h,
                        mcfg.image_w,
                        mcfg.channels,
                        mcfg.patch,
                    )?;
                    let pt = g.constant(vec![mcfg.num_patches(), mcfg.patch_dim()], patches)?;
                    let enc = encode_full(&mut g, &bp, mcfg, pt)?;
                    rows.push(classify(&mut g, &bp, enc)?);
                    labels.push(train.label(i));
                }
                let cat = g.concat_rows(&rows)?;
                (g.cross_entropy_rows(cat, &labels)?, batch.len())
            }
            Objective::Consistency(policy) => {
                let images: Vec<&[F]> = batch.iter().map(|&i| train.image(i)).collect();
                let built = consistency_loss(
                    &mut g,
                    &bp,
                    mcfg,
                    local,
                    &images,
                    train.shape(),
                    policy,
                    cfg.confidence,
                    aug_rng,
                )?;
                match built {
                    Some((loss, used)) => (loss, used.len()),
                    None => return Ok(None),
                }
            }
        };
        let total = match proximal_term(&mut g, &bp, w_t, cfg.mu)? {
            Some(penalty) => g.add(data_loss, penalty)?,
            None => data_loss,
        };
        (total, g.value(data_loss)?.to_f64(), counted)
    };

    let grads = g.backward(total)?;
    let pairs: Vec<(usize, Vec<F>)> = g
        .param_grads(&grads)
        .map(|(slot, buf)| (slot, buf.to_vec()))
        .collect();
    zero_grads(local.tensors_mut());
    for (slot, buf) in &pairs {
        local.tensors_mut()[*slot].accumulate_grad(buf)?;
    }
    adamw_step(local.tensors_mut(), opt, hyper, lr)?;
    Ok(Some((value, counted)))
}
