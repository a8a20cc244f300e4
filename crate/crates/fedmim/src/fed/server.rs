//! Round orchestration: sample a cohort, train it in parallel, merge.

use rayon::prelude::*;

use crate::data::{Dataset, LabelSplit, Partition};
use crate::error::{ensure, Error, Result};
use crate::eval::{accuracy, f1_per_class};
use crate::fed::client::{
    client_update_consistency, client_update_finetune, client_update_pretrain, ClientState,
    ClientUpdate,
};
use crate::fed::semifl::argmax;
use crate::fed::{aggregate::aggregate, select::select_clients, FedConfig, Method, Stage};
use crate::metrics::MetricsLog;
use crate::model::{classify, encode_full, patchify, BoundParams, ModelConfig, ModelParams};
use crate::numerics::graph::Graph;
use crate::numerics::tensor::Real;
use crate::seeds::{self, domain};
use crate::tokenizer::Codebook;

/// The data a federated stage trains and measures on.
///
/// `labels` restricts fine-tuning to each client's labelled subset; `None`
/// means every sample keeps its label. `codebook` is only consulted by token
/// pretraining.
#[derive(Clone, Copy)]
pub struct StageData<'a, F: Real> {
    pub train: &'a Dataset<F>,
    pub test: Option<&'a Dataset<F>>,
    pub part: &'a Partition,
    pub labels: Option<&'a LabelSplit>,
    pub codebook: Option<&'a Codebook<F>>,
}

/// What a finished stage hands back.
#[derive(Debug, Clone)]
pub struct StageOutput<F: Real> {
    pub params: ModelParams<F>,
    pub metrics: MetricsLog,
    /// Global model after every round; populated only when `cfg.trace` is
    /// set, for step-by-step comparisons against reference trainers.
    pub trajectory: Vec<ModelParams<F>>,
}

/// Accuracy and macro F1 of a classifier over a dataset.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub predictions: Vec<usize>,
}

/// Run one federated stage for `cfg.rounds` rounds starting from `init`.
///
/// Each round draws a cohort, runs every selected client's local update (in
/// parallel — results are bitwise independent of the thread count), merges
/// the returned models by sample count, and logs one metrics row per
/// participating client. Clients whose shard is empty sit the round out; a
/// round in which every participant is empty is a protocol error. With
/// `rounds = 0` the initial model is returned untouched.
pub fn run_stage<F: Real>(
    cfg: &FedConfig,
    mcfg: &ModelConfig,
    data: &StageData<'_, F>,
    init: &ModelParams<F>,
) -> Result<StageOutput<F>> {
    cfg.validate()?;
    mcfg.validate()?;
    validate_stage_inputs(cfg, mcfg, data, init)?;

    let n = cfg.clients;
    let extra = usize::from(cfg.semi_fl);
    let mut states: Vec<ClientState<F>> =
        (0..n + extra).map(|k| ClientState::new(k, init)).collect();
    let unlabeled_pool: Vec<usize> = if cfg.semi_fl {
        let ls = data.labels.expect("validated above");
        let mut pool: Vec<usize> = ls.unlabeled.iter().flatten().copied().collect();
        pool.sort_unstable();
        pool
    } else {
        Vec::new()
    };

    let mut w = init.clone();
    let mut log = MetricsLog::new();
    let mut trajectory = Vec::new();

    for t in 1..=cfg.rounds {
        let mut select_rng = seeds::stream(cfg.seed, &[domain::SELECT, cfg.stage.tag(), t]);
        let mut roster = select_clients(n, cfg.select, &mut select_rng)?;
        if cfg.semi_fl && t > cfg.rounds / 2 {
            roster.push(n); // the unlabeled client joins for the second half
        }

        let results: Vec<(ClientState<F>, Option<ClientUpdate<F>>)> = roster
            .par_iter()
            .map(|&k| -> Result<(ClientState<F>, Option<ClientUpdate<F>>)> {
                let mut st = states[k].clone();
                let upd = if cfg.semi_fl && k == n {
                    client_update_consistency(
                        cfg,
                        mcfg,
                        &mut st,
                        data.train,
                        &unlabeled_pool,
                        &w,
                        t,
                    )?
                } else {
                    match cfg.stage {
                        Stage::Pretrain => client_update_pretrain(
                            cfg,
                            mcfg,
                            &mut st,
                            data.train,
                            data.part.client(k),
                            data.codebook,
                            &w,
                            t,
                        )?,
                        Stage::Finetune => {
                            let shard = match data.labels {
                                Some(ls) => ls.labeled[k].as_slice(),
                                None => data.part.client(k),
                            };
                            client_update_finetune(cfg, mcfg, &mut st, data.train, shard, &w, t)?
                        }
                    }
                };
                Ok((st, upd))
            })
            .collect::<Result<_>>()?;

        let mut received = Vec::new();
        for (st, upd) in results {
            let k = st.id;
            states[k] = st;
            if let Some(u) = upd {
                log.push_client(t as usize, cfg.stage.name(), u.id, u.size, u.loss, u.lr);
                received.push((u.id, u.params, u.size));
            }
        }
        if received.is_empty() {
            return Err(Error::protocol(format!(
                "round {t}: every selected client had an empty shard"
            )));
        }
        w = aggregate(&received)?;

        if cfg.eval_interval > 0 && t % cfg.eval_interval == 0 {
            let test = data.test.expect("validated above");
            let summary = evaluate_classifier(mcfg, &w, test)?;
            log.push_eval(
                t as usize,
                cfg.stage.name(),
                test.len(),
                summary.accuracy,
                summary.macro_f1,
            );
        }
        if cfg.trace {
            trajectory.push(w.clone());
        }
    }

    Ok(StageOutput {
        params: w,
        metrics: log,
        trajectory,
    })
}

fn validate_stage_inputs<F: Real>(
    cfg: &FedConfig,
    mcfg: &ModelConfig,
    data: &StageData<'_, F>,
    init: &ModelParams<F>,
) -> Result<()> {
    ensure!(
        init.kind() == cfg.method.model_kind(),
        "the {} objective trains a {} model, got {}",
        cfg.method.name(),
        cfg.method.model_kind().name(),
        init.kind().name()
    );
    let shape = data.train.shape();
    ensure!(
        shape.h == mcfg.image_h && shape.w == mcfg.image_w && shape.c == mcfg.channels,
        "training images are {}x{}x{}, the model expects {}x{}x{}",
        shape.h,
        shape.w,
        shape.c,
        mcfg.image_h,
        mcfg.image_w,
        mcfg.channels
    );
    ensure!(
        data.part.num_clients() == cfg.clients,
        "partition covers {} clients, config says {}",
        data.part.num_clients(),
        cfg.clients
    );
    let covered: usize = data.part.clients().iter().map(|c| c.len()).sum();
    ensure!(
        covered == data.train.len(),
        "partition covers {covered} samples, the dataset holds {}",
        data.train.len()
    );
    if cfg.stage == Stage::Pretrain {
        let p = mcfg.num_patches();
        let hidden = (cfg.mask_ratio * p as f64 + 0.5).floor() as usize;
        ensure!(
            hidden >= 1 && hidden < p,
            "mask ratio {} hides {hidden} of {p} patches; need at least one \
             hidden and one visible",
            cfg.mask_ratio
        );
    }
    if cfg.method == Method::Beit {
        let cb = data
            .codebook
            .ok_or_else(|| Error::contract("token pretraining needs a fitted codebook"))?;
        ensure!(
            cb.dim() == mcfg.patch_dim(),
            "codebook entries have {} values, patches have {}",
            cb.dim(),
            mcfg.patch_dim()
        );
        ensure!(
            cb.len() == mcfg.vocab,
            "codebook holds {} tokens, the model predicts {}",
            cb.len(),
            mcfg.vocab
        );
    }
    if cfg.stage == Stage::Finetune {
        ensure!(
            data.train.num_classes() == mcfg.num_classes,
            "dataset has {} classes, the classifier predicts {}",
            data.train.num_classes(),
            mcfg.num_classes
        );
        if let Some(ls) = data.labels {
            ensure!(
                ls.labeled.len() == cfg.clients,
                "label split covers {} clients, config says {}",
                ls.labeled.len(),
                cfg.clients
            );
        }
    }
    if cfg.semi_fl {
        ensure!(
            data.labels.is_some(),
            "the consistency client needs a label split to know the unlabeled pool"
        );
    }
    if cfg.eval_interval > 0 {
        let test = data
            .test
            .ok_or_else(|| Error::contract("evaluation is enabled but no test split was given"))?;
        let ts = test.shape();
        ensure!(
            ts.h == shape.h && ts.w == shape.w && ts.c == shape.c,
            "test images do not match the training shape"
        );
        ensure!(
            test.num_classes() == data.train.num_classes(),
            "test split disagrees on the number of classes"
        );
    }
    Ok(())
}

/// Classify every image in `ds` with `params` and summarise the results.
///
/// Images are processed in fixed-size chunks across threads; predictions come
/// back in dataset order, so the summary does not depend on the thread count.
pub fn evaluate_classifier<F: Real>(
    mcfg: &ModelConfig,
    params: &ModelParams<F>,
    ds: &Dataset<F>,
) -> Result<EvalSummary> {
    ensure!(
        params.kind() == Method::Supervised.model_kind(),
        "evaluation needs a classifier, got a {} model",
        params.kind().name()
    );
    let shape = ds.shape();
    ensure!(
        shape.h == mcfg.image_h && shape.w == mcfg.image_w && shape.c == mcfg.channels,
        "evaluation images do not match the model's input shape"
    );
    ensure!(!ds.is_empty(), "cannot evaluate on an empty dataset");

    let indices: Vec<usize> = (0..ds.len()).collect();
    let predictions: Vec<usize> = indices
        .par_chunks(32)
        .map(|chunk| -> Result<Vec<usize>> {
            let mut g = Graph::new();
            let bp = BoundParams::bind(&mut g, params)?;
            let mut preds = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let patches = patchify(
                    ds.image(i),
                    mcfg.image_h,
                    mcfg.image_w,
                    mcfg.channels,
                    mcfg.patch,
                )?;
                let pt = g.constant(vec![mcfg.num_patches(), mcfg.patch_dim()], patches)?;
                let enc = encode_full(&mut g, &bp, mcfg, pt)?;
                let logits = classify(&mut g, &bp, enc)?;
                preds.push(argmax(g.data(logits)));
            }
            Ok(preds)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let acc = accuracy(&predictions, ds.labels())?;
    let f1 = f1_per_class(&predictions, ds.labels(), ds.num_classes())?;
    Ok(EvalSummary {
        accuracy: acc,
        macro_f1: f1.macro_f1,
        predictions,
    })
}
