//! Size-weighted merge of client models.

use crate::error::{ensure, Error, Result};
use crate::model::ModelParams;
use crate::numerics::tensor::Real;

/// Average `(client id, parameters, sample count)` triples into the next
/// global model, weighting each client by its share of the total samples.
///
/// The fold is an incremental weighted mean, `m += (s_k / S_k) * (x_k - m)`
/// with `S_k` the running sample total, taken in ascending client-id order
/// regardless of how the slice is arranged. That makes the result bitwise
/// independent of arrival order, and — because the correction term vanishes
/// exactly — a cohort of identical models is a bitwise fixed point.
/// An empty slice is a protocol violation — the round produced nothing to
/// merge — while mismatched layouts or duplicate ids are caller bugs.
pub fn aggregate<F: Real>(received: &[(usize, ModelParams<F>, usize)]) -> Result<ModelParams<F>> {
    if received.is_empty() {
        return Err(Error::protocol("a round ended with no client updates"));
    }
    let mut order: Vec<usize> = (0..received.len()).collect();
    order.sort_by_key(|&i| received[i].0);
    for pair in order.windows(2) {
        ensure!(
            received[pair[0]].0 != received[pair[1]].0,
            "client {} delivered two updates in one round",
            received[pair[0]].0
        );
    }

    let first = &received[order[0]].1;
    for &(id, ref params, size) in received {
        ensure!(size >= 1, "client {id} delivered an update with no samples");
        ensure!(
            params.kind() == first.kind(),
            "client {id} delivered a {} model into a {} merge",
            params.kind().name(),
            first.kind().name()
        );
        ensure!(
            params.names() == first.names(),
            "client {id} delivered a different parameter layout"
        );
        for (a, b) in params.tensors().iter().zip(first.tensors()) {
            ensure!(
                a.shape() == b.shape(),
                "client {id} delivered mismatched parameter shapes"
            );
        }
    }

    let mut out = first.clone();
    let mut running = received[order[0]].2;
    for &i in &order[1..] {
        let (_, ref params, size) = received[i];
        running += size;
        let w = F::from_f64(size as f64 / running as f64);
        for slot in 0..out.len() {
            let dst = out.tensors_mut()[slot].data_mut();
            for (m, &x) in dst.iter_mut().zip(params.tensors()[slot].data()) {
                *m = *m + w * (x - *m);
            }
        }
    }
    Ok(out)
}
