//! Finite-difference verification of the reverse pass.
//!
//! The checker rebuilds the caller's graph from perturbed copies of the
//! parameters, so it exercises exactly the code path training uses. Large
//! parameters are probed at a deterministic sample of coordinates.

use crate::error::{ensure, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::tensor::{Real, Tensor};
use crate::seeds;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOpts {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates probed per parameter; smaller parameters are probed fully.
    pub max_coords: usize,
    /// Stream for the coordinate subsample.
    pub seed: u64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        GradCheckOpts {
            eps: 1e-5,
            max_coords: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WorstCoord {
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub worst: Option<WorstCoord>,
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "max relative error {:.3e} over {} coordinates",
            self.max_rel_err, self.coords_checked
        )?;
        if let Some(w) = self.worst {
            write!(
                f,
                " (worst: param {} coord {}, analytic {:.6e} vs numeric {:.6e})",
                w.param, w.coord, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// Compare the reverse pass of `build` against central finite differences.
///
/// `build` receives one leaf per parameter (same order) and must return a
/// scalar loss node. It is called many times and must be deterministic in the
/// parameter values.
pub fn grad_check<F: Real>(
    params: &[Tensor<F>],
    build: &dyn Fn(&mut Graph<F>, &[NodeId]) -> Result<NodeId>,
    opts: &GradCheckOpts,
) -> Result<GradReport> {
    ensure!(!params.is_empty(), "gradient check needs at least one parameter");

    let eval = |ps: &[Tensor<F>]| -> Result<(Graph<F>, NodeId)> {
        let mut g = Graph::new();
        let ids = ps
            .iter()
            .enumerate()
            .map(|(i, p)| g.leaf(p.shape().to_vec(), p.data().to_vec(), Some(i)))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut g, &ids)?;
        ensure!(
            g.data(loss).len() == 1,
            "gradient check requires a scalar loss, got shape {:?}",
            g.shape(loss)
        );
        Ok((g, loss))
    };

    let (graph, loss) = eval(params)?;
    let base = graph.value(loss)?;
    ensure!(base.is_finite(), "loss is not finite at the given parameters");
    let node_grads = graph.backward(loss)?;
    let mut analytic: Vec<Vec<F>> = params.iter().map(|p| vec![F::zero(); p.numel()]).collect();
    for (slot, gslice) in graph.param_grads(&node_grads) {
        for (a, &v) in analytic[slot].iter_mut().zip(gslice) {
            *a = *a + v;
        }
    }

    let mut rng = seeds::stream(opts.seed, &[]);
    let eps = F::from_f64(opts.eps);
    let mut scratch: Vec<Tensor<F>> = params.to_vec();
    let mut report = GradReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };

    for i in 0..params.len() {
        let n = params[i].numel();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut picked = rand::seq::index::sample(&mut rng, n, opts.max_coords).into_vec();
            picked.sort_unstable();
            picked
        };
        for c in coords {
            let orig = scratch[i].data()[c];
            scratch[i].data_mut()[c] = orig + eps;
            let (gp, lp) = eval(&scratch)?;
            let plus = gp.value(lp)?.to_f64();
            scratch[i].data_mut()[c] = orig - eps;
            let (gm, lm) = eval(&scratch)?;
            let minus = gm.value(lm)?.to_f64();
            scratch[i].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[i][c].to_f64();
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some(WorstCoord {
                    param: i,
                    coord: c,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
