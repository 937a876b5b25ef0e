//! Central finite-difference checks of analytic gradients, in double precision.

use rand::seq::index::sample;
use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of one check: the worst relative error over the probed coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probed: usize,
    /// Probes discarded because the two perturbed evaluations took different
    /// branches of a piecewise op (see [`Graph::branch_signature`]).
    pub skipped: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Probes `build` at `inputs`.
///
/// `build` records a graph over one parameter leaf per input and returns any
/// output; the checked scalar is `sum(output * w)` for a fixed random `w`.
/// At most `max_coords` coordinates per input are probed (all when smaller).
/// A probe whose stencil straddles a relu or max-pool kink is skipped.
pub fn check_gradients<F, R>(
    inputs: &[Tensor<f64>],
    build: F,
    step: f64,
    max_coords: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    R: Rng,
{
    let record = |values: &[Tensor<f64>], weights: &Tensor<f64>| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let wv = g.input(weights.clone());
        let prod = g.mul(out, wv)?;
        let loss = g.sum(prod);
        Ok((g, vars, loss))
    };

    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.shape(out).to_vec()
    };
    let weights = Tensor::from_fn(&out_shape, |_| rng.random_range(-1.0..1.0));

    let (mut g, vars, loss) = record(inputs, &weights)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
    let base = g.branch_signature();

    let loss_at = |values: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let (g, _, loss) = record(values, &weights)?;
        Ok((g.value(loss).item(), g.branch_signature()))
    };

    let mut worst: f64 = 0.0;
    let (mut probed, mut skipped) = (0, 0);
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            sample(rng, n, max_coords).into_vec()
        };
        for j in coords {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            let ((lp, sp), (lm, sm)) = (loss_at(&plus)?, loss_at(&minus)?);
            if sp != base || sm != base {
                skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * step);
            worst = worst.max(relative_error(analytic[i][j], numeric, 1e-6));
            probed += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        probed,
        skipped,
    })
}
