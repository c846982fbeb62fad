//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Which coordinates of each parameter tensor to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Coords {
    All,
    /// At most `per_tensor` coordinates per tensor, chosen with `seed`.
    Sample {
        per_tensor: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name, coordinate, analytic and numeric value at the
    /// largest error.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Central differences of a scalar function of a flat vector.
pub fn numeric_gradient<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Compares the gradient buffers currently held in `store` with five-point
/// central differences of `loss`. `loss` must be deterministic.
///
/// The fourth-order stencil tolerates steps around 1e-3, which keeps
/// rounding noise small next to gradients near the relative-error floor.
/// Parameter values are restored exactly after each probe.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    mut loss: F,
    coords: Coords,
    step: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.tensor(id).len();
        let picks: Vec<usize> = match coords {
            Coords::All => (0..n).collect(),
            Coords::Sample { per_tensor, seed } => {
                if per_tensor >= n {
                    (0..n).collect()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(
                        seed ^ (id.index() as u64).wrapping_mul(0x9E37_79B9),
                    );
                    let mut v = sample(&mut rng, n, per_tensor).into_vec();
                    v.sort_unstable();
                    v
                }
            }
        };
        for j in picks {
            let analytic = store.tensor(id).grad().map_or(0.0, |g| g[j]);
            let orig = store.tensor(id).values()[j];
            let mut at = |offset: f64| -> Result<f64> {
                store.tensor_mut(id).values_mut()[j] = orig + offset;
                loss(store)
            };
            let (up2, up, down, down2) = (at(2.0 * step)?, at(step)?, at(-step)?, at(-2.0 * step)?);
            store.tensor_mut(id).values_mut()[j] = orig;
            let numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * step);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.param(id).name.clone(), j, analytic, numeric));
            }
        }
    }
    Ok(report)
}
