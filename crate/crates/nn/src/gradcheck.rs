//! Central finite-difference verification of backpropagated gradients.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub samples: Vec<GradCheckSample>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckSample> {
        self.samples.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub samples: usize,
    pub eps: f64,
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { samples: 100, eps: 1e-6, floor: 1e-8, seed: 0 }
    }
}

/// Compares backprop gradients of `build_loss` against central differences
/// on `cfg.samples` scalar parameters drawn uniformly from `candidates`.
pub fn check_param_gradients<F>(
    store: &mut ParamStore<f64>,
    candidates: &[ParamId],
    cfg: GradCheckConfig,
    build_loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = build_loss(&mut g)?;
        g.backward(loss)?
    };
    let mut slots: Vec<(ParamId, usize)> = Vec::new();
    for &id in candidates {
        for i in 0..store.param(id).numel() {
            slots.push((id, i));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let chosen: Vec<(ParamId, usize)> = slots.choose_multiple(&mut rng, cfg.samples).copied().collect();
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = build_loss(&mut g)?;
        Ok(g.value(loss).item())
    };
    let mut samples = Vec::with_capacity(chosen.len());
    for (id, i) in chosen {
        let orig = store.param(id).data()[i];
        store.param_mut(id).data_mut()[i] = orig + cfg.eps;
        let plus = eval(store)?;
        store.param_mut(id).data_mut()[i] = orig - cfg.eps;
        let minus = eval(store)?;
        store.param_mut(id).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.eps);
        let a = analytic.param(id).map_or(0.0, |t| t.data()[i]);
        samples.push(GradCheckSample {
            param: store.param_name(id).to_string(),
            index: i,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric, cfg.floor),
        });
    }
    Ok(GradCheckReport { samples })
}
