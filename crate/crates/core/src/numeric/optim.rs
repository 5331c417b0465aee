use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: Vec<AdamMoments>,
}

impl AdamState {
    pub fn for_store(store: &ParamStore) -> Self {
        AdamState {
            step: 0,
            moments: store
                .iter()
                .map(|(_, t)| AdamMoments {
                    m: vec![0.0; t.len()],
                    v: vec![0.0; t.len()],
                })
                .collect(),
        }
    }
}

/// One bias-corrected Adam update over raw buffers.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut AdamMoments,
    step: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || moments.m.len() != n || moments.v.len() != n {
        return Err(Error::shape(
            "adam_step",
            format!(
                "params {n}, grads {}, moments {}/{}",
                grads.len(),
                moments.m.len(),
                moments.v.len()
            ),
        ));
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..n {
        let g = grads[i];
        moments.m[i] = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        moments.v[i] = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = moments.m[i] / bc1;
        let v_hat = moments.v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Applies one Adam step to every parameter holding a gradient, then
/// increments the shared timestep.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.moments.len() != store.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} moment slots for {} params",
                state.moments.len(),
                store.len()
            ),
        ));
    }
    state.step += 1;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        let Some(g) = t.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        adam_update(
            t.data_mut(),
            &g,
            &mut state.moments[id.index()],
            state.step,
            cfg,
        )?;
    }
    Ok(())
}
