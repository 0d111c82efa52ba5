//! Fixtures shared by the benchmarks: untrained models of production size.

use std::sync::Arc;

use cdiff::data::Normalizer;
use cdiff::denoiser::{DenoiserModel, DEFAULT_HORIZON};
use cdiff::diffcore::seeded_rng;
use cdiff::dynmodel::DynamicsModel;
use cdiff::planner::Models;
use cdiff::{Activation, EnvSpec, MlpParams};

pub fn normalizer(spec: &EnvSpec) -> Normalizer {
    Normalizer {
        state_offset: spec.obs_low.iter().zip(&spec.obs_high).map(|(l, h)| 0.5 * (l + h)).collect(),
        state_scale: spec.obs_low.iter().zip(&spec.obs_high).map(|(l, h)| 0.5 * (h - l)).collect(),
        action_offset: vec![0.0; spec.act_dim],
        action_scale: spec.action_bounds.clone(),
    }
}

/// Randomly initialized denoiser and dynamics model with default sizes.
pub fn random_models(spec: &EnvSpec, seed: u64) -> Models {
    let mut den = DenoiserModel::zeros(DEFAULT_HORIZON, spec.obs_dim, spec.act_dim, 0, 20, 256).unwrap();
    den.params = MlpParams::init(den.params.sizes(), Activation::Mish, &mut seeded_rng(seed)).unwrap();
    den.env = Some(spec.id);
    den.normalizer = normalizer(spec);
    let sizes = [spec.obs_dim + spec.act_dim, 128, 128, spec.obs_dim];
    let dynamics = DynamicsModel {
        params: MlpParams::init(&sizes, Activation::Mish, &mut seeded_rng(seed + 1)).unwrap(),
        env: spec.id,
        normalizer: normalizer(spec),
        heldout_mse: 0.0,
    };
    Models {
        denoiser: Arc::new(den),
        conditional: None,
        dynamics: Some(Arc::new(dynamics)),
        state_std: vec![0.5; spec.obs_dim],
    }
}
