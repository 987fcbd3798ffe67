//! Experiment configuration and named presets.
//!
//! Every field has a default taken from the `lorenz-desk` preset; config
//! files only override what they name.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dynamics::{
    DoubleWellParams, LinearGaussianParams, LorenzParams, ObservationModel, ObservationOperator, System,
};
use crate::error::{Error, Result};
use crate::interpolant::InterpolantSchedule;
use crate::net::{Activation, Architecture};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Lorenz63,
    DoubleWell,
    LinearGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationKind {
    ArctanFirst,
    Cube,
    Identity,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorOrder {
    First,
    #[default]
    Second,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[default]
    Unbiased,
    BiasedJensen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Linear,
}

/// `[system]`: dynamics, dataset size and observation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub kind: SystemKind,
    /// Transition noise: sigma (Lorenz), beta_d (double-well), noise (linear).
    pub process_sigma: f64,
    /// Noise level for the evaluation split; defaults to `process_sigma`.
    pub eval_process_sigma: Option<f64>,
    /// Keep only evaluation trajectories that switch wells.
    pub eval_require_switch: bool,
    /// Lorenz RK4 step per recorded transition.
    pub h: f64,
    /// Double-well Euler–Maruyama step.
    pub dt: f64,
    /// Linear-Gaussian coefficient `a` in `x' = a x + noise`.
    pub linear_coeff: f64,
    /// Initial states of scalar systems are uniform on `[-init_range, init_range]`.
    pub init_range: f64,
    pub burn_in: usize,
    pub n_traj: usize,
    /// Transitions per trajectory (states = `traj_len + 1`).
    pub traj_len: usize,
    pub observation: ObservationKind,
    pub mask: Vec<usize>,
    pub gamma: f64,
}

/// `[train]`: drift network and optimiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Optimiser steps per epoch.
    pub steps_per_epoch: usize,
    /// Pairs per minibatch (K').
    pub batch_pairs: usize,
    /// Noise draws per pair (S).
    pub noise_draws: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: Option<f64>,
    /// Checkpoint period in epochs; 0 writes only the final model.
    pub checkpoint_every: usize,
    /// Conditioning window length (L).
    pub cond_len: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub embed_dim: usize,
    pub activation: Activation,
    /// Interpolant noise scale.
    pub eta: f64,
}

/// `[infer]`: guided sampling, baseline and evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Last estimated step K.
    pub horizon: usize,
    /// Evaluation trajectories to assimilate.
    pub n_cases: usize,
    /// Independent estimates per case.
    pub ensemble_size: usize,
    /// Monte-Carlo endpoint samples (J).
    pub mc_samples: usize,
    /// Guidance step size (zeta), applied at every guided node.
    pub zeta: f64,
    /// Interpolation grid steps (N).
    pub grid_steps: usize,
    pub posterior_order: PosteriorOrder,
    pub estimator: Estimator,
    /// First grid node receiving guidance (n0).
    pub guidance_start: usize,
    /// Cap on the norm of a single node's guidance displacement.
    pub guidance_clip: Option<f64>,
    pub bpf_particles: usize,
    /// Write per-node sampler diagnostics.
    pub diagnostics: bool,
    /// Values of J swept by `ablate`.
    pub ablate_j: Vec<usize>,
    /// Estimators swept by `ablate` at the configured J.
    pub ablate_estimators: Vec<Estimator>,
    pub ablate_seeds: usize,
    /// Evaluation cases per ablation seed; seeds use disjoint cases.
    pub ablate_cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Preset the file's values are layered on.
    pub preset: String,
    pub seed: u64,
    pub system: SystemConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
}

pub const PRESETS: [&str; 5] = [
    "lorenz-paper",
    "lorenz-desk",
    "doublewell-paper",
    "doublewell-desk",
    "lingauss-test",
];

impl Default for SystemConfig {
    fn default() -> Self {
        ExperimentConfig::lorenz_desk().system
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        ExperimentConfig::lorenz_desk().train
    }
}

impl Default for InferConfig {
    fn default() -> Self {
        ExperimentConfig::lorenz_desk().infer
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::lorenz_desk()
    }
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "lorenz-paper" => Ok(Self::lorenz_paper()),
            "lorenz-desk" => Ok(Self::lorenz_desk()),
            "doublewell-paper" => Ok(Self::doublewell_paper()),
            "doublewell-desk" => Ok(Self::doublewell_desk()),
            "lingauss-test" => Ok(Self::lingauss_test()),
            other => Err(Error::InvalidConfig(alloc::format!(
                "unknown preset '{other}', expected one of {PRESETS:?}"
            ))),
        }
    }

    /// Lorenz-63 at the published scale: 1024 trajectories of 1024 states,
    /// 5×256 network, 23000 epochs, J = 21, zeta = 2e-4.
    pub fn lorenz_paper() -> Self {
        Self {
            preset: "lorenz-paper".to_string(),
            seed: 0,
            system: SystemConfig {
                kind: SystemKind::Lorenz63,
                process_sigma: 0.25,
                eval_process_sigma: None,
                eval_require_switch: false,
                h: 0.05,
                dt: 0.1,
                linear_coeff: 0.9,
                init_range: 2.0,
                burn_in: 1000,
                n_traj: 1024,
                traj_len: 1023,
                observation: ObservationKind::ArctanFirst,
                mask: Vec::new(),
                gamma: 0.25,
            },
            train: TrainConfig {
                epochs: 23_000,
                steps_per_epoch: 1,
                batch_pairs: 256,
                noise_draws: 4,
                learning_rate: 0.005,
                lr_schedule: LrSchedule::Linear,
                beta1: 0.9,
                beta2: 0.999,
                adam_eps: 1e-8,
                grad_clip: None,
                checkpoint_every: 1000,
                cond_len: 1,
                hidden_layers: 5,
                hidden_width: 256,
                embed_dim: 4,
                activation: Activation::Silu,
                eta: 1.0,
            },
            infer: InferConfig {
                horizon: 15,
                n_cases: 64,
                ensemble_size: 1,
                mc_samples: 21,
                zeta: 2e-4,
                grid_steps: 128,
                posterior_order: PosteriorOrder::Second,
                estimator: Estimator::Unbiased,
                guidance_start: 1,
                guidance_clip: None,
                bpf_particles: 16_384,
                diagnostics: true,
                ablate_j: vec![3, 6, 12, 21, 30, 50],
                ablate_estimators: vec![Estimator::Unbiased, Estimator::BiasedJensen],
                ablate_seeds: 20,
                ablate_cases: 8,
            },
        }
    }

    /// Lorenz-63 scaled to a single CPU core: smaller dataset and network,
    /// 2000 epochs; inference settings unchanged.
    pub fn lorenz_desk() -> Self {
        let mut c = Self::lorenz_paper();
        c.preset = "lorenz-desk".to_string();
        c.system.n_traj = 512;
        c.system.traj_len = 255;
        c.train.epochs = 2000;
        c.train.checkpoint_every = 500;
        c.train.hidden_layers = 4;
        c.train.hidden_width = 128;
        c
    }

    /// Double-well with cubic observations: 500 trajectories of 100 states,
    /// 3×50 network, 5000 epochs, J = 17, zeta = 1. Evaluation trajectories
    /// use `beta_d = 1` so that wells switch; guidance steps are capped at 0.1.
    pub fn doublewell_paper() -> Self {
        Self {
            preset: "doublewell-paper".to_string(),
            seed: 0,
            system: SystemConfig {
                kind: SystemKind::DoubleWell,
                process_sigma: 0.2,
                eval_process_sigma: Some(1.0),
                eval_require_switch: true,
                h: 0.05,
                dt: 0.1,
                linear_coeff: 0.9,
                init_range: 2.0,
                burn_in: 0,
                n_traj: 500,
                traj_len: 99,
                observation: ObservationKind::Cube,
                mask: Vec::new(),
                gamma: 0.2,
            },
            train: TrainConfig {
                epochs: 5000,
                steps_per_epoch: 1,
                batch_pairs: 256,
                noise_draws: 4,
                learning_rate: 0.005,
                lr_schedule: LrSchedule::Linear,
                beta1: 0.9,
                beta2: 0.999,
                adam_eps: 1e-8,
                grad_clip: None,
                checkpoint_every: 1000,
                cond_len: 1,
                hidden_layers: 3,
                hidden_width: 50,
                embed_dim: 4,
                activation: Activation::Silu,
                eta: 1.0,
            },
            infer: InferConfig {
                horizon: 99,
                n_cases: 50,
                ensemble_size: 1,
                mc_samples: 17,
                zeta: 1.0,
                grid_steps: 128,
                posterior_order: PosteriorOrder::Second,
                estimator: Estimator::Unbiased,
                guidance_start: 1,
                guidance_clip: Some(0.1),
                bpf_particles: 16_384,
                diagnostics: true,
                ablate_j: vec![3, 6, 12, 17, 30, 50],
                ablate_estimators: vec![Estimator::Unbiased, Estimator::BiasedJensen],
                ablate_seeds: 20,
                ablate_cases: 5,
            },
        }
    }

    pub fn doublewell_desk() -> Self {
        let mut c = Self::doublewell_paper();
        c.preset = "doublewell-desk".to_string();
        c.train.epochs = 2000;
        c.train.checkpoint_every = 500;
        c
    }

    /// Scalar AR(1) chain `x' = 0.9 x + 0.1 eps` with identity observations;
    /// small enough for closed-form checks.
    pub fn lingauss_test() -> Self {
        let mut c = Self::doublewell_paper();
        c.preset = "lingauss-test".to_string();
        c.system.kind = SystemKind::LinearGaussian;
        c.system.process_sigma = 0.1;
        c.system.eval_process_sigma = None;
        c.system.eval_require_switch = false;
        c.system.linear_coeff = 0.9;
        c.system.n_traj = 2000;
        c.system.traj_len = 4;
        c.system.observation = ObservationKind::Identity;
        c.system.gamma = 0.1;
        c.train.epochs = 2000;
        c.train.hidden_layers = 3;
        c.train.hidden_width = 64;
        c.infer.horizon = 4;
        c.infer.n_cases = 64;
        c.infer.mc_samples = 8;
        c.infer.zeta = 1.0;
        c
    }

    pub fn system(&self) -> System {
        let s = &self.system;
        match s.kind {
            SystemKind::Lorenz63 => System::Lorenz63(LorenzParams {
                sigma: s.process_sigma,
                h: s.h,
                ..Default::default()
            }),
            SystemKind::DoubleWell => System::DoubleWell(DoubleWellParams {
                beta_d: s.process_sigma,
                dt: s.dt,
                init_range: s.init_range,
            }),
            SystemKind::LinearGaussian => System::LinearGaussian(LinearGaussianParams {
                a: s.linear_coeff,
                noise: s.process_sigma,
                init_range: s.init_range,
            }),
        }
    }

    /// System used to simulate the evaluation split.
    pub fn eval_system(&self) -> System {
        let sys = self.system();
        match self.system.eval_process_sigma {
            Some(level) => sys.with_noise(level),
            None => sys,
        }
    }

    pub fn observation_operator(&self) -> ObservationOperator {
        match self.system.observation {
            ObservationKind::ArctanFirst => ObservationOperator::ArctanFirst,
            ObservationKind::Cube => ObservationOperator::Cube,
            ObservationKind::Identity => ObservationOperator::Identity,
            ObservationKind::Mask => ObservationOperator::Mask(self.system.mask.clone()),
        }
    }

    pub fn observation_model(&self) -> ObservationModel {
        ObservationModel {
            operator: self.observation_operator(),
            gamma: self.system.gamma,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            state_dim: self.system().dim(),
            cond_len: self.train.cond_len,
            hidden_layers: self.train.hidden_layers,
            hidden_width: self.train.hidden_width,
            embed_dim: self.train.embed_dim,
            activation: self.train.activation,
        }
    }

    pub fn schedule(&self) -> InterpolantSchedule {
        InterpolantSchedule::with_eta(self.train.eta)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let (s, t, i) = (&self.system, &self.train, &self.infer);
        let positive = [
            ("system.h", s.h),
            ("system.dt", s.dt),
            ("system.gamma", s.gamma),
            ("train.learning_rate", t.learning_rate),
            ("train.eta", t.eta),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(alloc::format!("{name} must be > 0, got {v}"));
            }
        }
        if !(s.process_sigma >= 0.0) || s.eval_process_sigma.is_some_and(|v| !(v >= 0.0)) {
            return bad("process noise must be >= 0".into());
        }
        if s.n_traj == 0 || s.traj_len == 0 {
            return bad("system.n_traj and system.traj_len must be >= 1".into());
        }
        if t.batch_pairs == 0 || t.noise_draws == 0 || t.steps_per_epoch == 0 {
            return bad("train batch sizes must be >= 1".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.adam_eps > 0.0) {
            return bad("Adam parameters out of range".into());
        }
        if t.cond_len == 0 {
            return bad("train.cond_len (L) must be >= 1".into());
        }
        if t.cond_len > s.traj_len {
            return bad("train.cond_len exceeds trajectory length".into());
        }
        if i.mc_samples == 0 {
            return bad("infer.mc_samples (J) must be >= 1".into());
        }
        if i.grid_steps < 2 {
            return bad("infer.grid_steps (N) must be >= 2".into());
        }
        if !(i.zeta >= 0.0 && i.zeta.is_finite()) {
            return bad(alloc::format!("infer.zeta must be >= 0, got {}", i.zeta));
        }
        if i.ensemble_size == 0 || i.n_cases == 0 {
            return bad("infer.ensemble_size and infer.n_cases must be >= 1".into());
        }
        if i.guidance_start == 0 || i.guidance_start >= i.grid_steps {
            return bad("infer.guidance_start must satisfy 1 <= n0 < N".into());
        }
        if i.horizon < t.cond_len {
            return bad("infer.horizon must be >= cond_len".into());
        }
        if i.horizon > s.traj_len {
            return bad("infer.horizon exceeds trajectory length".into());
        }
        if i.guidance_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return bad("infer.guidance_clip must be > 0".into());
        }
        if i.ablate_seeds == 0 || i.ablate_cases == 0 || i.ablate_j.contains(&0) {
            return bad("ablation seeds, cases and J values must be >= 1".into());
        }
        if s.eval_require_switch && s.kind != SystemKind::DoubleWell {
            return bad("system.eval_require_switch applies to the double-well only".into());
        }
        if i.bpf_particles == 0 {
            return bad("infer.bpf_particles must be >= 1".into());
        }
        self.architecture().validate()?;
        self.observation_operator().validate(self.system().dim())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            let c = ExperimentConfig::preset(name).unwrap();
            c.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(c.preset, name);
        }
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn full_scale_inference_settings() {
        let l = ExperimentConfig::lorenz_paper();
        assert_eq!((l.infer.mc_samples, l.infer.zeta), (21, 2e-4));
        assert_eq!((l.system.gamma, l.system.process_sigma), (0.25, 0.25));
        let d = ExperimentConfig::doublewell_paper();
        assert_eq!((d.infer.mc_samples, d.infer.zeta), (17, 1.0));
        assert_eq!((d.train.hidden_layers, d.train.hidden_width), (3, 50));
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = ExperimentConfig::default();
        c.infer.mc_samples = 0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.infer.grid_steps = 1;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.infer.zeta = -1.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.train.cond_len = 0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.infer.ensemble_size = 0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.system.observation = ObservationKind::Mask;
        c.system.mask = vec![5];
        assert!(c.validate().is_err());
    }
}
