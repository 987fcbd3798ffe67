//! Ground-truth simulators, observation operators and dataset generation.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::par::map_chunks;
use crate::rng::{split_rng, standard_normal, uniform, RngStream};
use crate::state::{StateVector, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorenzParams {
    pub mu: f64,
    pub rho: f64,
    pub tau: f64,
    /// Standard deviation of the noise added after each RK4 step.
    pub sigma: f64,
    /// Model time per recorded transition.
    pub h: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        Self {
            mu: 10.0,
            rho: 28.0,
            tau: 8.0 / 3.0,
            sigma: 0.25,
            h: 0.05,
        }
    }
}

impl LorenzParams {
    fn vector_field(&self, a: f64, b: f64, c: f64) -> [f64; 3] {
        [self.mu * (b - a), a * (self.rho - c) - b, a * b - self.tau * c]
    }

    /// One classical RK4 step of size `h` on the raw coordinates.
    pub fn rk4(&self, x: [f64; 3], h: f64) -> [f64; 3] {
        let f = |p: [f64; 3]| {
            let v = self.vector_field(p[0], p[1], p[2]);
            [h * v[0], h * v[1], h * v[2]]
        };
        let k1 = f(x);
        let k2 = f([x[0] + 0.5 * k1[0], x[1] + 0.5 * k1[1], x[2] + 0.5 * k1[2]]);
        let k3 = f([x[0] + 0.5 * k2[0], x[1] + 0.5 * k2[1], x[2] + 0.5 * k2[2]]);
        let k4 = f([x[0] + k3[0], x[1] + k3[1], x[2] + k3[2]]);
        core::array::from_fn(|i| x[i] + (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0)
    }
}

/// `dx = -4x(x^2 - 1) dt + beta_d dW`, stepped with Euler–Maruyama.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoubleWellParams {
    pub beta_d: f64,
    pub dt: f64,
    /// Initial states are uniform on `[-init_range, init_range]`.
    pub init_range: f64,
}

impl Default for DoubleWellParams {
    fn default() -> Self {
        Self {
            beta_d: 0.2,
            dt: 0.1,
            init_range: 2.0,
        }
    }
}

/// Scalar AR(1) chain `x' = a x + noise * eps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianParams {
    pub a: f64,
    pub noise: f64,
    pub init_range: f64,
}

impl Default for LinearGaussianParams {
    fn default() -> Self {
        Self {
            a: 0.9,
            noise: 0.1,
            init_range: 2.0,
        }
    }
}

/// A stochastic system with a Gaussian one-step transition
/// `x_{k+1} = step(x_k) + noise_std * eps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum System {
    Lorenz63(LorenzParams),
    DoubleWell(DoubleWellParams),
    LinearGaussian(LinearGaussianParams),
}

impl System {
    pub fn dim(&self) -> usize {
        match self {
            System::Lorenz63(_) => 3,
            System::DoubleWell(_) | System::LinearGaussian(_) => 1,
        }
    }

    /// Model time between recorded states.
    pub fn dt(&self) -> f64 {
        match self {
            System::Lorenz63(p) => p.h,
            System::DoubleWell(p) => p.dt,
            System::LinearGaussian(_) => 1.0,
        }
    }

    /// Per-coordinate standard deviation of the transition noise.
    pub fn noise_std(&self) -> f64 {
        match self {
            System::Lorenz63(p) => p.sigma,
            System::DoubleWell(p) => p.beta_d * libm::sqrt(p.dt),
            System::LinearGaussian(p) => p.noise,
        }
    }

    /// Same system with a different transition noise level.
    pub fn with_noise(&self, level: f64) -> System {
        match *self {
            System::Lorenz63(p) => System::Lorenz63(LorenzParams { sigma: level, ..p }),
            System::DoubleWell(p) => System::DoubleWell(DoubleWellParams { beta_d: level, ..p }),
            System::LinearGaussian(p) => System::LinearGaussian(LinearGaussianParams { noise: level, ..p }),
        }
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        ensure_len(x.len(), self.dim(), "system state")?;
        ensure_finite(x, "system state")
    }

    /// Deterministic part of the transition (noise-free step).
    pub fn deterministic_step_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            System::Lorenz63(p) => out.copy_from_slice(&p.rk4([x[0], x[1], x[2]], p.h)),
            System::DoubleWell(p) => out[0] = x[0] - 4.0 * x[0] * (x[0] * x[0] - 1.0) * p.dt,
            System::LinearGaussian(p) => out[0] = p.a * x[0],
        }
    }

    pub fn deterministic_step(&self, x: &StateVector) -> Result<StateVector> {
        self.check(x)?;
        let mut out = vec![0.0; self.dim()];
        self.deterministic_step_into(x, &mut out);
        StateVector::from_computed(out, "deterministic step")
    }

    pub(crate) fn transition_into<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R, out: &mut [f64]) {
        self.deterministic_step_into(x, out);
        let std = self.noise_std();
        for v in out.iter_mut() {
            *v += std * standard_normal(rng);
        }
    }

    /// One stochastic transition.
    pub fn transition<R: Rng + ?Sized>(&self, x: &StateVector, rng: &mut R) -> Result<StateVector> {
        self.check(x)?;
        let mut out = vec![0.0; self.dim()];
        self.transition_into(x, rng, &mut out);
        StateVector::from_computed(out, "transition")
    }

    fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            System::Lorenz63(_) => vec![
                20.0 * uniform(rng) - 10.0,
                20.0 * uniform(rng) - 10.0,
                10.0 + 30.0 * uniform(rng),
            ],
            System::DoubleWell(p) => vec![p.init_range * (2.0 * uniform(rng) - 1.0)],
            System::LinearGaussian(p) => vec![p.init_range * (2.0 * uniform(rng) - 1.0)],
        }
    }
}

/// Deterministic Lorenz RK4 update of one state.
pub fn lorenz_rk4_step(x: &StateVector, params: &LorenzParams) -> Result<StateVector> {
    System::Lorenz63(*params).deterministic_step(x)
}

/// RK4 step followed by additive `N(0, sigma^2 I)` noise.
pub fn lorenz_transition<R: Rng + ?Sized>(x: &StateVector, params: &LorenzParams, rng: &mut R) -> Result<StateVector> {
    System::Lorenz63(*params).transition(x, rng)
}

/// Euler–Maruyama step `x + (-4x(x^2-1)) dt + beta_d sqrt(dt) z`.
pub fn doublewell_step<R: Rng + ?Sized>(
    x: &StateVector,
    params: &DoubleWellParams,
    rng: &mut R,
) -> Result<StateVector> {
    System::DoubleWell(*params).transition(x, rng)
}

/// Observation operator `A`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObservationOperator {
    /// `arctan(x_0)`.
    ArctanFirst,
    /// `x_0^3`.
    Cube,
    Identity,
    /// Selected coordinates, unchanged.
    Mask(Vec<usize>),
}

impl ObservationOperator {
    pub fn output_dim(&self, state_dim: usize) -> usize {
        match self {
            ObservationOperator::ArctanFirst | ObservationOperator::Cube => 1,
            ObservationOperator::Identity => state_dim,
            ObservationOperator::Mask(idx) => idx.len(),
        }
    }

    pub fn validate(&self, state_dim: usize) -> Result<()> {
        if let ObservationOperator::Mask(idx) = self {
            if let Some(&bad) = idx.iter().find(|&&i| i >= state_dim) {
                return Err(Error::InvalidConfig(alloc::format!(
                    "mask index {bad} out of range for dimension {state_dim}"
                )));
            }
            if idx.is_empty() {
                return Err(Error::InvalidConfig("mask selects no coordinates".into()));
            }
        }
        Ok(())
    }

    pub(crate) fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            ObservationOperator::ArctanFirst => out[0] = libm::atan(x[0]),
            ObservationOperator::Cube => out[0] = x[0] * x[0] * x[0],
            ObservationOperator::Identity => out.copy_from_slice(x),
            ObservationOperator::Mask(idx) => {
                for (o, &i) in out.iter_mut().zip(idx) {
                    *o = x[i];
                }
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim(x.len())];
        self.apply_into(x, &mut out);
        out
    }

    /// Adds `J_A(x)ᵀ cot` to `acc`.
    pub(crate) fn vjp_accumulate(&self, x: &[f64], cot: &[f64], acc: &mut [f64]) {
        match self {
            ObservationOperator::ArctanFirst => acc[0] += cot[0] / (1.0 + x[0] * x[0]),
            ObservationOperator::Cube => acc[0] += cot[0] * 3.0 * x[0] * x[0],
            ObservationOperator::Identity => {
                for (a, c) in acc.iter_mut().zip(cot) {
                    *a += c;
                }
            }
            ObservationOperator::Mask(idx) => {
                for (&i, c) in idx.iter().zip(cot) {
                    acc[i] += c;
                }
            }
        }
    }
}

/// `y = A(x) + gamma * eta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationModel {
    pub operator: ObservationOperator,
    pub gamma: f64,
}

impl ObservationModel {
    pub fn new(operator: ObservationOperator, gamma: f64) -> Result<Self> {
        if !(gamma >= 0.0) {
            return Err(Error::InvalidConfig(alloc::format!("gamma must be >= 0, got {gamma}")));
        }
        Ok(Self { operator, gamma })
    }

    /// Log density `log N(y; A(x), gamma^2 I)`.
    pub fn log_likelihood(&self, y: &[f64], x: &[f64]) -> f64 {
        let pred = self.operator.apply(x);
        let sq: f64 = y.iter().zip(&pred).map(|(a, b)| (a - b) * (a - b)).sum();
        let m = y.len() as f64;
        -0.5 * m * libm::log(2.0 * core::f64::consts::PI)
            - m * libm::log(self.gamma)
            - sq / (2.0 * self.gamma * self.gamma)
    }
}

/// Draws a noisy observation of `x`.
pub fn observe<R: Rng + ?Sized>(x: &StateVector, model: &ObservationModel, rng: &mut R) -> Result<Vec<f64>> {
    model.operator.validate(x.dim())?;
    let mut y = model.operator.apply(x);
    for v in y.iter_mut() {
        *v += model.gamma * standard_normal(rng);
    }
    ensure_finite(&y, "observation")?;
    Ok(y)
}

/// Simulates `n_traj` independent trajectories of `len` transitions each.
///
/// Lorenz initial states are advanced `burn_in` noisy steps before recording;
/// the scalar systems start uniformly in their `init_range` box with no
/// burn-in. Trajectory `i` uses child stream `i` of `rng`.
pub fn simulate_dataset(
    system: &System,
    n_traj: usize,
    len: usize,
    burn_in: usize,
    rng: RngStream,
) -> Result<Vec<Trajectory>> {
    if n_traj == 0 || len == 0 {
        return Err(Error::InvalidConfig("n_traj and len must be >= 1".into()));
    }
    let streams = split_rng(rng, n_traj);
    let burn = match system {
        System::Lorenz63(_) => burn_in,
        _ => 0,
    };
    let dim = system.dim();
    let flat = map_chunks(n_traj, 1, |r| {
        let mut g = streams[r.start].rng();
        let mut x = system.initial_state(&mut g);
        let mut next = vec![0.0; dim];
        for _ in 0..burn {
            system.transition_into(&x, &mut g, &mut next);
            core::mem::swap(&mut x, &mut next);
        }
        let mut states = Vec::with_capacity((len + 1) * dim);
        states.extend_from_slice(&x);
        for _ in 0..len {
            system.transition_into(&x, &mut g, &mut next);
            core::mem::swap(&mut x, &mut next);
            states.extend_from_slice(&x);
        }
        states
    });
    flat.into_iter()
        .map(|states| {
            let svs = states
                .chunks(dim)
                .map(|c| StateVector::new(c.to_vec()))
                .collect::<Result<Vec<_>>>()?;
            Trajectory::new(svs, system.dt())
        })
        .collect()
}

/// Whether a scalar trajectory moves between the wells at +1 and -1: it
/// exceeds `threshold` on one side and later on the other.
pub fn has_well_switch(trajectory: &Trajectory, threshold: f64) -> bool {
    let mut side = 0i8;
    for x in trajectory.states() {
        let now = if x[0] > threshold {
            1
        } else if x[0] < -threshold {
            -1
        } else {
            continue;
        };
        if side != 0 && now != side {
            return true;
        }
        side = now;
    }
    false
}
