//! Bootstrap particle filter using the true simulator.

use alloc::vec;
use alloc::vec::Vec;

use crate::dynamics::{ObservationModel, System};
use crate::error::{ensure_len, Error, Result};
use crate::par::map_chunks;
use crate::rng::{uniform, RngStream};
use crate::state::{ObservationSeries, StateVector, Trajectory};

/// Particles per propagation work unit, each with its own random stream.
const PARTICLE_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    dim: usize,
    /// `N_p × D`.
    particles: Vec<f64>,
    /// Normalised log-weights.
    log_weights: Vec<f64>,
}

/// Outcome of one filter step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Effective sample size before any resampling.
    pub ess: f64,
    pub resampled: bool,
    /// Every likelihood underflowed; weights were reset to uniform.
    pub underflow: bool,
}

impl ParticleEnsemble {
    pub fn new(particles: &[StateVector]) -> Result<Self> {
        let first = particles.first().ok_or(Error::Empty("particle ensemble"))?;
        let dim = first.dim();
        let mut flat = Vec::with_capacity(particles.len() * dim);
        for p in particles {
            ensure_len(p.dim(), dim, "particle")?;
            flat.extend_from_slice(p);
        }
        let n = particles.len();
        Ok(Self {
            dim,
            particles: flat,
            log_weights: vec![-libm::log(n as f64); n],
        })
    }

    /// `n` copies of a known state.
    pub fn from_state(x: &StateVector, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("particle ensemble"));
        }
        Ok(Self {
            dim: x.dim(),
            particles: x.repeat(n),
            log_weights: vec![-libm::log(n as f64); n],
        })
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.particles[i * self.dim..(i + 1) * self.dim]
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| libm::exp(*l)).collect()
    }

    /// `1 / sum w_i^2`.
    pub fn ess(&self) -> f64 {
        1.0 / self.log_weights.iter().map(|l| libm::exp(2.0 * l)).sum::<f64>()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (i, l) in self.log_weights.iter().enumerate() {
            let w = libm::exp(*l);
            for (c, v) in m.iter_mut().zip(self.particle(i)) {
                *c += w * v;
            }
        }
        m
    }

    /// Replaces particles and weights by an equally weighted systematic
    /// resample driven by a single uniform `u` in `[0, 1)`.
    pub fn resample_systematic(&mut self, u: f64) {
        let n = self.len();
        let mut out = Vec::with_capacity(self.particles.len());
        let mut cum = libm::exp(self.log_weights[0]);
        let mut i = 0;
        for j in 0..n {
            let target = (j as f64 + u) / n as f64;
            while cum < target && i + 1 < n {
                i += 1;
                cum += libm::exp(self.log_weights[i]);
            }
            out.extend_from_slice(self.particle(i));
        }
        self.particles = out;
        self.log_weights.fill(-libm::log(n as f64));
    }

    fn normalise(&mut self) -> bool {
        let max = self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            let u = -libm::log(self.len() as f64);
            self.log_weights.fill(u);
            return true;
        }
        let total: f64 = self.log_weights.iter().map(|l| libm::exp(l - max)).sum();
        let shift = max + libm::log(total);
        for l in self.log_weights.iter_mut() {
            *l -= shift;
        }
        false
    }
}

/// Moves every particle through the simulator and adds the observation
/// log-likelihood to its weight. Returns whether all likelihoods underflowed.
fn propagate_and_weight(
    ensemble: &mut ParticleEnsemble,
    system: &System,
    y: &[f64],
    obs: &ObservationModel,
    stream: RngStream,
) -> Result<bool> {
    let d = ensemble.dim;
    ensure_len(d, system.dim(), "particle dimension")?;
    ensure_len(y.len(), obs.operator.output_dim(d), "observation")?;
    let n = ensemble.len();
    let old = &ensemble.particles;
    let lw = &ensemble.log_weights;
    let parts = map_chunks(n, PARTICLE_CHUNK, |r| {
        let mut g = stream.child((r.start / PARTICLE_CHUNK) as u64).rng();
        let mut next = vec![0.0; r.len() * d];
        let mut logw = Vec::with_capacity(r.len());
        for (o, i) in r.enumerate() {
            let out = &mut next[o * d..(o + 1) * d];
            system.transition_into(&old[i * d..(i + 1) * d], &mut g, out);
            let ll = obs.log_likelihood(y, out);
            logw.push(lw[i] + if ll.is_nan() { f64::NEG_INFINITY } else { ll });
        }
        (next, logw)
    });
    let mut particles = Vec::with_capacity(n * d);
    let mut log_weights = Vec::with_capacity(n);
    for (p, w) in parts {
        particles.extend(p);
        log_weights.extend(w);
    }
    if particles.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("particle state"));
    }
    ensemble.particles = particles;
    ensemble.log_weights = log_weights;
    Ok(ensemble.normalise())
}

fn resample_if_degenerate(ensemble: &mut ParticleEnsemble, stream: RngStream, underflow: bool) -> StepInfo {
    let ess = ensemble.ess();
    let resampled = ess < ensemble.len() as f64 / 2.0;
    if resampled {
        let u = uniform(&mut stream.tagged("resample").rng());
        ensemble.resample_systematic(u);
    }
    StepInfo {
        ess,
        resampled,
        underflow,
    }
}

/// Propagate, reweight by `y`, and resample when ESS drops below `N_p / 2`.
///
/// Particle chunk `c` is propagated with child stream `c` of `stream`; the
/// resampling uniform comes from the `"resample"` sub-stream.
pub fn bpf_step(
    ensemble: &mut ParticleEnsemble,
    system: &System,
    y: &[f64],
    obs: &ObservationModel,
    stream: RngStream,
) -> Result<StepInfo> {
    let underflow = propagate_and_weight(ensemble, system, y, obs, stream)?;
    Ok(resample_if_degenerate(ensemble, stream, underflow))
}

#[derive(Debug, Clone)]
pub struct BpfOutput {
    /// `x_0` followed by the weighted-mean estimate of every filtered step.
    pub estimate: Trajectory,
    pub steps: Vec<StepInfo>,
}

/// Filters steps `1..=horizon` starting from `n_particles` copies of `x0`.
/// The estimate at each step is the weighted mean before resampling.
pub fn bpf_run(
    system: &System,
    x0: &StateVector,
    observations: &ObservationSeries,
    horizon: usize,
    n_particles: usize,
    stream: RngStream,
) -> Result<BpfOutput> {
    let ens = ParticleEnsemble::from_state(x0, n_particles)?;
    bpf_run_from(system, ens, x0, observations, horizon, stream)
}

/// As [`bpf_run`] with an explicit initial ensemble; `x0` is only recorded
/// as the first estimate. Step `k` uses child stream `k` of `stream`.
pub fn bpf_run_from(
    system: &System,
    mut ensemble: ParticleEnsemble,
    x0: &StateVector,
    observations: &ObservationSeries,
    horizon: usize,
    stream: RngStream,
) -> Result<BpfOutput> {
    let obs = ObservationModel {
        operator: observations.operator().clone(),
        gamma: observations.gamma(),
    };
    obs.operator.validate(system.dim())?;
    ensure_len(x0.dim(), system.dim(), "initial state")?;
    let mut estimate = Trajectory::new(vec![x0.clone()], system.dt())?;
    let mut steps = Vec::with_capacity(horizon);
    for k in 1..=horizon {
        let y = observations
            .at(k)
            .ok_or_else(|| Error::ShapeMismatch(alloc::format!("no observation for step {k}")))?;
        let st = stream.child(k as u64);
        let underflow = propagate_and_weight(&mut ensemble, system, y, &obs, st)?;
        estimate.push(StateVector::from_computed(ensemble.mean(), "filter mean")?)?;
        steps.push(resample_if_degenerate(&mut ensemble, st, underflow));
    }
    Ok(BpfOutput { estimate, steps })
}
