//! Observation-guided autoregressive sampling.
//!
//! Each transition integrates the learned SDE over the grid `s_n = n / N`
//! with Euler–Maruyama. From node `n0` on, the state is also pushed down the
//! gradient of `sum_j w_j ||y - A(X1_j)||^2`, where `X1_j` are cheap
//! extrapolations of the terminal state and `w_j` are likelihood weights
//! (held constant in the backward pass).
//!
//! The guidance displacement at a node is `zeta * grad`, optionally capped in
//! norm by `guidance_clip`; the cap keeps steep observation operators such as
//! `x^3` from overshooting.
//!
//! All members of an ensemble advance in lockstep so that network calls are
//! batched. Member `i` draws SDE noise and Monte-Carlo noise from separate
//! sub-streams of its own stream, which makes `zeta = 0` reproduce forecast
//! mode exactly.

use alloc::vec;
use alloc::vec::Vec;

use crate::config::{Estimator, InferConfig, PosteriorOrder};
use crate::dynamics::ObservationModel;
use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::interpolant::InterpolantSchedule;
use crate::net::{BatchInput, MlpDrift, Tape};
use crate::rng::{fill_standard_normal, RngStream};
use crate::state::{ObservationSeries, StateVector, Trajectory};

/// A drift `b(s, x_s, window)` with batched evaluation and input VJPs.
pub trait DriftModel: Sync {
    type Tape;

    fn state_dim(&self) -> usize;
    fn cond_len(&self) -> usize;
    fn eval(&self, input: BatchInput<'_>) -> Result<Vec<f64>>;
    fn eval_taped(&self, input: BatchInput<'_>) -> Result<(Vec<f64>, Self::Tape)>;
    /// Row-wise `J_x(row)ᵀ cot(row)`.
    fn vjp_input(&self, tape: &Self::Tape, cotangent: &[f64]) -> Result<Vec<f64>>;
}

impl DriftModel for MlpDrift {
    type Tape = Tape;

    fn state_dim(&self) -> usize {
        self.arch().state_dim
    }

    fn cond_len(&self) -> usize {
        self.arch().cond_len
    }

    fn eval(&self, input: BatchInput<'_>) -> Result<Vec<f64>> {
        self.forward_batch(input)
    }

    fn eval_taped(&self, input: BatchInput<'_>) -> Result<(Vec<f64>, Tape)> {
        self.forward_batch_taped(input)
    }

    fn vjp_input(&self, tape: &Tape, cotangent: &[f64]) -> Result<Vec<f64>> {
        self.vjp_input_taped(tape, cotangent)
    }
}

/// Closed-form drift `slope * x + offset`, independent of `s` and the window.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineDrift {
    pub slope: f64,
    pub offset: Vec<f64>,
    pub cond_len: usize,
}

impl AffineDrift {
    pub fn constant(offset: Vec<f64>) -> Self {
        Self {
            slope: 0.0,
            offset,
            cond_len: 1,
        }
    }

    pub fn linear(slope: f64, dim: usize) -> Self {
        Self {
            slope,
            offset: vec![0.0; dim],
            cond_len: 1,
        }
    }
}

impl DriftModel for AffineDrift {
    type Tape = usize;

    fn state_dim(&self) -> usize {
        self.offset.len()
    }

    fn cond_len(&self) -> usize {
        self.cond_len
    }

    fn eval(&self, input: BatchInput<'_>) -> Result<Vec<f64>> {
        let d = self.offset.len();
        ensure_len(input.x_s.len(), input.rows() * d, "drift input")?;
        Ok(input
            .x_s
            .iter()
            .enumerate()
            .map(|(i, x)| self.slope * x + self.offset[i % d])
            .collect())
    }

    fn eval_taped(&self, input: BatchInput<'_>) -> Result<(Vec<f64>, usize)> {
        Ok((self.eval(input)?, input.rows()))
    }

    fn vjp_input(&self, rows: &usize, cotangent: &[f64]) -> Result<Vec<f64>> {
        ensure_len(cotangent.len(), rows * self.offset.len(), "cotangent")?;
        Ok(cotangent.iter().map(|c| self.slope * c).collect())
    }
}

/// Settings of the guided sampler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    /// Monte-Carlo endpoint samples (J).
    pub mc_samples: usize,
    pub zeta: f64,
    /// Grid steps (N).
    pub grid_steps: usize,
    pub posterior_order: PosteriorOrder,
    pub estimator: Estimator,
    /// First guided grid node (n0).
    pub guidance_start: usize,
    /// Upper bound on the norm of one node's guidance displacement.
    pub guidance_clip: Option<f64>,
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 {
            return Err(Error::InvalidConfig("J must be >= 1".into()));
        }
        if self.grid_steps < 2 || self.guidance_start == 0 || self.guidance_start >= self.grid_steps {
            return Err(Error::InvalidConfig("grid requires 1 <= n0 < N".into()));
        }
        if !(self.zeta >= 0.0 && self.zeta.is_finite()) {
            return Err(Error::InvalidConfig("zeta must be finite and >= 0".into()));
        }
        if self.guidance_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::InvalidConfig("guidance_clip must be > 0".into()));
        }
        Ok(())
    }
}

impl From<&InferConfig> for GuidanceConfig {
    fn from(c: &InferConfig) -> Self {
        Self {
            mc_samples: c.mc_samples,
            zeta: c.zeta,
            grid_steps: c.grid_steps,
            posterior_order: c.posterior_order,
            estimator: c.estimator,
            guidance_start: c.guidance_start,
            guidance_clip: c.guidance_clip,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Assimilate,
    /// Guidance disabled; draws from the learned transition alone.
    Forecast,
}

/// One grid node of one member's transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeDiagnostics {
    pub member: usize,
    /// Absolute step being estimated.
    pub k: usize,
    pub n: usize,
    /// `sum_j w_j ||y - A(X1_j)||^2`; `None` at unguided nodes.
    pub guidance_loss: Option<f64>,
    pub weight_entropy: Option<f64>,
    pub drift_norm: f64,
}

fn cond_flat(cond: &[StateVector], dim: usize, len: usize) -> Result<Vec<f64>> {
    ensure_len(cond.len(), len, "conditioning window length")?;
    let mut flat = Vec::with_capacity(dim * len);
    for c in cond {
        ensure_len(c.dim(), dim, "conditioning state")?;
        flat.extend_from_slice(c);
    }
    Ok(flat)
}

fn check_state<D: DriftModel>(drift: &D, x: &StateVector) -> Result<()> {
    ensure_len(x.dim(), drift.state_dim(), "state")
}

/// One Euler–Maruyama step of the sampling SDE from `s` to `s + ds`.
pub fn em_step<D: DriftModel>(
    drift: &D,
    schedule: &InterpolantSchedule,
    s: f64,
    ds: f64,
    x: &StateVector,
    cond: &[StateVector],
    rng: &mut impl rand::Rng,
) -> Result<StateVector> {
    check_state(drift, x)?;
    if !(s >= 0.0 && ds > 0.0 && s + ds <= 1.0 + 1e-12) {
        return Err(Error::TimeOutOfRange(s + ds));
    }
    let c = cond_flat(cond, x.dim(), drift.cond_len())?;
    let b = drift.eval(BatchInput {
        s: &[s],
        x_s: x,
        cond: &c,
    })?;
    let amp = schedule.sigma(s) * libm::sqrt(ds);
    let mut z = vec![0.0; x.dim()];
    fill_standard_normal(rng, &mut z);
    let out = (0..x.dim()).map(|i| x[i] + b[i] * ds + amp * z[i]).collect();
    StateVector::from_computed(out, "Euler-Maruyama step")
}

/// Terminal-state extrapolation from `(s, x)` with the given noise draw.
pub fn posterior_endpoint_with_noise<D: DriftModel>(
    drift: &D,
    schedule: &InterpolantSchedule,
    s: f64,
    x: &StateVector,
    cond: &[StateVector],
    order: PosteriorOrder,
    z: &[f64],
) -> Result<StateVector> {
    check_state(drift, x)?;
    if !(0.0..1.0).contains(&s) {
        return Err(Error::TimeOutOfRange(s));
    }
    ensure_len(z.len(), x.dim(), "endpoint noise")?;
    let c = cond_flat(cond, x.dim(), drift.cond_len())?;
    let d = x.dim();
    let r = 1.0 - s;
    let nu = libm::sqrt(schedule.remaining_noise_variance(s));
    let bs = drift.eval(BatchInput {
        s: &[s],
        x_s: x,
        cond: &c,
    })?;
    let first: Vec<f64> = (0..d).map(|i| x[i] + bs[i] * r + nu * z[i]).collect();
    let out = match order {
        PosteriorOrder::First => first,
        PosteriorOrder::Second => {
            let b1 = drift.eval(BatchInput {
                s: &[1.0],
                x_s: &first,
                cond: &c,
            })?;
            (0..d).map(|i| x[i] + 0.5 * (bs[i] + b1[i]) * r + nu * z[i]).collect()
        }
    };
    StateVector::from_computed(out, "posterior endpoint")
}

pub fn posterior_endpoint<D: DriftModel>(
    drift: &D,
    schedule: &InterpolantSchedule,
    s: f64,
    x: &StateVector,
    cond: &[StateVector],
    order: PosteriorOrder,
    rng: &mut impl rand::Rng,
) -> Result<StateVector> {
    let mut z = vec![0.0; x.dim()];
    fill_standard_normal(rng, &mut z);
    posterior_endpoint_with_noise(drift, schedule, s, x, cond, order, &z)
}

/// Weights from squared residual norms, `softmax(-sq / (2 gamma^2))`.
fn weights_from_sq(sq: &[f64], gamma: f64, out: &mut [f64]) {
    let min = sq.iter().copied().fold(f64::INFINITY, f64::min);
    if gamma == 0.0 || !gamma.is_finite() && gamma > 0.0 {
        // Point-mass limit on the best samples, or flat for infinite gamma.
        let hits = |v: f64| if gamma == 0.0 { v == min } else { true };
        let count = sq.iter().filter(|v| hits(**v)).count() as f64;
        for (w, v) in out.iter_mut().zip(sq) {
            *w = if hits(*v) { 1.0 / count } else { 0.0 };
        }
        return;
    }
    let scale = 1.0 / (2.0 * gamma * gamma);
    let mut total = 0.0;
    for (w, v) in out.iter_mut().zip(sq) {
        *w = libm::exp(-(v - min) * scale);
        total += *w;
    }
    for w in out.iter_mut() {
        *w /= total;
    }
}

/// Normalised likelihood weights of endpoint samples for observation `y`.
pub fn mc_weights(y: &[f64], samples: &[StateVector], obs: &ObservationModel) -> Vec<f64> {
    let sq: Vec<f64> = samples
        .iter()
        .map(|x| {
            let p = obs.operator.apply(x);
            y.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum()
        })
        .collect();
    let mut w = vec![0.0; sq.len()];
    weights_from_sq(&sq, obs.gamma, &mut w);
    w
}

fn entropy(w: &[f64]) -> f64 {
    -w.iter().filter(|v| **v > 0.0).map(|v| v * libm::log(*v)).sum::<f64>()
}

/// Guidance gradient with the weights it used.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceOutput {
    pub grad: StateVector,
    pub loss: f64,
    pub weights: Vec<f64>,
}

/// Per-member result of the batched guidance computation.
struct GuidanceBatch {
    /// `M × D`.
    grads: Vec<f64>,
    loss: Vec<f64>,
    entropy: Vec<f64>,
    /// `M × J`.
    weights: Vec<f64>,
}

/// Everything fixed for one batched node evaluation.
struct NodeInput<'a> {
    s: f64,
    /// `M × D`.
    x: &'a [f64],
    /// `M × L × D`.
    cond: &'a [f64],
    /// `M × D` drift at `(s, x)`.
    bs: &'a [f64],
    ys: &'a [&'a [f64]],
    /// `M × J × D`.
    noise: &'a [f64],
    /// Fixed weights (`M × J`) instead of computed ones.
    weights: Option<&'a [f64]>,
}

/// Endpoint samples for all members; returns them with the `b_1` tape when
/// second order is used.
fn endpoints<D: DriftModel>(
    drift: &D,
    schedule: &InterpolantSchedule,
    cfg: &GuidanceConfig,
    inp: &NodeInput<'_>,
    taped: bool,
) -> Result<(Vec<f64>, Option<D::Tape>)> {
    let d = drift.state_dim();
    let l = drift.cond_len();
    let j = cfg.mc_samples;
    let m = inp.ys.len();
    let r = 1.0 - inp.s;
    let nu = libm::sqrt(schedule.remaining_noise_variance(inp.s));
    let mut first = vec![0.0; m * j * d];
    for a in 0..m {
        for q in 0..j {
            let row = a * j + q;
            for i in 0..d {
                first[row * d + i] = inp.x[a * d + i] + inp.bs[a * d + i] * r + nu * inp.noise[row * d + i];
            }
        }
    }
    match cfg.posterior_order {
        PosteriorOrder::First => Ok((first, None)),
        PosteriorOrder::Second => {
            let ones = vec![1.0; m * j];
            let mut cond = Vec::with_capacity(m * j * l * d);
            for a in 0..m {
                for _ in 0..j {
                    cond.extend_from_slice(&inp.cond[a * l * d..(a + 1) * l * d]);
                }
            }
            let input = BatchInput {
                s: &ones,
                x_s: &first,
                cond: &cond,
            };
            let (b1, tape) = if taped {
                let (b, t) = drift.eval_taped(input)?;
                (b, Some(t))
            } else {
                (drift.eval(input)?, None)
            };
            let mut second = vec![0.0; m * j * d];
            for a in 0..m {
                for q in 0..j {
                    let row = a * j + q;
                    for i in 0..d {
                        second[row * d + i] = inp.x[a * d + i]
                            + 0.5 * (inp.bs[a * d + i] + b1[row * d + i]) * r
                            + nu * inp.noise[row * d + i];
                    }
                }
            }
            Ok((second, tape))
        }
    }
}

fn squared_residuals(obs: &ObservationModel, ys: &[&[f64]], xs: &[f64], d: usize, j: usize) -> Vec<f64> {
    let mut sq = vec![0.0; ys.len() * j];
    let mut pred = Vec::new();
    for (a, y) in ys.iter().enumerate() {
        pred.resize(y.len(), 0.0);
        for q in 0..j {
            let row = a * j + q;
            obs.operator.apply_into(&xs[row * d..(row + 1) * d], &mut pred);
            sq[row] = y.iter().zip(&pred).map(|(u, v)| (u - v) * (u - v)).sum();
        }
    }
    sq
}

/// Batched guidance gradient for `M` members sharing `s`.
fn guidance_batch<D: DriftModel>(
    drift: &D,
    schedule: &InterpolantSchedule,
    obs: &ObservationModel,
    cfg: &GuidanceConfig,
    inp: &NodeInput<'_>,
    tape_s: &D::Tape,
) -> Result<GuidanceBatch> {
    let d = drift.state_dim();
    let j = cfg.mc_samples;
    let m = inp.ys.len();
    let r = 1.0 - inp.s;
    let (xh, tape1) = endpoints(drift, schedule, cfg, inp, true)?;
    ensure_finite(&xh, "endpoint estimate")?;
    let sq = squared_residuals(obs, inp.ys, &xh, d, j);

    let mut weights = vec![0.0; m * j];
    match (inp.weights, cfg.estimator) {
        (Some(w), _) => {
            ensure_len(w.len(), m * j, "fixed weights")?;
            weights.copy_from_slice(w);
        }
        (None, Estimator::Unbiased) => {
            for a in 0..m {
                weights_from_sq(&sq[a * j..(a + 1) * j], obs.gamma, &mut weights[a * j..(a + 1) * j]);
            }
        }
        (None, Estimator::BiasedJensen) => weights.fill(1.0 / j as f64),
    }

    // c_row = w_row * d/dX1 ||y - A(X1)||^2 = -2 w J_Aᵀ (y - A(X1)).
    let mut c = vec![0.0; m * j * d];
    let mut loss = vec![0.0; m];
    let mut ent = vec![0.0; m];
    let mut pred = Vec::new();
    let mut cot = Vec::new();
    for (a, y) in inp.ys.iter().enumerate() {
        pred.resize(y.len(), 0.0);
        cot.resize(y.len(), 0.0);
        for q in 0..j {
            let row = a * j + q;
            let xr = &xh[row * d..(row + 1) * d];
            obs.operator.apply_into(xr, &mut pred);
            for i in 0..y.len() {
                cot[i] = -2.0 * weights[row] * (y[i] - pred[i]);
            }
            obs.operator.vjp_accumulate(xr, &cot, &mut c[row * d..(row + 1) * d]);
            loss[a] += weights[row] * sq[row];
        }
        ent[a] = entropy(&weights[a * j..(a + 1) * j]);
    }
    let mut sum_c = vec![0.0; m * d];
    for row in 0..m * j {
        for i in 0..d {
            sum_c[(row / j) * d + i] += c[row * d + i];
        }
    }

    let grads = match cfg.posterior_order {
        PosteriorOrder::First => {
            let cot_s: Vec<f64> = sum_c.iter().map(|v| r * v).collect();
            let back = drift.vjp_input(tape_s, &cot_s)?;
            sum_c.iter().zip(&back).map(|(a, b)| a + b).collect::<Vec<f64>>()
        }
        PosteriorOrder::Second => {
            let u = drift.vjp_input(tape1.as_ref().expect("second order keeps its tape"), &c)?;
            let mut sum_u = vec![0.0; m * d];
            for row in 0..m * j {
                for i in 0..d {
                    sum_u[(row / j) * d + i] += u[row * d + i];
                }
            }
            let cot_s: Vec<f64> = (0..m * d)
                .map(|i| 0.5 * r * sum_c[i] + 0.5 * r * r * sum_u[i])
                .collect();
            let back = drift.vjp_input(tape_s, &cot_s)?;
            (0..m * d).map(|i| sum_c[i] + 0.5 * r * sum_u[i] + back[i]).collect()
        }
    };
    if grads.iter().any(|g: &f64| !g.is_finite()) {
        return Err(Error::NonFinite("guidance gradient"));
    }
    Ok(GuidanceBatch {
        grads,
        loss,
        entropy: ent,
        weights,
    })
}

/// Guidance gradient at `(s, x)` with explicit endpoint noise (`J × D`).
/// `weights`, when given, replace the computed likelihood weights.
#[allow(clippy::too_many_arguments)]
pub fn guidance_grad_with_noise<D: DriftModel>(
    drift: &D,
    schedule: &InterpolantSchedule,
    s: f64,
    x: &StateVector,
    cond: &[StateVector],
    y: &[f64],
    obs: &ObservationModel,
    cfg: &GuidanceConfig,
    noise: &[f64],
    weights: Option<&[f64]>,
) -> Result<GuidanceOutput> {
    cfg.validate()?;
    check_state(drift, x)?;
    if !(0.0..1.0).contains(&s) {
        return Err(Error::TimeOutOfRange(s));
    }
    ensure_len(noise.len(), cfg.mc_samples * x.dim(), "endpoint noise")?;
    ensure_len(y.len(), obs.operator.output_dim(x.dim()), "observation")?;
    let c = cond_flat(cond, x.dim(), drift.cond_len())?;
    let (bs, tape) = drift.eval_taped(BatchInput {
        s: &[s],
        x_s: x,
        cond: &c,
    })?;
    let ys = [y];
    let inp = NodeInput {
        s,
        x,
        cond: &c,
        bs: &bs,
        ys: &ys,
        noise,
        weights,
    };
    let g = guidance_batch(drift, schedule, obs, cfg, &inp, &tape)?;
    Ok(GuidanceOutput {
        grad: StateVector::from_computed(g.grads, "guidance gradient")?,
        loss: g.loss[0],
        weights: g.weights,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn guidance_grad<D: DriftModel>(
    drift: &D,
    schedule: &InterpolantSchedule,
    s: f64,
    x: &StateVector,
    cond: &[StateVector],
    y: &[f64],
    obs: &ObservationModel,
    cfg: &GuidanceConfig,
    rng: &mut impl rand::Rng,
) -> Result<GuidanceOutput> {
    let mut noise = vec![0.0; cfg.mc_samples * x.dim()];
    fill_standard_normal(rng, &mut noise);
    guidance_grad_with_noise(drift, schedule, s, x, cond, y, obs, cfg, &noise, None)
}

/// `sum_j w_j ||y - A(X1_j(x))||^2` for frozen noise; with `weights` given
/// this is the function whose gradient `guidance_grad_with_noise` returns.
#[allow(clippy::too_many_arguments)]
pub fn guidance_objective<D: DriftModel>(
    drift: &D,
    schedule: &InterpolantSchedule,
    s: f64,
    x: &StateVector,
    cond: &[StateVector],
    y: &[f64],
    obs: &ObservationModel,
    cfg: &GuidanceConfig,
    noise: &[f64],
    weights: Option<&[f64]>,
) -> Result<f64> {
    let c = cond_flat(cond, x.dim(), drift.cond_len())?;
    let bs = drift.eval(BatchInput {
        s: &[s],
        x_s: x,
        cond: &c,
    })?;
    let ys = [y];
    let inp = NodeInput {
        s,
        x,
        cond: &c,
        bs: &bs,
        ys: &ys,
        noise,
        weights,
    };
    let (xh, _) = endpoints(drift, schedule, cfg, &inp, false)?;
    let sq = squared_residuals(obs, &ys, &xh, x.dim(), cfg.mc_samples);
    let mut w = vec![0.0; cfg.mc_samples];
    match (weights, cfg.estimator) {
        (Some(fixed), _) => w.copy_from_slice(fixed),
        (None, Estimator::Unbiased) => weights_from_sq(&sq, obs.gamma, &mut w),
        (None, Estimator::BiasedJensen) => w.fill(1.0 / cfg.mc_samples as f64),
    }
    Ok(w.iter().zip(&sq).map(|(a, b)| a * b).sum())
}

/// Initial state, observations and random stream of one sampled trajectory.
#[derive(Debug, Clone)]
pub struct Member<'a> {
    /// The `L` states preceding the first estimate.
    pub window: &'a [StateVector],
    pub observations: &'a ObservationSeries,
    pub stream: RngStream,
}

/// Sampled trajectories (window followed by estimates) and node diagnostics.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trajectories: Vec<Trajectory>,
    pub diagnostics: Vec<NodeDiagnostics>,
}

/// Advances every member from its window to absolute step `horizon`.
///
/// Transition `k` (estimating step `k`) of member `i` uses sub-streams
/// `"sde"` and `"mc"` of `members[i].stream`, each split by `k`.
pub fn run_members<D: DriftModel>(
    drift: &D,
    schedule: &InterpolantSchedule,
    cfg: &GuidanceConfig,
    members: &[Member<'_>],
    horizon: usize,
    mode: SampleMode,
    dt: f64,
) -> Result<RunOutput> {
    cfg.validate()?;
    if members.is_empty() {
        return Err(Error::Empty("ensemble"));
    }
    let d = drift.state_dim();
    let l = drift.cond_len();
    if horizon + 1 < l {
        return Err(Error::InvalidConfig("horizon shorter than the window".into()));
    }
    let obs = ObservationModel {
        operator: members[0].observations.operator().clone(),
        gamma: members[0].observations.gamma(),
    };
    obs.operator.validate(d)?;
    let mut cond = Vec::with_capacity(members.len() * l * d);
    for mem in members {
        cond.extend(cond_flat(mem.window, d, l)?);
        if mode == SampleMode::Assimilate {
            for k in l..=horizon {
                let y = mem
                    .observations
                    .at(k)
                    .ok_or_else(|| Error::ShapeMismatch(alloc::format!("no observation for step {k}")))?;
                ensure_len(y.len(), obs.operator.output_dim(d), "observation")?;
            }
            if mem.observations.operator() != &obs.operator || mem.observations.gamma() != obs.gamma {
                return Err(Error::ShapeMismatch("members use different observation models".into()));
            }
        }
    }
    let mut trajectories: Vec<Trajectory> = members
        .iter()
        .map(|m| Trajectory::new(m.window.to_vec(), dt))
        .collect::<Result<_>>()?;
    let mut diagnostics = Vec::new();
    let m = members.len();
    let j = cfg.mc_samples;
    let n_grid = cfg.grid_steps;
    let ds = 1.0 / n_grid as f64;
    let sde_streams: Vec<RngStream> = members.iter().map(|mb| mb.stream.tagged("sde")).collect();
    let mc_streams: Vec<RngStream> = members.iter().map(|mb| mb.stream.tagged("mc")).collect();

    for k in l..=horizon {
        let mut sde_rngs: Vec<_> = sde_streams.iter().map(|s| s.child(k as u64).rng()).collect();
        let mut mc_rngs: Vec<_> = mc_streams.iter().map(|s| s.child(k as u64).rng()).collect();
        let ys: Vec<&[f64]> = match mode {
            SampleMode::Assimilate => members.iter().map(|mb| mb.observations.at(k).unwrap()).collect(),
            SampleMode::Forecast => Vec::new(),
        };
        // X_{s_0} is the last state of the window.
        let mut x: Vec<f64> = (0..m)
            .flat_map(|a| cond[(a * l + l - 1) * d..(a * l + l) * d].to_vec())
            .collect();
        let mut xi = vec![0.0; m * d];
        let mut noise = vec![0.0; m * j * d];
        for n in 0..n_grid {
            let s = n as f64 * ds;
            let ss = vec![s; m];
            let input = BatchInput {
                s: &ss,
                x_s: &x,
                cond: &cond,
            };
            let guided = mode == SampleMode::Assimilate && n >= cfg.guidance_start;
            let (bs, tape) = if guided {
                let (b, t) = drift.eval_taped(input)?;
                (b, Some(t))
            } else {
                (drift.eval(input)?, None)
            };
            for (a, g) in sde_rngs.iter_mut().enumerate() {
                fill_standard_normal(g, &mut xi[a * d..(a + 1) * d]);
            }
            let guidance = if let Some(tape) = tape {
                for (a, g) in mc_rngs.iter_mut().enumerate() {
                    fill_standard_normal(g, &mut noise[a * j * d..(a + 1) * j * d]);
                }
                let inp = NodeInput {
                    s,
                    x: &x,
                    cond: &cond,
                    bs: &bs,
                    ys: &ys,
                    noise: &noise,
                    weights: None,
                };
                Some(guidance_batch(drift, schedule, &obs, cfg, &inp, &tape)?)
            } else {
                None
            };
            let amp = schedule.sigma(s) * libm::sqrt(ds);
            for a in 0..m {
                let mut norm = 0.0;
                let mut step = cfg.zeta;
                if let (Some(g), Some(limit)) = (&guidance, cfg.guidance_clip) {
                    let len = cfg.zeta * libm::sqrt(g.grads[a * d..(a + 1) * d].iter().map(|v| v * v).sum::<f64>());
                    if len > limit {
                        step *= limit / len;
                    }
                }
                for i in 0..d {
                    let q = a * d + i;
                    norm += bs[q] * bs[q];
                    x[q] = x[q] + bs[q] * ds + amp * xi[q];
                    if let Some(g) = &guidance {
                        x[q] -= step * g.grads[q];
                    }
                }
                diagnostics.push(NodeDiagnostics {
                    member: a,
                    k,
                    n,
                    guidance_loss: guidance.as_ref().map(|g| g.loss[a]),
                    weight_entropy: guidance.as_ref().map(|g| g.entropy[a]),
                    drift_norm: libm::sqrt(norm),
                });
            }
            ensure_finite(&x, "sampler state")?;
        }
        for a in 0..m {
            let state = StateVector::from_computed(x[a * d..(a + 1) * d].to_vec(), "sampled state")?;
            // Slide the window: drop the oldest state, append the new one.
            let w = &mut cond[a * l * d..(a + 1) * l * d];
            w.copy_within(d.., 0);
            w[(l - 1) * d..].copy_from_slice(&state);
            trajectories[a].push(state)?;
        }
    }
    Ok(RunOutput {
        trajectories,
        diagnostics,
    })
}

/// One guided transition from `window` towards observation `y`.
#[allow(clippy::too_many_arguments)]
pub fn assimilate_step<D: DriftModel>(
    drift: &D,
    schedule: &InterpolantSchedule,
    window: &[StateVector],
    y: &[f64],
    obs: &ObservationModel,
    cfg: &GuidanceConfig,
    mode: SampleMode,
    stream: RngStream,
) -> Result<(StateVector, Vec<NodeDiagnostics>)> {
    let l = drift.cond_len();
    let series = ObservationSeries::new(vec![y.to_vec()], obs.operator.clone(), obs.gamma, l)?;
    let member = Member {
        window,
        observations: &series,
        stream,
    };
    let mut out = run_members(drift, schedule, cfg, &[member], l, mode, 1.0)?;
    let state = out.trajectories.pop().unwrap().states().last().unwrap().clone();
    Ok((state, out.diagnostics))
}

/// `ensemble_size` independent trajectories from one initial window; member
/// `i` uses child stream `i` of `stream`.
#[allow(clippy::too_many_arguments)]
pub fn run<D: DriftModel>(
    drift: &D,
    schedule: &InterpolantSchedule,
    window: &[StateVector],
    observations: &ObservationSeries,
    cfg: &GuidanceConfig,
    horizon: usize,
    ensemble_size: usize,
    mode: SampleMode,
    stream: RngStream,
    dt: f64,
) -> Result<RunOutput> {
    let members: Vec<Member<'_>> = (0..ensemble_size)
        .map(|i| Member {
            window,
            observations,
            stream: stream.child(i as u64),
        })
        .collect();
    run_members(drift, schedule, cfg, &members, horizon, mode, dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ObservationOperator;

    fn sv(v: &[f64]) -> StateVector {
        StateVector::new(v.to_vec()).unwrap()
    }

    fn cfg(j: usize, order: PosteriorOrder) -> GuidanceConfig {
        GuidanceConfig {
            mc_samples: j,
            zeta: 1.0,
            grid_steps: 16,
            posterior_order: order,
            estimator: Estimator::Unbiased,
            guidance_start: 1,
            guidance_clip: None,
        }
    }

    #[test]
    fn em_step_trivial_cases() {
        let quiet = InterpolantSchedule::with_eta(0.0);
        let mut g = RngStream::new(0).rng();
        let x = sv(&[1.5, -2.0]);
        let w = [sv(&[0.0, 0.0])];
        let zero = AffineDrift::constant(vec![0.0, 0.0]);
        assert_eq!(em_step(&zero, &quiet, 0.3, 0.1, &x, &w, &mut g).unwrap(), x);
        let c = AffineDrift::constant(vec![0.5, 2.0]);
        assert_eq!(
            em_step(&c, &quiet, 0.0, 1.0, &x, &w, &mut g).unwrap().as_slice(),
            &[2.0, 0.0]
        );
    }

    #[test]
    fn em_step_noise_variance() {
        let sched = InterpolantSchedule::default();
        let zero = AffineDrift::constant(vec![0.0]);
        let (s, ds) = (0.25, 0.01);
        let mut g = RngStream::new(4).rng();
        let n = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let v = em_step(&zero, &sched, s, ds, &sv(&[0.0]), &[sv(&[0.0])], &mut g).unwrap()[0];
            sum += v;
            sq += v * v;
        }
        let var = sq / n as f64 - (sum / n as f64).powi(2);
        let expect = sched.sigma(s).powi(2) * ds;
        assert!((var / expect - 1.0).abs() < 0.01, "{var} vs {expect}");
    }

    #[test]
    fn endpoint_orders_on_linear_drift() {
        let quiet = InterpolantSchedule::with_eta(0.0);
        let lin = AffineDrift::linear(-1.0, 1);
        let w = [sv(&[0.0])];
        for s in [0.0, 0.25, 0.5, 0.75] {
            let exact = libm::exp(-(1.0 - s));
            let f = posterior_endpoint_with_noise(&lin, &quiet, s, &sv(&[1.0]), &w, PosteriorOrder::First, &[0.0])
                .unwrap()[0];
            let sec = posterior_endpoint_with_noise(&lin, &quiet, s, &sv(&[1.0]), &w, PosteriorOrder::Second, &[0.0])
                .unwrap()[0];
            assert!((sec - exact).abs() < (f - exact).abs(), "s={s}");
            if s == 0.0 {
                assert_eq!((f, sec), (0.0, 0.5));
            }
        }
        let c = AffineDrift::constant(vec![0.7]);
        for order in [PosteriorOrder::First, PosteriorOrder::Second] {
            let v = posterior_endpoint_with_noise(&c, &quiet, 0.0, &sv(&[1.0]), &w, order, &[0.0]).unwrap()[0];
            assert!((v - 1.7).abs() < 1e-15);
        }
        let near = posterior_endpoint_with_noise(
            &c,
            &InterpolantSchedule::default(),
            1.0 - 1e-9,
            &sv(&[1.0]),
            &w,
            PosteriorOrder::Second,
            &[3.0],
        )
        .unwrap()[0];
        assert!((near - 1.0).abs() < 1e-8);
        assert!(
            posterior_endpoint_with_noise(&c, &quiet, 1.0, &sv(&[1.0]), &w, PosteriorOrder::First, &[0.0]).is_err()
        );
    }

    #[test]
    fn weights_examples() {
        let obs = ObservationModel::new(ObservationOperator::Identity, 0.5).unwrap();
        let w = mc_weights(&[0.0], &[sv(&[1.0]), sv(&[-1.0]), sv(&[1.0])], &obs);
        assert!(w.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        // Residual^2 difference of 2 gamma^2.
        let w = mc_weights(&[0.0], &[sv(&[0.0]), sv(&[2.0 * 0.5 / libm::sqrt(2.0)])], &obs);
        assert!((w[0] - 0.731_058_578_630_004_9).abs() < 1e-12 && (w[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        let w = mc_weights(&[0.0], &[sv(&[1e3]), sv(&[0.0]), sv(&[-1e3])], &obs);
        assert_eq!(w, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let quiet = InterpolantSchedule::with_eta(0.0);
        let c = AffineDrift::constant(vec![0.5]);
        let obs = ObservationModel::new(ObservationOperator::Cube, 0.2).unwrap();
        let y = [1.5f64.powi(3)];
        let g = guidance_grad_with_noise(
            &c,
            &quiet,
            0.0,
            &sv(&[1.0]),
            &[sv(&[0.0])],
            &y,
            &obs,
            &cfg(3, PosteriorOrder::Second),
            &[0.0; 3],
            None,
        )
        .unwrap();
        assert_eq!(g.grad.as_slice(), &[0.0]);
        assert_eq!(g.loss, 0.0);
    }

    #[test]
    fn single_sample_estimators_coincide() {
        let sched = InterpolantSchedule::default();
        let lin = AffineDrift::linear(-0.7, 2);
        let obs = ObservationModel::new(ObservationOperator::Identity, 0.3).unwrap();
        let mut c = cfg(1, PosteriorOrder::Second);
        let args = (sv(&[0.4, -1.0]), [sv(&[0.0, 0.0])], [0.3, 0.1], [0.2, -0.5]);
        let a =
            guidance_grad_with_noise(&lin, &sched, 0.4, &args.0, &args.1, &args.2, &obs, &c, &args.3, None).unwrap();
        c.estimator = Estimator::BiasedJensen;
        let b =
            guidance_grad_with_noise(&lin, &sched, 0.4, &args.0, &args.1, &args.2, &obs, &c, &args.3, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_matches_finite_differences_for_affine_drift() {
        let sched = InterpolantSchedule::default();
        let lin = AffineDrift {
            slope: -0.6,
            offset: vec![0.2, -0.1, 0.3],
            cond_len: 1,
        };
        let obs = ObservationModel::new(ObservationOperator::ArctanFirst, 0.25).unwrap();
        let x = sv(&[0.3, -0.8, 1.1]);
        let w = [sv(&[0.0, 0.0, 0.0])];
        let noise: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        for order in [PosteriorOrder::First, PosteriorOrder::Second] {
            let c = cfg(4, order);
            let out = guidance_grad_with_noise(&lin, &sched, 0.3, &x, &w, &[0.5], &obs, &c, &noise, None).unwrap();
            let h = 1e-6;
            for i in 0..3 {
                let mut p = x.to_vec();
                p[i] += h;
                let mut q = x.to_vec();
                q[i] -= h;
                let fp = guidance_objective(
                    &lin,
                    &sched,
                    0.3,
                    &sv(&p),
                    &w,
                    &[0.5],
                    &obs,
                    &c,
                    &noise,
                    Some(&out.weights),
                )
                .unwrap();
                let fm = guidance_objective(
                    &lin,
                    &sched,
                    0.3,
                    &sv(&q),
                    &w,
                    &[0.5],
                    &obs,
                    &c,
                    &noise,
                    Some(&out.weights),
                )
                .unwrap();
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (fd - out.grad[i]).abs() <= 1e-7 * (1.0 + fd.abs()),
                    "{order:?} {i}: {fd} vs {}",
                    out.grad[i]
                );
            }
        }
    }

    #[test]
    fn zeta_zero_matches_forecast_and_windows_slide() {
        let sched = InterpolantSchedule::default();
        let lin = AffineDrift {
            slope: -0.1,
            offset: vec![0.3],
            cond_len: 2,
        };
        let window = [sv(&[0.0]), sv(&[0.5])];
        let series = ObservationSeries::new(
            vec![vec![1.0], vec![1.2], vec![0.8]],
            ObservationOperator::Identity,
            0.1,
            2,
        )
        .unwrap();
        let mut c = cfg(3, PosteriorOrder::Second);
        c.zeta = 0.0;
        let guided = run(
            &lin,
            &sched,
            &window,
            &series,
            &c,
            4,
            3,
            SampleMode::Assimilate,
            RngStream::new(8),
            1.0,
        )
        .unwrap();
        let fc = run(
            &lin,
            &sched,
            &window,
            &series,
            &c,
            4,
            3,
            SampleMode::Forecast,
            RngStream::new(8),
            1.0,
        )
        .unwrap();
        assert_eq!(guided.trajectories, fc.trajectories);
        assert_eq!(guided.trajectories[0].len(), 5);
        assert_eq!(guided.diagnostics.len(), 3 * 3 * 16);
        assert!(guided
            .diagnostics
            .iter()
            .filter(|d| d.n >= 1)
            .all(|d| d.guidance_loss.is_some()));
        assert!(fc.diagnostics.iter().all(|d| d.guidance_loss.is_none()));
        let empty = run(
            &lin,
            &sched,
            &window,
            &series,
            &c,
            1,
            1,
            SampleMode::Assimilate,
            RngStream::new(8),
            1.0,
        )
        .unwrap();
        assert_eq!(empty.trajectories[0].states(), &window);
    }

    #[test]
    fn guidance_pulls_towards_observation() {
        let sched = InterpolantSchedule::default();
        let drift = AffineDrift::constant(vec![0.0]);
        let obs = ObservationModel::new(ObservationOperator::Identity, 0.1).unwrap();
        let mut c = cfg(8, PosteriorOrder::First);
        c.grid_steps = 32;
        let window = [sv(&[0.0])];
        let mut closer = 0;
        for seed in 0..50 {
            let st = RngStream::new(seed);
            let (a, _) =
                assimilate_step(&drift, &sched, &window, &[2.0], &obs, &c, SampleMode::Assimilate, st).unwrap();
            let (f, _) = assimilate_step(&drift, &sched, &window, &[2.0], &obs, &c, SampleMode::Forecast, st).unwrap();
            closer += ((a[0] - 2.0).abs() < (f[0] - 2.0).abs()) as usize;
        }
        assert_eq!(closer, 50);
    }

    #[test]
    fn missing_observation_is_an_error() {
        let lin = AffineDrift::linear(0.0, 1);
        let series = ObservationSeries::new(vec![vec![1.0]], ObservationOperator::Identity, 0.1, 1).unwrap();
        let r = run(
            &lin,
            &InterpolantSchedule::default(),
            &[sv(&[0.0])],
            &series,
            &cfg(2, PosteriorOrder::First),
            3,
            1,
            SampleMode::Assimilate,
            RngStream::new(0),
            1.0,
        );
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    }
}
