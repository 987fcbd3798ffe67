//! Pair sampling, the interpolant regression loss and the training loop.

use alloc::vec;
use alloc::vec::Vec;

use crate::config::TrainConfig;
use crate::error::{ensure_finite, Error, Result};
use crate::interpolant::InterpolantSchedule;
use crate::net::{BatchInput, MlpDrift, Normalizer, ParamGrads};
use crate::rng::{fill_standard_normal, uniform, RngStream};
use crate::state::Trajectory;

/// Every `(window, successor)` pair available in a set of trajectories.
///
/// A pair is addressed by its trajectory and the index of the window's first
/// state; the successor is `start + L` in the same trajectory, so no pair
/// straddles two trajectories.
#[derive(Debug, Clone)]
pub struct PairIndex {
    cond_len: usize,
    /// Cumulative pair counts; `offsets[t]` is the first pair of trajectory `t`.
    offsets: Vec<usize>,
}

pub fn build_pairs(trajectories: &[Trajectory], cond_len: usize) -> Result<PairIndex> {
    if cond_len == 0 {
        return Err(Error::InvalidConfig("cond_len must be >= 1".into()));
    }
    if trajectories.is_empty() {
        return Err(Error::Empty("trajectory set"));
    }
    let dim = trajectories[0].dim();
    let mut offsets = Vec::with_capacity(trajectories.len() + 1);
    offsets.push(0);
    for (index, t) in trajectories.iter().enumerate() {
        if t.len() < cond_len + 1 {
            return Err(Error::TrajectoryTooShort {
                index,
                len: t.len(),
                needed: cond_len + 1,
            });
        }
        if t.dim() != dim {
            return Err(Error::DimensionMismatch {
                context: "trajectory dimension",
                expected: dim,
                actual: t.dim(),
            });
        }
        offsets.push(offsets[index] + t.len() - cond_len);
    }
    Ok(PairIndex { cond_len, offsets })
}

impl PairIndex {
    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cond_len(&self) -> usize {
        self.cond_len
    }

    /// `(trajectory, window start)` of pair `i`.
    pub fn locate(&self, i: usize) -> (usize, usize) {
        let t = self.offsets.partition_point(|&o| o <= i) - 1;
        (t, i - self.offsets[t])
    }

    /// Minibatch of `count` pairs drawn uniformly with replacement.
    pub fn sample_batch(&self, trajectories: &[Trajectory], count: usize, rng: &mut impl rand::Rng) -> PairBatch {
        let picks: Vec<usize> = (0..count).map(|_| rng.random_range(0..self.len())).collect();
        self.batch(trajectories, &picks)
    }

    pub fn batch(&self, trajectories: &[Trajectory], picks: &[usize]) -> PairBatch {
        let dim = trajectories[0].dim();
        let mut b = PairBatch::new(dim, self.cond_len);
        for &i in picks {
            let (t, start) = self.locate(i);
            let states = trajectories[t].states();
            for s in &states[start..start + self.cond_len] {
                b.windows.extend_from_slice(s);
            }
            b.targets.extend_from_slice(&states[start + self.cond_len]);
        }
        b
    }
}

/// `K'` pairs stored flat: windows are `K' × L × D`, targets `K' × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub dim: usize,
    pub cond_len: usize,
    pub windows: Vec<f64>,
    pub targets: Vec<f64>,
}

impl PairBatch {
    pub fn new(dim: usize, cond_len: usize) -> Self {
        Self {
            dim,
            cond_len,
            windows: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn push(&mut self, window: &[f64], successor: &[f64]) -> Result<()> {
        crate::error::ensure_len(window.len(), self.dim * self.cond_len, "pair window")?;
        crate::error::ensure_len(successor.len(), self.dim, "pair successor")?;
        self.windows.extend_from_slice(window);
        self.targets.extend_from_slice(successor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.targets.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Last state of window `i`, the interpolant's `x0`.
    fn anchor(&self, i: usize) -> &[f64] {
        let w = self.dim * self.cond_len;
        &self.windows[i * w + w - self.dim..(i + 1) * w]
    }
}

/// Interpolation times and noise for `S` draws of every pair, draw-major:
/// row `r = draw * K' + pair`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraws {
    pub draws: usize,
    pub s: Vec<f64>,
    pub z: Vec<f64>,
}

pub fn draw_noise(batch: &PairBatch, draws: usize, rng: &mut impl rand::Rng) -> NoiseDraws {
    let rows = batch.len() * draws;
    let s = (0..rows).map(|_| uniform(rng)).collect();
    let mut z = vec![0.0; rows * batch.dim];
    fill_standard_normal(rng, &mut z);
    NoiseDraws { draws, s, z }
}

/// Empirical loss `(1/K'S) sum ||b(s, I_s, window) - R_s||^2` and its exact
/// parameter gradient for the given draws.
pub fn loss_and_grads_with_draws(
    model: &MlpDrift,
    batch: &PairBatch,
    schedule: &InterpolantSchedule,
    noise: &NoiseDraws,
) -> Result<(f64, ParamGrads)> {
    if batch.is_empty() || noise.draws == 0 {
        return Err(Error::Empty("training batch"));
    }
    model.check_compatible(&crate::net::Architecture {
        state_dim: batch.dim,
        cond_len: batch.cond_len,
        ..*model.arch()
    })?;
    let (k, d) = (batch.len(), batch.dim);
    let rows = k * noise.draws;
    crate::error::ensure_len(noise.s.len(), rows, "noise draws s")?;
    crate::error::ensure_len(noise.z.len(), rows * d, "noise draws z")?;
    let w = d * batch.cond_len;
    let mut x_s = vec![0.0; rows * d];
    let mut target = vec![0.0; rows * d];
    let mut cond = Vec::with_capacity(rows * w);
    for r in 0..rows {
        let p = r % k;
        let at = r * d..(r + 1) * d;
        schedule.interpolate_into(
            noise.s[r],
            batch.anchor(p),
            &batch.targets[p * d..(p + 1) * d],
            &noise.z[at.clone()],
            &mut x_s[at.clone()],
            &mut target[at],
        );
        cond.extend_from_slice(&batch.windows[p * w..(p + 1) * w]);
    }
    let (out, tape) = model.forward_batch_taped(BatchInput {
        s: &noise.s,
        x_s: &x_s,
        cond: &cond,
    })?;
    let scale = 1.0 / rows as f64;
    let mut loss = 0.0;
    let mut cot = vec![0.0; rows * d];
    for i in 0..rows * d {
        let e = out[i] - target[i];
        loss += e * e;
        cot[i] = 2.0 * e * scale;
    }
    loss *= scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let grads = model.vjp_params_taped(&tape, &cot)?;
    ensure_finite(&grads.values, "parameter gradient")?;
    Ok((loss, grads))
}

pub fn loss_and_grads(
    model: &MlpDrift,
    batch: &PairBatch,
    schedule: &InterpolantSchedule,
    draws: usize,
    rng: &mut impl rand::Rng,
) -> Result<(f64, ParamGrads)> {
    let noise = draw_noise(batch, draws, rng);
    loss_and_grads_with_draws(model, batch, schedule, &noise)
}

/// Adam moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(params: usize) -> Self {
        Self {
            m: vec![0.0; params],
            v: vec![0.0; params],
        }
    }
}

/// Learning rate at 0-based `step` of `total` under linear decay.
pub fn scheduled_lr(config: &TrainConfig, step: usize, total: usize) -> f64 {
    let frac = if total == 0 { 0.0 } else { step as f64 / total as f64 };
    config.learning_rate * (1.0 - frac).clamp(0.0, 1.0)
}

/// One bias-corrected Adam update at 0-based `step`; returns the rate used.
pub fn adam_step(
    model: &mut MlpDrift,
    grads: &ParamGrads,
    state: &mut AdamState,
    step: usize,
    total: usize,
    config: &TrainConfig,
) -> Result<f64> {
    let n = model.params().len();
    crate::error::ensure_len(grads.values.len(), n, "gradient")?;
    crate::error::ensure_len(state.m.len(), n, "Adam state")?;
    let clip = match config.grad_clip {
        Some(c) if c > 0.0 => {
            let norm = grads.norm();
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        _ => 1.0,
    };
    let lr = scheduled_lr(config, step, total);
    let t = (step + 1) as i32;
    let bc1 = 1.0 - libm::pow(config.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(config.beta2, t as f64);
    let (b1, b2, eps) = (config.beta1, config.beta2, config.adam_eps);
    for (i, p) in model.params_mut().iter_mut().enumerate() {
        let g = grads.values[i] * clip;
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        *p -= lr * mh / (libm::sqrt(vh) + eps);
    }
    Ok(lr)
}

/// Normaliser from data: per-coordinate mean and standard deviation of all
/// states, and the standard deviation of the regression target over
/// `samples` random draws.
pub fn fit_normalizer(
    trajectories: &[Trajectory],
    index: &PairIndex,
    schedule: &InterpolantSchedule,
    samples: usize,
    rng: RngStream,
) -> Result<Normalizer> {
    if trajectories.is_empty() {
        return Err(Error::Empty("trajectory set"));
    }
    let d = trajectories[0].dim();
    let (mut sum, mut sq, mut n) = (vec![0.0; d], vec![0.0; d], 0.0);
    for t in trajectories {
        for s in t.states() {
            for c in 0..d {
                sum[c] += s[c];
                sq[c] += s[c] * s[c];
            }
            n += 1.0;
        }
    }
    let std_of = |s: f64, q: f64, n: f64| {
        let m = s / n;
        let v = (q / n - m * m).max(0.0);
        let sd = libm::sqrt(v);
        if sd > 1e-8 {
            sd
        } else {
            1.0
        }
    };
    let shift: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let scale: Vec<f64> = (0..d).map(|c| std_of(sum[c], sq[c], n)).collect();

    let mut g = rng.rng();
    let batch = index.sample_batch(trajectories, samples.max(2), &mut g);
    let noise = draw_noise(&batch, 1, &mut g);
    let (mut rs, mut rq) = (vec![0.0; d], vec![0.0; d]);
    let (mut val, mut vel) = (vec![0.0; d], vec![0.0; d]);
    for p in 0..batch.len() {
        schedule.interpolate_into(
            noise.s[p],
            batch.anchor(p),
            &batch.targets[p * d..(p + 1) * d],
            &noise.z[p * d..(p + 1) * d],
            &mut val,
            &mut vel,
        );
        for c in 0..d {
            rs[c] += vel[c];
            rq[c] += vel[c] * vel[c];
        }
    }
    let m = batch.len() as f64;
    let out_scale = (0..d).map(|c| std_of(rs[c], rq[c], m)).collect();
    let norm = Normalizer {
        shift,
        scale,
        out_scale,
    };
    ensure_finite(&norm.shift, "normalizer")?;
    Ok(norm)
}

/// One row of the loss history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

/// Runs `config.epochs` epochs of `steps_per_epoch` Adam steps. Step `i`
/// draws its minibatch and noise from child stream `i` of `rng`, so the
/// history is a pure function of the inputs. `on_epoch` runs after every
/// epoch and may write checkpoints.
pub fn train_loop<F>(
    trajectories: &[Trajectory],
    model: &mut MlpDrift,
    config: &TrainConfig,
    schedule: &InterpolantSchedule,
    rng: RngStream,
    mut on_epoch: F,
) -> Result<Vec<EpochRecord>>
where
    F: FnMut(&EpochRecord, &MlpDrift) -> Result<()>,
{
    if config.epochs == 0 {
        return Ok(Vec::new());
    }
    let index = build_pairs(trajectories, model.arch().cond_len)?;
    let total = config.epochs * config.steps_per_epoch;
    let mut adam = AdamState::new(model.params().len());
    let mut history = Vec::with_capacity(config.epochs);
    let mut last_finite = f64::NAN;
    for epoch in 0..config.epochs {
        let mut acc = 0.0;
        let mut lr = 0.0;
        for k in 0..config.steps_per_epoch {
            let step = epoch * config.steps_per_epoch + k;
            let mut g = rng.child(step as u64).rng();
            let batch = index.sample_batch(trajectories, config.batch_pairs, &mut g);
            let (loss, grads) = match loss_and_grads(model, &batch, schedule, config.noise_draws, &mut g) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::NonFiniteLoss {
                        epoch: epoch + 1,
                        last_finite,
                    })
                }
                Err(e) => return Err(e),
            };
            acc += loss;
            lr = adam_step(model, &grads, &mut adam, step, total, config)?;
            if model.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    last_finite,
                });
            }
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_loss: acc / config.steps_per_epoch as f64,
            lr,
        };
        last_finite = record.mean_loss;
        on_epoch(&record, model)?;
        history.push(record);
    }
    Ok(history)
}
