//! Trajectory-ensemble scores: RMSE, Wasserstein-1, transition log-prior
//! and observation log-likelihood.
//!
//! Ensembles are paired lists of trajectories: `truth[i]` is compared with
//! `est[i]`. All scores are computed over absolute steps `first..len`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dynamics::{ObservationModel, System};
use crate::error::{Error, Result};
use crate::state::{ObservationSeries, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub w1: f64,
    /// Sum over transitions, averaged over members.
    pub log_prior: f64,
    /// Sum over observed steps, averaged over members.
    pub log_obs_lik: f64,
    pub rmse_per_step: Vec<f64>,
    pub w1_per_step: Vec<f64>,
    pub log_prior_per_step: Vec<f64>,
    pub log_obs_lik_per_step: Vec<f64>,
}

fn check_pair(truth: &[Trajectory], est: &[Trajectory], first: usize) -> Result<(usize, usize)> {
    if truth.is_empty() || est.is_empty() {
        return Err(Error::Empty("trajectory ensemble"));
    }
    let len = truth[0].len();
    let dim = truth[0].dim();
    for t in truth.iter().chain(est) {
        if t.len() != len || t.dim() != dim {
            return Err(Error::ShapeMismatch(alloc::format!(
                "trajectory of {}×{} does not match {len}×{dim}",
                t.len(),
                t.dim()
            )));
        }
    }
    if first >= len {
        return Err(Error::ShapeMismatch(alloc::format!(
            "first step {first} beyond length {len}"
        )));
    }
    Ok((len, dim))
}

/// Root mean squared error for each step in `first..len`.
pub fn rmse_per_step(truth: &[Trajectory], est: &[Trajectory], first: usize) -> Result<Vec<f64>> {
    if truth.len() != est.len() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} truths vs {} estimates",
            truth.len(),
            est.len()
        )));
    }
    let (len, dim) = check_pair(truth, est, first)?;
    Ok((first..len)
        .map(|k| {
            let sq: f64 = truth
                .iter()
                .zip(est)
                .map(|(t, e)| {
                    t.states()[k]
                        .iter()
                        .zip(e.states()[k].iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .sum();
            libm::sqrt(sq / (truth.len() * dim) as f64)
        })
        .collect())
}

/// RMSE over every (member, step, coordinate).
pub fn rmse(truth: &[Trajectory], est: &[Trajectory], first: usize) -> Result<f64> {
    let per = rmse_per_step(truth, est, first)?;
    Ok(libm::sqrt(per.iter().map(|r| r * r).sum::<f64>() / per.len() as f64))
}

/// Exact 1-D Wasserstein-1 distance between two empirical samples.
pub fn w1_samples(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("W1 sample"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64);
    }
    // Integrate |F_a^{-1}(u) - F_b^{-1}(u)| over the merged quantile grid.
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < na && j < nb {
        let ua = (i + 1) as f64 / na as f64;
        let ub = (j + 1) as f64 / nb as f64;
        let next = ua.min(ub);
        total += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if ua <= next {
            i += 1;
        }
        if ub <= next {
            j += 1;
        }
    }
    Ok(total)
}

/// Per-step W1 averaged over coordinates, for steps `first..len`.
pub fn w1_per_step(truth: &[Trajectory], est: &[Trajectory], first: usize) -> Result<Vec<f64>> {
    let (len, dim) = check_pair(truth, est, first)?;
    let mut out = Vec::with_capacity(len - first);
    for k in first..len {
        let mut acc = 0.0;
        for c in 0..dim {
            let a: Vec<f64> = truth.iter().map(|t| t.states()[k][c]).collect();
            let b: Vec<f64> = est.iter().map(|t| t.states()[k][c]).collect();
            acc += w1_samples(&a, &b)?;
        }
        out.push(acc / dim as f64);
    }
    Ok(out)
}

pub fn w1(truth: &[Trajectory], est: &[Trajectory], first: usize) -> Result<f64> {
    let per = w1_per_step(truth, est, first)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// `log N(x_{k+1}; step(x_k), noise^2 I)` for each transition that starts at
/// step `first` or later.
pub fn log_prior_per_step(est: &Trajectory, system: &System, first: usize) -> Result<Vec<f64>> {
    if est.dim() != system.dim() {
        return Err(Error::ShapeMismatch("trajectory and system dimensions differ".into()));
    }
    let d = est.dim() as f64;
    let sd = system.noise_std();
    let norm = -0.5 * d * libm::log(2.0 * core::f64::consts::PI) - d * libm::log(sd);
    let mut mean = vec![0.0; est.dim()];
    let states = est.states();
    Ok((first..states.len().saturating_sub(1))
        .map(|k| {
            system.deterministic_step_into(&states[k], &mut mean);
            let sq: f64 = states[k + 1].iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum();
            norm - sq / (2.0 * sd * sd)
        })
        .collect())
}

pub fn log_prior(est: &Trajectory, system: &System, first: usize) -> Result<f64> {
    Ok(log_prior_per_step(est, system, first)?.iter().sum())
}

/// `log N(y_k; A(x_k), gamma^2 I)` for each observed step in `first..len`.
pub fn log_obs_lik_per_step(est: &Trajectory, observations: &ObservationSeries, first: usize) -> Result<Vec<f64>> {
    let model = ObservationModel {
        operator: observations.operator().clone(),
        gamma: observations.gamma(),
    };
    model.operator.validate(est.dim())?;
    let mut out = Vec::new();
    for k in first..est.len() {
        if let Some(y) = observations.at(k) {
            if y.len() != model.operator.output_dim(est.dim()) {
                return Err(Error::ShapeMismatch("observation dimension".into()));
            }
            out.push(model.log_likelihood(y, &est.states()[k]));
        }
    }
    Ok(out)
}

pub fn log_obs_lik(est: &Trajectory, observations: &ObservationSeries, first: usize) -> Result<f64> {
    Ok(log_obs_lik_per_step(est, observations, first)?.iter().sum())
}

fn average_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut out = vec![0.0; rows.first().map_or(0, Vec::len)];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v / n;
        }
    }
    out
}

/// All four scores. `observations[i]` belongs to `truth[i]` and `est[i]`.
pub fn evaluate(
    truth: &[Trajectory],
    est: &[Trajectory],
    observations: &[ObservationSeries],
    system: &System,
    first: usize,
) -> Result<MetricReport> {
    if observations.len() != est.len() {
        return Err(Error::ShapeMismatch(
            "one observation series per estimate required".into(),
        ));
    }
    let rmse_per_step = rmse_per_step(truth, est, first)?;
    let w1_per_step = w1_per_step(truth, est, first)?;
    let priors = est
        .iter()
        .map(|e| log_prior_per_step(e, system, first))
        .collect::<Result<Vec<_>>>()?;
    let liks = est
        .iter()
        .zip(observations)
        .map(|(e, o)| log_obs_lik_per_step(e, o, first))
        .collect::<Result<Vec<_>>>()?;
    let log_prior_per_step = average_rows(&priors);
    let log_obs_lik_per_step = average_rows(&liks);
    Ok(MetricReport {
        rmse: libm::sqrt(rmse_per_step.iter().map(|r| r * r).sum::<f64>() / rmse_per_step.len() as f64),
        w1: w1_per_step.iter().sum::<f64>() / w1_per_step.len() as f64,
        log_prior: log_prior_per_step.iter().sum(),
        log_obs_lik: log_obs_lik_per_step.iter().sum(),
        rmse_per_step,
        w1_per_step,
        log_prior_per_step,
        log_obs_lik_per_step,
    })
}

/// Fraction of (member, step, coordinate) entries in `first..len` where the
/// estimate has the same sign as the truth.
pub fn sign_agreement(truth: &[Trajectory], est: &[Trajectory], first: usize) -> Result<f64> {
    if truth.len() != est.len() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} truths vs {} estimates",
            truth.len(),
            est.len()
        )));
    }
    let (len, dim) = check_pair(truth, est, first)?;
    let agree: usize = truth
        .iter()
        .zip(est)
        .map(|(t, e)| {
            (first..len)
                .flat_map(|k| t.states()[k].iter().zip(e.states()[k].iter()))
                .filter(|(a, b)| (**a > 0.0) == (**b > 0.0))
                .count()
        })
        .sum();
    Ok(agree as f64 / (truth.len() * (len - first) * dim) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{LorenzParams, ObservationOperator};
    use crate::rng::{fill_standard_normal, RngStream};
    use crate::state::StateVector;

    fn traj(rows: &[Vec<f64>]) -> Trajectory {
        Trajectory::new(rows.iter().map(|r| StateVector::new(r.clone()).unwrap()).collect(), 1.0).unwrap()
    }

    fn random_ensemble(seed: u64, n: usize, len: usize, d: usize) -> Vec<Trajectory> {
        let mut g = RngStream::new(seed).rng();
        (0..n)
            .map(|_| {
                let rows: Vec<Vec<f64>> = (0..len)
                    .map(|_| {
                        let mut v = vec![0.0; d];
                        fill_standard_normal(&mut g, &mut v);
                        v
                    })
                    .collect();
                traj(&rows)
            })
            .collect()
    }

    fn shifted(ens: &[Trajectory], delta: f64) -> Vec<Trajectory> {
        ens.iter()
            .map(|t| {
                traj(
                    &t.states()
                        .iter()
                        .map(|s| s.iter().map(|v| v + delta).collect())
                        .collect::<Vec<_>>(),
                )
            })
            .collect()
    }

    #[test]
    fn rmse_oracles() {
        let a = random_ensemble(1, 5, 6, 3);
        assert_eq!(rmse(&a, &a, 0).unwrap(), 0.0);
        assert!((rmse(&a, &shifted(&a, 0.3), 1).unwrap() - 0.3).abs() < 1e-12);
        let b = random_ensemble(2, 5, 6, 3);
        let mut sq = 0.0;
        for (t, e) in a.iter().zip(&b) {
            for k in 1..6 {
                for c in 0..3 {
                    sq += (t.states()[k][c] - e.states()[k][c]).powi(2);
                }
            }
        }
        assert!((rmse(&a, &b, 1).unwrap() - (sq / 75.0).sqrt()).abs() < 1e-12);
        assert!(rmse(&a, &b[..4], 0).is_err());
    }

    #[test]
    fn w1_oracles() {
        let a = random_ensemble(3, 6, 4, 2);
        assert_eq!(w1(&a, &a, 0).unwrap(), 0.0);
        assert!((w1_samples(&[0.0], &[0.7]).unwrap() - 0.7).abs() < 1e-15);
        let b = random_ensemble(4, 6, 4, 2);
        let base = w1(&a, &b, 0).unwrap();
        let moved = w1(&shifted(&a, 2.5), &shifted(&b, 2.5), 0).unwrap();
        assert!((base - moved).abs() < 1e-12);
        // Unequal sizes: {0, 1} vs {0.5} moves each half by 0.5.
        assert!((w1_samples(&[0.0, 1.0], &[0.5]).unwrap() - 0.5).abs() < 1e-15);
        assert!(w1_samples(&[], &[1.0]).is_err());
    }

    #[test]
    fn w1_matches_permutation_brute_force() {
        let mut g = RngStream::new(5).rng();
        for _ in 0..20 {
            let mut a = [0.0; 4];
            let mut b = [0.0; 4];
            fill_standard_normal(&mut g, &mut a);
            fill_standard_normal(&mut g, &mut b);
            // Equal-weight optimal transport is attained at a permutation.
            let mut best = f64::INFINITY;
            let mut perm = [0, 1, 2, 3];
            permutations(&mut perm, 0, &mut |p| {
                let c: f64 = (0..4).map(|i| (a[i] - b[p[i]]).abs()).sum::<f64>() / 4.0;
                best = best.min(c);
            });
            assert!((w1_samples(&a, &b).unwrap() - best).abs() < 1e-9);
        }
    }

    fn permutations(p: &mut [usize; 4], k: usize, f: &mut impl FnMut(&[usize; 4])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permutations(p, k + 1, f);
            p.swap(k, i);
        }
    }

    #[test]
    fn log_prior_of_noise_free_lorenz_path() {
        let sys = System::Lorenz63(LorenzParams::default());
        let mut rows = vec![vec![1.0, 2.0, 20.0]];
        let mut out = vec![0.0; 3];
        for _ in 0..14 {
            sys.deterministic_step_into(rows.last().unwrap(), &mut out);
            rows.push(out.clone());
        }
        let t = traj(&rows);
        let per = log_prior_per_step(&t, &sys, 0).unwrap();
        assert_eq!(per.len(), 14);
        let expect = -1.5 * (2.0 * core::f64::consts::PI).ln() - 3.0 * 0.25f64.ln();
        assert!((per[0] - expect).abs() < 1e-9 && (expect - 1.4021).abs() < 1e-4);
        assert!((log_prior(&t, &sys, 0).unwrap() - 19.63).abs() < 0.01);
        let mut bumped = rows.clone();
        bumped[5][1] += 0.25;
        let per2 = log_prior_per_step(&traj(&bumped), &sys, 0).unwrap();
        assert!((per[4] - per2[4] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn log_obs_lik_oracles() {
        let x = traj(&[vec![0.0], vec![0.3], vec![-0.2]]);
        let ys = vec![vec![0.3f64.atan()], vec![(-0.2f64).atan() + 0.25]];
        let series = ObservationSeries::new(ys, ObservationOperator::ArctanFirst, 0.25, 1).unwrap();
        let per = log_obs_lik_per_step(&x, &series, 1).unwrap();
        let zero = -0.5 * (2.0 * core::f64::consts::PI).ln() - 0.25f64.ln();
        assert!((per[0] - zero).abs() < 1e-12 && (zero - 0.4674).abs() < 1e-4);
        assert!((per[0] - per[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn evaluate_collects_all_metrics() {
        let truth = random_ensemble(7, 4, 5, 3);
        let est = shifted(&truth, 0.1);
        let series: Vec<ObservationSeries> = truth
            .iter()
            .map(|t| {
                let ys = t.states()[1..].iter().map(|s| vec![s[0].atan()]).collect();
                ObservationSeries::new(ys, ObservationOperator::ArctanFirst, 0.25, 1).unwrap()
            })
            .collect();
        let sys = System::Lorenz63(LorenzParams::default());
        let r = evaluate(&truth, &est, &series, &sys, 1).unwrap();
        assert!((r.rmse - 0.1).abs() < 1e-12 && (r.w1 - 0.1).abs() < 1e-12);
        assert_eq!(r.rmse_per_step.len(), 4);
        assert_eq!(r.log_prior_per_step.len(), 3);
        assert_eq!(r.log_obs_lik_per_step.len(), 4);
        assert!(r.log_prior.is_finite() && r.log_obs_lik.is_finite());
    }

    #[test]
    fn sign_agreement_counts_matching_signs() {
        let truth = [traj(&[vec![1.0], vec![1.0], vec![-1.0], vec![0.5]])];
        let est = [traj(&[vec![-9.0], vec![0.3], vec![0.2], vec![2.0]])];
        assert!((sign_agreement(&truth, &est, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(sign_agreement(&truth, &truth, 0).unwrap(), 1.0);
    }
}
