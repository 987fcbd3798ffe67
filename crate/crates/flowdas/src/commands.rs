//! The pipeline commands. Every command reads its inputs, writes into a
//! staged output directory and commits it with a manifest.
//!
//! Random streams are addressed from the configured seed by name
//! (`simulate`, `split`, `eval`, `observe`, `normalizer`, `init`, `train`,
//! `validate`, `sample`, `bpf`, `ablate`), so each artifact depends only on
//! the seed and its own inputs.

use std::path::{Path, PathBuf};

use log::info;
use serde_json::json;

use flowdas_core::assimilate::{run_members, GuidanceConfig, Member, RunOutput, SampleMode};
use flowdas_core::bpf::bpf_run;
use flowdas_core::checkpoint;
use flowdas_core::config::{Estimator, ExperimentConfig, SystemKind};
use flowdas_core::dynamics::{has_well_switch, observe, simulate_dataset};
use flowdas_core::metrics;
use flowdas_core::net::MlpDrift;
use flowdas_core::rng::uniform;
use flowdas_core::train::{build_pairs, fit_normalizer, loss_and_grads, train_loop, EpochRecord};
use flowdas_core::{ObservationSeries, RngStream, StateVector, Trajectory};

use crate::error::{CliError, Result};
use crate::formats::{self, AblationRow, MetricRow};
use crate::output::{Manifest, OutputDir};
use crate::plot;

pub const TRAIN_CSV: &str = "train.csv";
pub const VAL_CSV: &str = "val.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_OBS_CSV: &str = "eval_obs.csv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const TRUTH_CSV: &str = "truth.csv";
pub const OBS_CSV: &str = "observations.csv";
pub const TRAJ_CSV: &str = "trajectories.csv";
pub const DIAG_CSV: &str = "diagnostics.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const LOSS_CSV: &str = "loss.csv";
pub const ABLATION_CSV: &str = "ablation.csv";

/// Threshold on |x| for counting a double-well visit to a basin.
const SWITCH_THRESHOLD: f64 = 0.5;
/// Draws used to fit the network's input and output scaling.
const NORMALIZER_SAMPLES: usize = 4096;
/// Validation pairs scored at each checkpoint.
const VAL_PAIRS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Train,
    Assimilate,
    Forecast,
    Bpf,
    Evaluate,
    Plot,
    Ablate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Train => "train",
            Command::Assimilate => "assimilate",
            Command::Forecast => "forecast",
            Command::Bpf => "bpf",
            Command::Evaluate => "evaluate",
            Command::Plot => "plot",
            Command::Ablate => "ablate",
        }
    }
}

/// Input locations beyond the config file.
#[derive(Debug, Clone, Default)]
pub struct Inputs {
    /// Output directory of `simulate`.
    pub data: Option<PathBuf>,
    /// Checkpoint file, or an output directory of `train`.
    pub model: Option<PathBuf>,
    /// Output directory of `assimilate`, `forecast`, `bpf` or `simulate`.
    pub run: Option<PathBuf>,
    /// Case plotted by `plot`.
    pub case: usize,
}

pub fn execute(cmd: Command, cfg: &ExperimentConfig, out: &Path, force: bool, inputs: &Inputs) -> Result<()> {
    cfg.validate()?;
    let dir = OutputDir::create(out, force)?;
    let mut manifest = Manifest::new(cmd.name(), cfg);
    match cmd {
        Command::Simulate => simulate(cfg, &dir, &mut manifest)?,
        Command::Train => train(cfg, &dir, &mut manifest, inputs)?,
        Command::Assimilate => sample_cmd(cfg, &dir, &mut manifest, inputs, SampleMode::Assimilate)?,
        Command::Forecast => sample_cmd(cfg, &dir, &mut manifest, inputs, SampleMode::Forecast)?,
        Command::Bpf => bpf(cfg, &dir, &mut manifest, inputs)?,
        Command::Evaluate => evaluate(cfg, &dir, &mut manifest, inputs)?,
        Command::Plot => plot_cmd(cfg, &dir, &mut manifest, inputs)?,
        Command::Ablate => ablate(cfg, &dir, &mut manifest, inputs)?,
    }
    dir.commit(manifest)?;
    info!("{} wrote {}", cmd.name(), out.display());
    Ok(())
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::Config(format!("this command needs {flag} <path>")))
}

fn root(cfg: &ExperimentConfig) -> RngStream {
    RngStream::new(cfg.seed)
}

fn check_dim(trajs: &[Trajectory], dim: usize, what: &str) -> Result<()> {
    match trajs.iter().find(|t| t.dim() != dim) {
        Some(t) => Err(CliError::Data(format!(
            "{what}: states have dimension {}, the configured system has {dim}",
            t.dim()
        ))),
        None => Ok(()),
    }
}

/// Fisher-Yates permutation of `0..n`.
fn permutation(n: usize, stream: RngStream) -> Vec<usize> {
    let mut rng = stream.rng();
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = ((uniform(&mut rng) * (i + 1) as f64) as usize).min(i);
        p.swap(i, j);
    }
    p
}

/// Split sizes for `n` trajectories: 80% / 10% / remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

fn simulate(cfg: &ExperimentConfig, dir: &OutputDir, manifest: &mut Manifest) -> Result<()> {
    let s = &cfg.system;
    let sys = cfg.system();
    let (n_train, n_val, n_eval) = split_sizes(s.n_traj);
    if n_train == 0 || n_eval == 0 {
        return Err(CliError::Config(format!(
            "system.n_traj = {} leaves an empty training or evaluation split",
            s.n_traj
        )));
    }
    info!("simulating {} trajectories of {} transitions", s.n_traj, s.traj_len);
    let all = simulate_dataset(&sys, s.n_traj, s.traj_len, s.burn_in, root(cfg).tagged("simulate"))?;
    let perm = permutation(s.n_traj, root(cfg).tagged("split"));
    let pick = |idx: &[usize]| idx.iter().map(|&i| all[i].clone()).collect::<Vec<_>>();
    let (train_idx, rest) = perm.split_at(n_train);
    let (val_idx, eval_idx) = rest.split_at(n_val);
    let train = pick(train_idx);
    let val = pick(val_idx);

    let resimulate = s.eval_process_sigma.is_some() || s.eval_require_switch;
    let (eval, eval_source) = if resimulate {
        // The evaluation split comes from its own generator: a different
        // noise level and, optionally, only trajectories that switch wells.
        let eval_sys = cfg.eval_system();
        let stream = root(cfg).tagged("eval");
        let max_attempts = 1000 * n_eval;
        let mut accepted = Vec::with_capacity(n_eval);
        let mut attempts = 0usize;
        while accepted.len() < n_eval {
            if attempts == max_attempts {
                return Err(CliError::Config(format!(
                    "only {} of {max_attempts} evaluation trajectories switched wells",
                    accepted.len()
                )));
            }
            let t = simulate_dataset(&eval_sys, 1, s.traj_len, s.burn_in, stream.child(attempts as u64))?
                .pop()
                .expect("one trajectory");
            attempts += 1;
            if !s.eval_require_switch || has_well_switch(&t, SWITCH_THRESHOLD) {
                accepted.push(t);
            }
        }
        (
            accepted,
            json!({"generator": "eval", "noise": eval_sys.noise_std(), "attempts": attempts}),
        )
    } else {
        (pick(eval_idx), json!({"generator": "split"}))
    };

    let obs_model = cfg.observation_model();
    let observe_root = root(cfg).tagged("observe");
    let series = eval
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut g = observe_root.child(i as u64).rng();
            let ys = t.states()[1..]
                .iter()
                .map(|x| observe(x, &obs_model, &mut g))
                .collect::<flowdas_core::Result<Vec<_>>>()?;
            Ok(ObservationSeries::new(
                ys,
                obs_model.operator.clone(),
                obs_model.gamma,
                1,
            )?)
        })
        .collect::<Result<Vec<_>>>()?;

    formats::write_trajectories(&dir.file(TRAIN_CSV), &train)?;
    formats::write_trajectories(&dir.file(VAL_CSV), &val)?;
    formats::write_trajectories(&dir.file(EVAL_CSV), &eval)?;
    formats::write_observations(&dir.file(EVAL_OBS_CSV), &series)?;
    manifest.details = json!({
        "split": {
            "train": train_idx,
            "val": val_idx,
            "eval": if resimulate { json!(null) } else { json!(eval_idx) },
        },
        "counts": {"train": train.len(), "val": val.len(), "eval": eval.len()},
        "eval_source": eval_source,
    });
    Ok(())
}

fn read_split(data: &Path, name: &str, cfg: &ExperimentConfig, manifest: &mut Manifest) -> Result<Vec<Trajectory>> {
    let path = data.join(name);
    let trajs = formats::read_trajectories(&path, cfg.system().dt())?;
    check_dim(&trajs, cfg.system().dim(), name)?;
    manifest.input(name, &path)?;
    Ok(trajs)
}

/// Mean interpolant loss over up to `VAL_PAIRS` pairs with fixed noise.
fn validation_loss(model: &MlpDrift, val: &[Trajectory], cfg: &ExperimentConfig) -> flowdas_core::Result<Option<f64>> {
    let l = cfg.train.cond_len;
    let usable: Vec<Trajectory> = val.iter().filter(|t| t.len() > l).cloned().collect();
    if usable.is_empty() {
        return Ok(None);
    }
    let index = build_pairs(&usable, l)?;
    let picks: Vec<usize> = (0..index.len().min(VAL_PAIRS)).collect();
    let batch = index.batch(&usable, &picks);
    let mut g = root(cfg).tagged("validate").rng();
    let (loss, _) = loss_and_grads(model, &batch, &cfg.schedule(), cfg.train.noise_draws, &mut g)?;
    Ok(Some(loss))
}

fn train(cfg: &ExperimentConfig, dir: &OutputDir, manifest: &mut Manifest, inputs: &Inputs) -> Result<()> {
    let data = required(&inputs.data, "--data")?;
    let train = read_split(data, TRAIN_CSV, cfg, manifest)?;
    let val = read_split(data, VAL_CSV, cfg, manifest)?;
    let schedule = cfg.schedule();
    let index = build_pairs(&train, cfg.train.cond_len)?;
    let norm = fit_normalizer(
        &train,
        &index,
        &schedule,
        NORMALIZER_SAMPLES,
        root(cfg).tagged("normalizer"),
    )?;
    let mut model = MlpDrift::init(cfg.architecture(), norm, &mut root(cfg).tagged("init").rng())?;
    info!(
        "training {} parameters on {} pairs for {} epochs",
        model.params().len(),
        index.len(),
        cfg.train.epochs
    );
    let every = cfg.train.checkpoint_every;
    let mut snapshots: Vec<(usize, Vec<u8>, f64, Option<f64>)> = Vec::new();
    let history = train_loop(
        &train,
        &mut model,
        &cfg.train,
        &schedule,
        root(cfg).tagged("train"),
        |r, m| {
            if every > 0 && r.epoch % every == 0 {
                let val_loss = validation_loss(m, &val, cfg)?;
                info!("epoch {} loss {:.5} lr {:.2e}", r.epoch, r.mean_loss, r.lr);
                snapshots.push((r.epoch, checkpoint::encode(m), r.mean_loss, val_loss));
            }
            Ok(())
        },
    )?;
    let final_val = validation_loss(&model, &val, cfg)?;

    formats::write_loss(&dir.file(LOSS_CSV), &history)?;
    let ckpt_path = dir.file(MODEL_FILE);
    std::fs::write(&ckpt_path, checkpoint::encode(&model)).map_err(|e| CliError::io(&ckpt_path, e))?;
    if !snapshots.is_empty() {
        let sub = dir.file("checkpoints");
        std::fs::create_dir(&sub).map_err(|e| CliError::io(&sub, e))?;
        let mut w = csv::Writer::from_path(sub.join("index.csv"))?;
        w.write_record(["epoch", "train_loss", "val_loss", "file"])?;
        for (epoch, bytes, loss, val_loss) in &snapshots {
            let name = format!("epoch_{epoch:06}.ckpt");
            let p = sub.join(&name);
            std::fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))?;
            w.write_record([
                epoch.to_string(),
                formats::fmt(*loss),
                val_loss.map(formats::fmt).unwrap_or_default(),
                name,
            ])?;
        }
        w.flush().map_err(|e| CliError::io(&sub, e))?;
    }
    let first = history.first().map(|r: &EpochRecord| r.mean_loss);
    let last = history.last().map(|r| r.mean_loss);
    manifest.details = json!({
        "pairs": index.len(),
        "parameters": model.params().len(),
        "first_epoch_loss": first,
        "final_epoch_loss": last,
        "val_loss": final_val,
    });
    Ok(())
}

pub fn load_model(path: &Path, cfg: &ExperimentConfig) -> Result<MlpDrift> {
    let file = if path.is_dir() {
        path.join(MODEL_FILE)
    } else {
        path.to_path_buf()
    };
    let bytes =
        std::fs::read(&file).map_err(|e| CliError::Data(format!("cannot read checkpoint {}: {e}", file.display())))?;
    Ok(checkpoint::decode_for(&bytes, &cfg.architecture())?)
}

fn model_input(cfg: &ExperimentConfig, inputs: &Inputs, manifest: &mut Manifest) -> Result<MlpDrift> {
    let path = required(&inputs.model, "--model")?;
    let model = load_model(path, cfg)?;
    let file = if path.is_dir() {
        path.join(MODEL_FILE)
    } else {
        path.to_path_buf()
    };
    manifest.input(MODEL_FILE, &file)?;
    Ok(model)
}

/// Evaluation windows: the truth over steps `0..=horizon` and observations
/// of steps `1..=horizon`.
pub struct Cases {
    pub ids: Vec<usize>,
    pub truth: Vec<Trajectory>,
    pub observations: Vec<ObservationSeries>,
}

pub struct EvalData {
    pub trajectories: Vec<Trajectory>,
    pub observations: Vec<ObservationSeries>,
}

fn eval_input(cfg: &ExperimentConfig, inputs: &Inputs, manifest: &mut Manifest) -> Result<EvalData> {
    let data = required(&inputs.data, "--data")?;
    let trajectories = read_split(data, EVAL_CSV, cfg, manifest)?;
    let path = data.join(EVAL_OBS_CSV);
    let observations = formats::read_observations(&path, &cfg.observation_operator(), cfg.system.gamma)?;
    manifest.input(EVAL_OBS_CSV, &path)?;
    if observations.len() != trajectories.len() {
        return Err(CliError::Data(format!(
            "{} evaluation trajectories but {} observation series",
            trajectories.len(),
            observations.len()
        )));
    }
    Ok(EvalData {
        trajectories,
        observations,
    })
}

impl EvalData {
    /// Case `c` is segment `c / n` of trajectory `c % n`, where segments
    /// are disjoint runs of `horizon + 1` states.
    pub fn cases(&self, ids: impl IntoIterator<Item = usize>, horizon: usize) -> Result<Cases> {
        let n = self.trajectories.len();
        if n == 0 {
            return Err(CliError::Data("evaluation split is empty".into()));
        }
        let seg = horizon + 1;
        let mut out = Cases {
            ids: Vec::new(),
            truth: Vec::new(),
            observations: Vec::new(),
        };
        for c in ids {
            let (t, start) = (c % n, (c / n) * seg);
            let traj = &self.trajectories[t];
            if start + seg > traj.len() {
                let avail: usize = self.trajectories.iter().map(|t| t.len() / seg).min().unwrap_or(0) * n;
                return Err(CliError::Data(format!(
                    "case {c} needs {seg} states from evaluation trajectory {t} at offset {start}; \
                     the split provides about {avail} cases of horizon {horizon}"
                )));
            }
            let ys = (1..=horizon)
                .map(|k| {
                    self.observations[t]
                        .at(start + k)
                        .map(<[f64]>::to_vec)
                        .ok_or_else(|| CliError::Data(format!("no observation for trajectory {t} step {}", start + k)))
                })
                .collect::<Result<Vec<_>>>()?;
            let src = &self.observations[t];
            out.ids.push(c);
            out.truth.push(traj.slice(start..start + seg)?);
            out.observations
                .push(ObservationSeries::new(ys, src.operator().clone(), src.gamma(), 1)?);
        }
        Ok(out)
    }
}

/// Draws `ensemble_size` trajectories per case. Member `m` of case `c`
/// uses stream `stream.child(c).child(m)`, shared by every mode.
pub fn sample_cases(
    model: &MlpDrift,
    cfg: &ExperimentConfig,
    guidance: &GuidanceConfig,
    cases: &Cases,
    mode: SampleMode,
    stream: RngStream,
) -> Result<RunOutput> {
    let l = cfg.train.cond_len;
    let e = cfg.infer.ensemble_size;
    let members: Vec<Member<'_>> = cases
        .ids
        .iter()
        .zip(cases.truth.iter().zip(&cases.observations))
        .flat_map(|(&c, (t, o))| {
            (0..e).map(move |m| Member {
                window: &t.states()[..l],
                observations: o,
                stream: stream.child(c as u64).child(m as u64),
            })
        })
        .collect();
    Ok(run_members(
        model,
        &cfg.schedule(),
        guidance,
        &members,
        cfg.infer.horizon,
        mode,
        cfg.system().dt(),
    )?)
}

fn repeat<T: Clone>(items: &[T], times: usize) -> Vec<T> {
    items
        .iter()
        .flat_map(|x| std::iter::repeat_n(x, times))
        .cloned()
        .collect()
}

/// Scores estimates against truths; `est` holds `est.len() / truth.len()`
/// consecutive members per case.
pub fn metric_rows(
    cfg: &ExperimentConfig,
    truth: &[Trajectory],
    est: &[Trajectory],
    observations: &[ObservationSeries],
) -> Result<Vec<MetricRow>> {
    if truth.is_empty() || est.is_empty() || !est.len().is_multiple_of(truth.len()) {
        return Err(CliError::Data(format!(
            "{} estimates do not divide into {} cases",
            est.len(),
            truth.len()
        )));
    }
    let e = est.len() / truth.len();
    let truth = repeat(truth, e);
    let observations = repeat(observations, e);
    let first = cfg.train.cond_len;
    let r = metrics::evaluate(&truth, est, &observations, &cfg.eval_system(), first)?;
    let mut rows = vec![
        MetricRow {
            metric: "rmse".into(),
            value: r.rmse,
            per_step: r.rmse_per_step,
        },
        MetricRow {
            metric: "w1".into(),
            value: r.w1,
            per_step: r.w1_per_step,
        },
        MetricRow {
            metric: "log_prior".into(),
            value: r.log_prior,
            per_step: r.log_prior_per_step,
        },
        MetricRow {
            metric: "log_obs_lik".into(),
            value: r.log_obs_lik,
            per_step: r.log_obs_lik_per_step,
        },
    ];
    if cfg.system.kind == SystemKind::DoubleWell {
        rows.push(MetricRow {
            metric: "sign_agreement".into(),
            value: metrics::sign_agreement(&truth, est, first)?,
            per_step: Vec::new(),
        });
    }
    Ok(rows)
}

fn sample_cmd(
    cfg: &ExperimentConfig,
    dir: &OutputDir,
    manifest: &mut Manifest,
    inputs: &Inputs,
    mode: SampleMode,
) -> Result<()> {
    let model = model_input(cfg, inputs, manifest)?;
    let data = eval_input(cfg, inputs, manifest)?;
    let cases = data.cases(0..cfg.infer.n_cases, cfg.infer.horizon)?;
    let guidance = GuidanceConfig::from(&cfg.infer);
    info!(
        "{} {} cases x {} members, horizon {}",
        if mode == SampleMode::Forecast {
            "forecasting"
        } else {
            "assimilating"
        },
        cases.ids.len(),
        cfg.infer.ensemble_size,
        cfg.infer.horizon
    );
    let out = sample_cases(&model, cfg, &guidance, &cases, mode, root(cfg).tagged("sample"))?;
    let rows = metric_rows(cfg, &cases.truth, &out.trajectories, &cases.observations)?;
    formats::write_trajectories(&dir.file(TRUTH_CSV), &cases.truth)?;
    formats::write_observations(&dir.file(OBS_CSV), &cases.observations)?;
    formats::write_trajectories(&dir.file(TRAJ_CSV), &out.trajectories)?;
    if cfg.infer.diagnostics {
        formats::write_diagnostics(&dir.file(DIAG_CSV), &out.diagnostics)?;
    }
    formats::write_metrics(&dir.file(METRICS_CSV), &rows)?;
    manifest.details = json!({
        "mode": if mode == SampleMode::Forecast { "forecast" } else { "assimilate" },
        "cases": cases.ids,
        "ensemble_size": cfg.infer.ensemble_size,
        "first_scored_step": cfg.train.cond_len,
        "metrics": rows.iter().map(|r| (r.metric.clone(), json!(r.value))).collect::<serde_json::Map<_, _>>(),
    });
    Ok(())
}

fn bpf(cfg: &ExperimentConfig, dir: &OutputDir, manifest: &mut Manifest, inputs: &Inputs) -> Result<()> {
    let data = eval_input(cfg, inputs, manifest)?;
    let cases = data.cases(0..cfg.infer.n_cases, cfg.infer.horizon)?;
    let sys = cfg.eval_system();
    let l = cfg.train.cond_len;
    let horizon = cfg.infer.horizon;
    let stream = root(cfg).tagged("bpf");
    info!(
        "filtering {} cases with {} particles",
        cases.ids.len(),
        cfg.infer.bpf_particles
    );
    let mut estimates = Vec::with_capacity(cases.ids.len());
    let mut w = csv::Writer::from_path(dir.file("bpf_steps.csv"))?;
    w.write_record(["traj_id", "step", "ess", "resampled", "underflow"])?;
    for (i, ((&c, truth), obs)) in cases.ids.iter().zip(&cases.truth).zip(&cases.observations).enumerate() {
        // Filter from the last window state; observations are re-indexed so
        // that step 1 of the filter is absolute step `l`.
        let x0 = &truth.states()[l - 1];
        let ys = (l..=horizon).map(|k| obs.at(k).unwrap().to_vec()).collect();
        let shifted = ObservationSeries::new(ys, obs.operator().clone(), obs.gamma(), 1)?;
        let out = bpf_run(
            &sys,
            x0,
            &shifted,
            horizon + 1 - l,
            cfg.infer.bpf_particles,
            stream.child(c as u64),
        )?;
        let mut states: Vec<StateVector> = truth.states()[..l - 1].to_vec();
        states.extend(out.estimate.states().iter().cloned());
        estimates.push(Trajectory::new(states, truth.dt())?);
        for (k, st) in out.steps.iter().enumerate() {
            w.write_record([
                i.to_string(),
                (l + k).to_string(),
                formats::fmt(st.ess),
                st.resampled.to_string(),
                st.underflow.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| CliError::io(dir.path(), e))?;
    let rows = metric_rows(cfg, &cases.truth, &estimates, &cases.observations)?;
    formats::write_trajectories(&dir.file(TRUTH_CSV), &cases.truth)?;
    formats::write_observations(&dir.file(OBS_CSV), &cases.observations)?;
    formats::write_trajectories(&dir.file(TRAJ_CSV), &estimates)?;
    formats::write_metrics(&dir.file(METRICS_CSV), &rows)?;
    manifest.details = json!({
        "cases": cases.ids,
        "particles": cfg.infer.bpf_particles,
        "transition_noise": sys.noise_std(),
        "metrics": rows.iter().map(|r| (r.metric.clone(), json!(r.value))).collect::<serde_json::Map<_, _>>(),
    });
    Ok(())
}

struct RunFiles {
    truth: Vec<Trajectory>,
    observations: Option<Vec<ObservationSeries>>,
    estimates: Option<Vec<Trajectory>>,
}

/// Reads a run directory; a `simulate` directory counts as truth only.
fn read_run(run: &Path, cfg: &ExperimentConfig, manifest: &mut Manifest) -> Result<RunFiles> {
    let dt = cfg.system().dt();
    let (truth_name, obs_name) = if run.join(TRUTH_CSV).exists() {
        (TRUTH_CSV, OBS_CSV)
    } else if run.join(EVAL_CSV).exists() {
        (EVAL_CSV, EVAL_OBS_CSV)
    } else {
        return Err(CliError::Data(format!(
            "{} contains neither {TRUTH_CSV} nor {EVAL_CSV}",
            run.display()
        )));
    };
    let truth = formats::read_trajectories(&run.join(truth_name), dt)?;
    check_dim(&truth, cfg.system().dim(), truth_name)?;
    manifest.input(truth_name, &run.join(truth_name))?;
    let observations = if run.join(obs_name).exists() {
        manifest.input(obs_name, &run.join(obs_name))?;
        Some(formats::read_observations(
            &run.join(obs_name),
            &cfg.observation_operator(),
            cfg.system.gamma,
        )?)
    } else {
        None
    };
    let estimates = if run.join(TRAJ_CSV).exists() {
        manifest.input(TRAJ_CSV, &run.join(TRAJ_CSV))?;
        let est = formats::read_trajectories(&run.join(TRAJ_CSV), dt)?;
        check_dim(&est, cfg.system().dim(), TRAJ_CSV)?;
        Some(est)
    } else {
        None
    };
    Ok(RunFiles {
        truth,
        observations,
        estimates,
    })
}

fn evaluate(cfg: &ExperimentConfig, dir: &OutputDir, manifest: &mut Manifest, inputs: &Inputs) -> Result<()> {
    let run = required(&inputs.run, "--run")?;
    let files = read_run(run, cfg, manifest)?;
    let est = files
        .estimates
        .ok_or_else(|| CliError::Data(format!("{} has no {TRAJ_CSV}", run.display())))?;
    let obs = files
        .observations
        .ok_or_else(|| CliError::Data(format!("{} has no {OBS_CSV}", run.display())))?;
    let rows = metric_rows(cfg, &files.truth, &est, &obs)?;
    formats::write_metrics(&dir.file(METRICS_CSV), &rows)?;
    manifest.details = json!({
        "metrics": rows.iter().map(|r| (r.metric.clone(), json!(r.value))).collect::<serde_json::Map<_, _>>(),
    });
    Ok(())
}

fn plot_cmd(cfg: &ExperimentConfig, dir: &OutputDir, manifest: &mut Manifest, inputs: &Inputs) -> Result<()> {
    let run = required(&inputs.run, "--run")?;
    let files = read_run(run, cfg, manifest)?;
    let case = inputs.case;
    let truth = files
        .truth
        .get(case)
        .ok_or_else(|| CliError::Data(format!("case {case} out of range ({} cases)", files.truth.len())))?;
    let members: Option<Vec<&Trajectory>> = match &files.estimates {
        None => None,
        Some(est) => {
            if est.is_empty() || !est.len().is_multiple_of(files.truth.len()) {
                return Err(CliError::Data(format!(
                    "empty or ragged ensemble: {} estimates for {} cases",
                    est.len(),
                    files.truth.len()
                )));
            }
            let e = est.len() / files.truth.len();
            Some(est[case * e..(case + 1) * e].iter().collect())
        }
    };
    let op = cfg.observation_operator();
    let mut written = Vec::new();
    for coord in 0..truth.dim() {
        let ensemble = match &members {
            Some(ms) => {
                let series: Vec<Vec<f64>> = ms
                    .iter()
                    .map(|t| t.states().iter().map(|s| s[coord]).collect())
                    .collect();
                Some(plot::band(&series)?)
            }
            None => None,
        };
        let observations = files
            .observations
            .as_ref()
            .and_then(|o| o.get(case))
            .map(|o| {
                o.observations()
                    .iter()
                    .enumerate()
                    .filter_map(|(j, y)| plot::observed_coordinate(&op, y, coord).map(|v| (o.first_index() + j, v)))
                    .collect()
            })
            .unwrap_or_default();
        let panel = plot::Panel {
            title: format!("x{coord}, case {case}"),
            truth: Some(truth.states().iter().map(|s| s[coord]).collect()),
            ensemble,
            observations,
        };
        let svg = plot::render(&panel)?;
        let name = format!("x{coord}.svg");
        let p = dir.file(&name);
        std::fs::write(&p, svg).map_err(|e| CliError::io(&p, e))?;
        written.push(name);
    }
    manifest.details = json!({"case": case, "plots": written, "truth_only": members.is_none()});
    Ok(())
}

fn estimator_name(e: Estimator) -> &'static str {
    match e {
        Estimator::Unbiased => "unbiased",
        Estimator::BiasedJensen => "biased_jensen",
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn ablate(cfg: &ExperimentConfig, dir: &OutputDir, manifest: &mut Manifest, inputs: &Inputs) -> Result<()> {
    let model = model_input(cfg, inputs, manifest)?;
    let data = eval_input(cfg, inputs, manifest)?;
    let inf = &cfg.infer;
    let base = GuidanceConfig::from(inf);
    let mut cells: Vec<(String, String, GuidanceConfig)> = Vec::new();
    for &j in &inf.ablate_j {
        cells.push(("J".into(), j.to_string(), GuidanceConfig { mc_samples: j, ..base }));
    }
    for &e in &inf.ablate_estimators {
        cells.push((
            "estimator".into(),
            estimator_name(e).into(),
            GuidanceConfig { estimator: e, ..base },
        ));
    }
    if cells.is_empty() {
        return Err(CliError::Config(
            "nothing to sweep: ablate_j and ablate_estimators are empty".into(),
        ));
    }
    let per = inf.ablate_cases;
    let mut scores = vec![Vec::with_capacity(inf.ablate_seeds); cells.len()];
    let mut case_ids = Vec::with_capacity(inf.ablate_seeds);
    let mut runs = Vec::new();
    for seed in 0..inf.ablate_seeds {
        // Every cell of a seed sees the same cases and the same stream.
        let cases = data.cases(seed * per..(seed + 1) * per, inf.horizon)?;
        let stream = root(cfg).tagged("ablate").child(seed as u64);
        for (ci, (param, value, g)) in cells.iter().enumerate() {
            let out = sample_cases(&model, cfg, g, &cases, SampleMode::Assimilate, stream)?;
            let truth = repeat(&cases.truth, inf.ensemble_size);
            let r = metrics::rmse(&truth, &out.trajectories, cfg.train.cond_len)?;
            scores[ci].push(r);
            runs.push((param.clone(), value.clone(), seed as u64, r));
        }
        info!("ablation seed {} of {} done", seed + 1, inf.ablate_seeds);
        case_ids.push(cases.ids);
    }
    let rows: Vec<AblationRow> = cells
        .iter()
        .zip(&scores)
        .map(|((param, value, _), s)| {
            let (m, sd) = mean_std(s);
            AblationRow {
                param: param.clone(),
                value: value.clone(),
                rmse_mean: m,
                rmse_std: sd,
                seeds: s.len(),
            }
        })
        .collect();
    formats::write_ablation(&dir.file(ABLATION_CSV), &rows)?;
    formats::write_ablation_runs(&dir.file("ablation_runs.csv"), &runs)?;
    manifest.details = json!({
        "seeds": (0..inf.ablate_seeds).collect::<Vec<_>>(),
        "seed_streams": "shared by every cell",
        "cases_per_seed": case_ids,
        "fixed": {"J": base.mc_samples, "estimator": estimator_name(base.estimator), "zeta": base.zeta},
    });
    Ok(())
}
