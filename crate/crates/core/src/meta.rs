//! Multi-Reptile: Reptile with separate interpolation rates for the
//! representation block (`ε_Φ`) and the hypothesis block (`ε_h`).

use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::cinet::{update_operator, CIConfig, Checkpoint, Layer, NetParams, SeedRecord};
use crate::error::{Error, Result};
use crate::mathcore::RngStream;
use crate::tasking::Task;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsSchedule {
    Constant,
    /// `ε_r = ε_0 (1 − r/R)` for `r = 0..R`.
    #[default]
    LinearDecay,
}

impl EpsSchedule {
    pub fn rate(self, eps0: f64, r: usize, total: usize) -> f64 {
        match self {
            EpsSchedule::Constant => eps0,
            EpsSchedule::LinearDecay => eps0 * (1.0 - r as f64 / total as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub iterations: usize,
    pub eps_phi: f64,
    pub eps_h: f64,
    pub schedule: EpsSchedule,
    pub checkpoint_every: usize,
    pub inner: CIConfig,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            iterations: 1000,
            eps_phi: 0.5,
            eps_h: 0.5,
            schedule: EpsSchedule::LinearDecay,
            checkpoint_every: 100,
            inner: CIConfig::default(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Config("meta iterations must be >= 1".into()));
        }
        for (name, e) in [("eps_phi", self.eps_phi), ("eps_h", self.eps_h)] {
            if !(e > 0.0 && e <= 1.0) {
                return Err(Error::Config(format!("{name} = {e} outside (0, 1]")));
            }
        }
        if self.checkpoint_every < 1 || self.checkpoint_every > self.iterations {
            return Err(Error::Config(format!(
                "checkpoint_every = {} outside [1, {}]",
                self.checkpoint_every, self.iterations
            )));
        }
        self.inner.validate()
    }
}

/// Named `(ε_h, ε_Φ)` regimes for the block-rate sweep.
pub const EPS_PRESETS: [(&str, f64, f64); 3] = [
    ("h_over_phi", 1.0, 0.1),
    ("equal", 0.5, 0.5),
    ("phi_over_h", 0.1, 1.0),
];

fn interpolate(c: &mut Layer, i: &Layer, eps: f64) {
    let cur = c.weights.data_mut().iter_mut().chain(c.bias.iter_mut());
    let inner = i.weights.data().iter().chain(&i.bias);
    for (cv, &iv) in cur.zip(inner) {
        let v = (1.0 - eps) * *cv + eps * iv;
        *cv = v.clamp(cv.min(iv), cv.max(iv));
    }
}

/// `W ← W + ε (W̃ − W)` per block. NN4's single block moves at `eps_h`.
pub fn reptile_step(current: &NetParams, inner_result: &NetParams, eps_phi: f64, eps_h: f64) -> Result<NetParams> {
    if !current.same_layout(inner_result) {
        return Err(Error::Shape("parameter partitions differ".into()));
    }
    let mut out = current.clone();
    for (c, i) in out.phi.iter_mut().zip(&inner_result.phi) {
        interpolate(c, i, eps_phi);
    }
    for (c, i) in out.head.iter_mut().zip(&inner_result.head) {
        interpolate(c, i, eps_h);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub task: usize,
    pub train_objective: f64,
    pub validation_objective: f64,
}

#[derive(Clone, Debug)]
pub struct MetaState {
    pub params: NetParams,
    pub r: usize,
    /// `(iteration, params)`, iterations increasing.
    pub checkpoints: Vec<(usize, NetParams)>,
    pub log: Vec<IterationLog>,
}

const SAMPLER_TAG: u64 = u64::MAX;

/// Stream feeding the inner loop of meta-iteration `r` (0-based).
pub fn inner_stream(rng: &RngStream, r: usize) -> RngStream {
    rng.substream(r as u64)
}

/// Algorithm 1. Each iteration samples a training task uniformly with
/// replacement, runs the update operator from the current initialization and
/// interpolates toward its result.
pub fn meta_train(train_tasks: &[Task], config: &MetaConfig, init: &NetParams, rng: &RngStream) -> Result<MetaState> {
    config.validate()?;
    if train_tasks.is_empty() {
        return Err(Error::Empty("meta-training needs at least one task".into()));
    }
    let mut sampler = rng.substream(SAMPLER_TAG);
    let mut state = MetaState {
        params: init.clone(),
        r: 0,
        checkpoints: Vec::new(),
        log: Vec::with_capacity(config.iterations),
    };
    let total = config.iterations;
    for r in 0..total {
        let task = &train_tasks[sampler.below(train_tasks.len())];
        let inner = update_operator(&state.params, task, &config.inner, &mut inner_stream(rng, r)).map_err(|e| {
            Error::MetaIteration {
                iteration: r + 1,
                task: task.id,
                source: Box::new(e),
            }
        })?;
        let eps_phi = config.schedule.rate(config.eps_phi, r, total);
        let eps_h = config.schedule.rate(config.eps_h, r, total);
        state.params = reptile_step(&state.params, &inner.params, eps_phi, eps_h)?;
        state.r = r + 1;
        state.log.push(IterationLog {
            task: task.id,
            train_objective: inner.train_objective,
            validation_objective: inner.validation_objective,
        });
        if state.r.is_multiple_of(config.checkpoint_every) {
            debug!("checkpoint at iteration {}", state.r);
            state.checkpoints.push((state.r, state.params.clone()));
        }
    }
    info!(
        "meta-training done: {} iterations, {} checkpoints",
        state.r,
        state.checkpoints.len()
    );
    Ok(state)
}

/// Mean inner validation objective over the run; ranks meta hyper settings.
pub fn mean_inner_validation(state: &MetaState) -> f64 {
    crate::mathcore::mean(&state.log.iter().map(|l| l.validation_objective).collect::<Vec<_>>())
}

pub const FINE_TUNE_EPOCHS: usize = 64;

/// Trains from `checkpoint` on the test task's training split and scores the
/// result on its validation split.
pub fn fine_tune(checkpoint: &NetParams, test_task: &Task, config: &CIConfig, rng: &mut RngStream) -> Result<(NetParams, f64)> {
    if test_task.splits.validation.is_empty() {
        return Err(Error::Empty(format!("test task {} has no validation split", test_task.id)));
    }
    let mut start = checkpoint.clone();
    start.dropout = config.dropout;
    let out = update_operator(&start, test_task, config, rng)?;
    Ok((out.params, out.validation_objective))
}

/// Fine-tuning hyperparameters searched per test task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypers {
    pub learning_rate: f64,
    pub dropout: f64,
}

impl Hypers {
    pub fn grid(learning_rates: &[f64], dropouts: &[f64]) -> Vec<Hypers> {
        let mut g: Vec<Hypers> = learning_rates
            .iter()
            .flat_map(|&learning_rate| dropouts.iter().map(move |&dropout| Hypers { learning_rate, dropout }))
            .collect();
        g.sort_by(|a, b| a.key().partial_cmp(&b.key()).expect("finite hypers"));
        g
    }

    fn key(&self) -> (f64, f64) {
        (self.learning_rate, self.dropout)
    }

    pub fn apply(&self, base: &CIConfig) -> CIConfig {
        CIConfig {
            learning_rate: self.learning_rate,
            dropout: self.dropout,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub checkpoint: usize,
    pub hypers: Hypers,
    pub params: NetParams,
    pub validation_objective: f64,
}

/// Fine-tunes every (checkpoint, hypers) pair and keeps the lowest validation
/// objective; ties go to the earlier checkpoint, then the smaller hypers.
/// Pair `(c, h)` draws from `rng.substream(c · |grid| + h)`.
pub fn select_best(
    checkpoints: &[(usize, NetParams)],
    test_task: &Task,
    grid: &[Hypers],
    base: &CIConfig,
    rng: &RngStream,
) -> Result<Selection> {
    select_best_all(checkpoints, test_task, grid, base, rng).map(|s| s.best)
}

/// The winning pair and every pair tried, in search order.
#[derive(Clone, Debug)]
pub struct Search {
    pub best: Selection,
    pub candidates: Vec<Selection>,
}

/// [`select_best`], keeping all candidates.
pub fn select_best_all(
    checkpoints: &[(usize, NetParams)],
    test_task: &Task,
    grid: &[Hypers],
    base: &CIConfig,
    rng: &RngStream,
) -> Result<Search> {
    if checkpoints.is_empty() {
        return Err(Error::Empty("no checkpoints to select from".into()));
    }
    if grid.is_empty() {
        return Err(Error::Empty("empty hyperparameter grid".into()));
    }
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[a].key().partial_cmp(&grid[b].key()).expect("finite hypers"));
    let mut candidates: Vec<Selection> = Vec::with_capacity(checkpoints.len() * grid.len());
    let mut best: Option<usize> = None;
    for (ci, (iter, ck)) in checkpoints.iter().enumerate() {
        for &hi in &order {
            let h = grid[hi];
            let mut stream = rng.substream((ci * grid.len() + hi) as u64);
            let (params, val) = match fine_tune(ck, test_task, &h.apply(base), &mut stream) {
                Ok(r) => r,
                // a diverging setting loses to every finite one
                Err(Error::NonFinite(m)) => {
                    warn!("checkpoint {iter} lr {} dropout {}: {m}", h.learning_rate, h.dropout);
                    (ck.clone(), f64::INFINITY)
                }
                Err(e) => return Err(e),
            };
            debug!("checkpoint {iter} lr {} dropout {}: {val}", h.learning_rate, h.dropout);
            if best.is_none_or(|b: usize| val < candidates[b].validation_objective) {
                best = Some(candidates.len());
            }
            candidates.push(Selection {
                checkpoint: *iter,
                hypers: h,
                params,
                validation_objective: val,
            });
        }
    }
    let best = candidates[best.expect("nonempty search")].clone();
    if !best.validation_objective.is_finite() {
        return Err(Error::NonFinite(format!("every fine-tuning setting diverged on task {}", test_task.id)));
    }
    Ok(Search { best, candidates })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: MetaConfig,
    pub config_hash: String,
    pub seed: SeedRecord,
    pub checkpoints: Vec<usize>,
}

pub fn checkpoint_path(dir: &Path, run_id: &str, iteration: usize) -> PathBuf {
    dir.join(run_id).join(format!("ckpt-{iteration}.json"))
}

/// Writes `{run_id}/ckpt-{r}.json` for every checkpoint plus `{run_id}/manifest.json`.
pub fn save_run(
    dir: &Path,
    run_id: &str,
    state: &MetaState,
    config: &MetaConfig,
    config_hash: &str,
    seed: SeedRecord,
) -> Result<RunManifest> {
    for (iter, params) in &state.checkpoints {
        Checkpoint::from_params(params, config_hash.to_string(), seed, Some(*iter))
            .save(&checkpoint_path(dir, run_id, *iter))?;
    }
    let manifest = RunManifest {
        run_id: run_id.to_string(),
        config: config.clone(),
        config_hash: config_hash.to_string(),
        seed,
        checkpoints: state.checkpoints.iter().map(|(i, _)| *i).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    crate::write_atomic(&dir.join(run_id).join("manifest.json"), text.as_bytes())?;
    Ok(manifest)
}

/// Reads back the checkpoints listed in a run manifest.
pub fn load_run(dir: &Path, run_id: &str) -> Result<(RunManifest, Vec<(usize, NetParams)>)> {
    let path = dir.join(run_id).join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    let cks = manifest
        .checkpoints
        .iter()
        .map(|&i| {
            let ck = Checkpoint::load(&checkpoint_path(dir, run_id, i), Some(&manifest.config_hash), false)?;
            Ok((i, ck.params()?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, cks))
}
