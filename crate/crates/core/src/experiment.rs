//! Leave-one-task-out evaluation: metrics, method recipes, scenario runner and
//! report files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::cinet::{self, build_ci, build_nn4, predict, Batch, CIConfig, NetKind, NetParams, SeedRecord};
use crate::dgp::{ground_truth_ate, make_concept_shift_family, AdDgpParams, Dataset, Dgp, FeatureSource, IhdpDgpParams};
use crate::error::{Error, Result};
use crate::mathcore::{mean, population_variance, RngStream};
use crate::meta::{self, Hypers, MetaConfig, EPS_PRESETS};
use crate::tasking::{build_taskset, leave_one_out, ChunkScheme, Population, Task, TaskSet};

// ---------------------------------------------------------------------------
// Metrics

/// Factual outcomes paired with predicted counterfactuals.
#[derive(Clone, Debug, PartialEq)]
pub struct AtePrediction {
    pub y: Vec<f64>,
    /// Prediction under `1 − t`.
    pub y_cf: Vec<f64>,
    pub t: Vec<u8>,
}

/// Half the treated-group mean of `y₁ − ŷ₀` plus half the control-group mean
/// of `ŷ₁ − y₀`.
pub fn ate(pred: &AtePrediction) -> Result<f64> {
    if pred.y.len() != pred.t.len() || pred.y_cf.len() != pred.t.len() {
        return Err(Error::Shape("prediction vectors differ in length".into()));
    }
    let mut treated = Vec::new();
    let mut control = Vec::new();
    for ((&y, &cf), &t) in pred.y.iter().zip(&pred.y_cf).zip(&pred.t) {
        if t == 1 {
            treated.push(y - cf);
        } else {
            control.push(cf - y);
        }
    }
    if treated.is_empty() || control.is_empty() {
        return Err(Error::MissingGroup(format!(
            "{} treated, {} control rows",
            treated.len(),
            control.len()
        )));
    }
    Ok(0.5 * mean(&treated) + 0.5 * mean(&control))
}

pub fn mape(ate_hat: f64, ate_g: f64) -> Result<f64> {
    if ate_g == 0.0 {
        return Err(Error::InvalidArgument("MAPE undefined for a zero ground-truth ATE".into()));
    }
    Ok((ate_g - ate_hat).abs() / ate_g.abs())
}

/// Estimated ATE of `params` on rows `idx` of `ds`.
pub fn predicted_ate(params: &NetParams, ds: &Dataset, idx: &[usize]) -> Result<f64> {
    let b = Batch::gather(ds, idx);
    let flipped: Vec<u8> = b.t.iter().map(|&t| 1 - t).collect();
    let y_cf = predict(params, &b.x, &flipped)?;
    ate(&AtePrediction { y: b.y, y_cf, t: b.t })
}

/// ATE of the predictor that reads the true counterfactual mean.
pub fn oracle_ate(ds: &Dataset, idx: &[usize]) -> Result<f64> {
    let (Some(mu0), Some(mu1)) = (&ds.mu0, &ds.mu1) else {
        return Err(Error::MissingColumns(vec!["mu0".into(), "mu1".into()]));
    };
    let t: Vec<u8> = idx.iter().map(|&i| ds.t[i]).collect();
    let y = idx.iter().map(|&i| ds.y[i]).collect();
    let y_cf = idx.iter().map(|&i| if ds.t[i] == 1 { mu0[i] } else { mu1[i] }).collect();
    ate(&AtePrediction { y, y_cf, t })
}

// ---------------------------------------------------------------------------
// Methods and reports

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    MetaCI,
    RandomCI,
    #[serde(rename = "CI_Omega", alias = "CI_Ω")]
    CiOmega,
    MetaNN4,
    RandomNN4,
    /// Reads the true counterfactual means; checks the pipeline, not a model.
    Oracle,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::MetaCI,
        Method::RandomCI,
        Method::CiOmega,
        Method::MetaNN4,
        Method::RandomNN4,
        Method::Oracle,
    ];

    pub fn net(self) -> Option<NetKind> {
        match self {
            Method::MetaCI | Method::RandomCI | Method::CiOmega => Some(NetKind::Ci),
            Method::MetaNN4 | Method::RandomNN4 => Some(NetKind::Nn4),
            Method::Oracle => None,
        }
    }

    pub fn is_meta(self) -> bool {
        matches!(self, Method::MetaCI | Method::MetaNN4)
    }

    fn index(self) -> u64 {
        Method::ALL.iter().position(|&m| m == self).expect("listed") as u64
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("unit variant");
        f.write_str(v.as_str().expect("string"))
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Method> {
        serde_json::from_value(Value::String(s.trim().to_string()))
            .map_err(|_| Error::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Task,
    Aggregate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    /// Ground-truth ATE was zero; `abs_error` holds the error instead.
    MapeUndefined,
    Failed,
}

/// One report line. Task rows describe one (seed, test task, method) run;
/// aggregate rows average the OK task rows of a (scenario, method).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub kind: RowKind,
    pub scenario: String,
    pub omega: usize,
    pub k: usize,
    pub n_omega: usize,
    pub method: Method,
    pub seed: Option<u64>,
    pub test_task: Option<usize>,
    pub dgp_id: Option<usize>,
    pub checkpoint: Option<usize>,
    pub learning_rate: Option<f64>,
    pub dropout: Option<f64>,
    pub ate: Option<f64>,
    pub ate_g: Option<f64>,
    pub mape: Option<f64>,
    pub abs_error: Option<f64>,
    pub members: usize,
    pub status: RowStatus,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn task_rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(|r| r.kind == RowKind::Task)
    }

    pub fn aggregate_rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(|r| r.kind == RowKind::Aggregate)
    }

    /// Drops existing aggregates and appends one per (scenario, method), in
    /// order of first appearance.
    pub fn with_aggregates(&self) -> EvalReport {
        let tasks: Vec<ReportRow> = self.task_rows().cloned().collect();
        let mut groups: Vec<((String, Method), Vec<&ReportRow>)> = Vec::new();
        for r in &tasks {
            let key = (r.scenario.clone(), r.method);
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(r),
                None => groups.push((key, vec![r])),
            }
        }
        let mut rows = tasks.clone();
        for ((scenario, method), members) in groups {
            let ok: Vec<&ReportRow> = members.iter().copied().filter(|r| r.status == RowStatus::Ok).collect();
            let first = members[0];
            let avg = |f: fn(&ReportRow) -> Option<f64>| -> Option<f64> {
                let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
                (!v.is_empty()).then(|| mean(&v))
            };
            let failed = members.len() - ok.len();
            rows.push(ReportRow {
                kind: RowKind::Aggregate,
                scenario,
                omega: first.omega,
                k: first.k,
                n_omega: first.n_omega,
                method,
                seed: None,
                test_task: None,
                dgp_id: None,
                checkpoint: None,
                learning_rate: None,
                dropout: None,
                ate: avg(|r| r.ate),
                ate_g: avg(|r| r.ate_g),
                mape: avg(|r| r.mape),
                abs_error: avg(|r| r.abs_error),
                members: ok.len(),
                status: if ok.is_empty() { RowStatus::Failed } else { RowStatus::Ok },
                message: if failed > 0 { format!("{failed} member rows excluded") } else { String::new() },
            });
        }
        EvalReport { rows }
    }

    /// Schema checks: MAPE matches its definition on OK task rows and every
    /// aggregate is the mean of its members.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for r in self.task_rows() {
            match r.status {
                RowStatus::Ok => {
                    let (Some(a), Some(g), Some(m)) = (r.ate, r.ate_g, r.mape) else {
                        return bad(format!("{} {} task {:?}: missing values", r.scenario, r.method, r.test_task));
                    };
                    if m != (g - a).abs() / g.abs() {
                        return bad(format!("{} {}: MAPE {m} inconsistent", r.scenario, r.method));
                    }
                    if r.test_task.is_none() || r.seed.is_none() {
                        return bad("task row without test task or seed".into());
                    }
                }
                RowStatus::MapeUndefined => {
                    if r.mape.is_some() || r.abs_error.is_none() {
                        return bad("zero ground truth row must carry abs_error only".into());
                    }
                }
                RowStatus::Failed => {}
            }
        }
        let rebuilt = self.with_aggregates();
        let mine: Vec<&ReportRow> = self.aggregate_rows().collect();
        let want: Vec<&ReportRow> = rebuilt.aggregate_rows().collect();
        if mine.len() != want.len() {
            return bad(format!("{} aggregate rows, expected {}", mine.len(), want.len()));
        }
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => (x - y).abs() <= 1e-12 * x.abs().max(1.0),
            (None, None) => true,
            _ => false,
        };
        for (a, b) in mine.iter().zip(&want) {
            if a.scenario != b.scenario || a.method != b.method || a.members != b.members {
                return bad(format!("aggregate {} {} does not match its members", a.scenario, a.method));
            }
            if !close(a.mape, b.mape) || !close(a.ate, b.ate) || !close(a.ate_g, b.ate_g) {
                return bad(format!("aggregate {} {} is not the mean of its members", a.scenario, a.method));
            }
        }
        Ok(())
    }
}

/// Per-iteration inner objectives of a meta or pooled run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub scenario: String,
    pub method: Method,
    pub seed: u64,
    pub test_task: usize,
    pub iteration: usize,
    pub task: usize,
    pub train_objective: f64,
    pub validation_objective: f64,
}

/// Every fine-tuned (checkpoint, hypers) candidate, so selection rules other
/// than the per-task argmin can be applied afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub scenario: String,
    pub method: Method,
    pub seed: u64,
    pub test_task: usize,
    pub checkpoint: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub validation_objective: f64,
    pub ate: Option<f64>,
    pub ate_g: f64,
    pub selected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptShiftRow {
    pub scenario: String,
    pub method: Method,
    pub dgp: usize,
    pub count: usize,
    pub mean_ate: f64,
    pub var_ate: f64,
    /// Mean MAPE over all of the method's task rows in the scenario.
    pub mape: f64,
}

/// Mean and population variance of ATE per (scenario, method, process).
/// `task_map[i]` is the process of test task `i`; every process in the map
/// must have at least one row.
pub fn concept_shift_summary(report: &EvalReport, task_map: &[usize]) -> Result<Vec<ConceptShiftRow>> {
    let dgp_count = task_map.iter().max().map_or(0, |m| m + 1);
    let mut groups: BTreeMap<(String, Method), Vec<Vec<f64>>> = BTreeMap::new();
    let mut mapes: BTreeMap<(String, Method), Vec<f64>> = BTreeMap::new();
    for r in report.task_rows().filter(|r| r.status == RowStatus::Ok) {
        let test = r.test_task.ok_or_else(|| Error::InvalidArgument("task row without test task".into()))?;
        let &d = task_map
            .get(test)
            .ok_or_else(|| Error::InvalidArgument(format!("test task {test} has no process id")))?;
        if r.dgp_id.is_some_and(|id| id != d) {
            return Err(Error::InvalidArgument(format!("row tagged process {:?}, map says {d}", r.dgp_id)));
        }
        let key = (r.scenario.clone(), r.method);
        groups.entry(key.clone()).or_insert_with(|| vec![Vec::new(); dgp_count])[d]
            .push(r.ate.expect("ok row"));
        mapes.entry(key).or_default().push(r.mape.expect("ok row"));
    }
    let mut out = Vec::new();
    for ((scenario, method), per) in groups {
        let overall = mean(&mapes[&(scenario.clone(), method)]);
        for (dgp, ates) in per.iter().enumerate() {
            if ates.is_empty() {
                return Err(Error::Empty(format!("{scenario} {method}: no rows for process {dgp}")));
            }
            out.push(ConceptShiftRow {
                scenario: scenario.clone(),
                method,
                dgp,
                count: ates.len(),
                mean_ate: mean(ates),
                var_ate: population_variance(ates),
                mape: overall,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Report files

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }

    pub fn from_path(path: &Path) -> Result<Format> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(Format::Csv),
            Some("json") => Ok(Format::Json),
            _ => Err(Error::Config(format!("{}: expected a .csv or .json report", path.display()))),
        }
    }
}

const REPORT_COLUMNS: [&str; 19] = [
    "kind",
    "scenario",
    "omega",
    "k",
    "n_omega",
    "method",
    "seed",
    "test_task",
    "dgp_id",
    "checkpoint",
    "learning_rate",
    "dropout",
    "ate",
    "ate_g",
    "mape",
    "abs_error",
    "members",
    "status",
    "message",
];

pub fn write_csv_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    crate::write_atomic(path, &bytes)
}

pub fn emit_report(report: &EvalReport, format: Format, path: &Path) -> Result<()> {
    match format {
        Format::Csv => write_csv_rows(path, &REPORT_COLUMNS, &report.rows),
        Format::Json => {
            let mut text = serde_json::to_string_pretty(report)?;
            text.push('\n');
            crate::write_atomic(path, text.as_bytes())
        }
    }
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    match Format::from_path(path)? {
        Format::Csv => {
            let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
            let rows = r
                .deserialize()
                .collect::<std::result::Result<Vec<ReportRow>, _>>()
                .map_err(|e| Error::csv(path, e))?;
            Ok(EvalReport { rows })
        }
        Format::Json => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

/// Concatenates task rows from several reports and recomputes aggregates.
pub fn merge_reports(reports: &[EvalReport]) -> EvalReport {
    EvalReport {
        rows: reports.iter().flat_map(|r| r.task_rows().cloned()).collect(),
    }
    .with_aggregates()
}

pub const CURVE_COLUMNS: [&str; 8] = [
    "scenario",
    "method",
    "seed",
    "test_task",
    "iteration",
    "task",
    "train_objective",
    "validation_objective",
];

pub const CANDIDATE_COLUMNS: [&str; 11] = [
    "scenario",
    "method",
    "seed",
    "test_task",
    "checkpoint",
    "learning_rate",
    "dropout",
    "validation_objective",
    "ate",
    "ate_g",
    "selected",
];

pub const CONCEPT_COLUMNS: [&str; 7] = ["scenario", "method", "dgp", "count", "mean_ate", "var_ate", "mape"];

// ---------------------------------------------------------------------------
// Scenarios

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Ad,
    Ihdp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    #[serde(default = "empty_object")]
    pub params: Value,
}

fn empty_object() -> Value {
    Value::Object(Map::new())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptShift {
    pub dgp_count: usize,
    /// Process id of each chunk.
    pub chunk_map: Vec<usize>,
    /// Outcome overrides, one per process. Defaults to `theta` 1, 10, 20 for
    /// the ad process.
    #[serde(default)]
    pub variants: Vec<Map<String, Value>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaGrid {
    pub eps_phi: Vec<f64>,
    pub eps_h: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperGrid {
    pub learning_rate: Vec<f64>,
    pub dropout: Vec<f64>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid {
            learning_rate: vec![1e-3, 1e-2],
            dropout: vec![0.0, 0.2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTune {
    pub epochs: usize,
    pub grid: HyperGrid,
}

impl Default for FineTune {
    fn default() -> Self {
        FineTune {
            epochs: meta::FINE_TUNE_EPOCHS,
            grid: HyperGrid::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub dataset: DatasetSpec,
    /// Rows per chunk; the population holds `omega × task_size` rows.
    #[serde(default = "default_task_size")]
    pub task_size: usize,
    pub omega: usize,
    pub k: usize,
    pub scheme: ChunkScheme,
    #[serde(default)]
    pub concept_shift: Option<ConceptShift>,
    #[serde(default)]
    pub meta: MetaConfig,
    /// Optional ε search; the setting with the least mean inner validation
    /// objective is kept.
    #[serde(default)]
    pub meta_grid: Option<MetaGrid>,
    #[serde(default)]
    pub finetune: FineTune,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Runs meta methods once per `(ε_h, ε_Φ)` preset.
    #[serde(default)]
    pub eps_presets: bool,
    /// Restricts the leave-one-out sweep; all tasks when absent.
    #[serde(default)]
    pub test_tasks: Option<Vec<usize>>,
}

fn default_task_size() -> usize {
    500
}

impl Scenario {
    pub fn from_path(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read scenario {}: {e}", path.display())))?;
        let sc: Scenario =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("scenario name '{}' must be nonempty without slashes", self.name));
        }
        if self.omega < 2 {
            return bad(format!("omega = {} below 2", self.omega));
        }
        if self.k < 1 || self.k >= self.omega {
            return bad(format!("k = {} outside [1, {}]", self.k, self.omega - 1));
        }
        if self.methods.is_empty() || self.seeds.is_empty() {
            return bad("methods and seeds must be nonempty".into());
        }
        if self.finetune.epochs < 1 || self.finetune.grid.learning_rate.is_empty() || self.finetune.grid.dropout.is_empty() {
            return bad("fine-tuning needs epochs >= 1 and a nonempty grid".into());
        }
        self.meta.validate()?;
        if let Some(g) = &self.meta_grid {
            if g.eps_phi.is_empty() || g.eps_h.is_empty() {
                return bad("meta grid must be nonempty".into());
            }
            for &e in g.eps_phi.iter().chain(&g.eps_h) {
                if !(e > 0.0 && e <= 1.0) {
                    return bad(format!("meta grid rate {e} outside (0, 1]"));
                }
            }
        }
        for h in Hypers::grid(&self.finetune.grid.learning_rate, &self.finetune.grid.dropout) {
            h.apply(&self.meta.inner).validate()?;
        }
        if let Some(cs) = &self.concept_shift {
            if cs.dgp_count < 2 {
                return bad("concept shift needs at least 2 processes".into());
            }
            if cs.chunk_map.len() != self.omega || cs.chunk_map.iter().any(|&d| d >= cs.dgp_count) {
                return bad(format!(
                    "chunk_map must name a process below {} for each of {} chunks",
                    cs.dgp_count, self.omega
                ));
            }
            if !cs.variants.is_empty() && cs.variants.len() != cs.dgp_count {
                return bad(format!("{} variants for {} processes", cs.variants.len(), cs.dgp_count));
            }
            if cs.variants.is_empty() && (self.dataset.kind != DatasetKind::Ad || cs.dgp_count > 3) {
                return bad("concept-shift variants must be given explicitly".into());
            }
        }
        if let Some(tt) = &self.test_tasks {
            if tt.is_empty() || tt.iter().any(|&t| t >= self.omega) {
                return bad(format!("test_tasks must be nonempty ids below {}", self.omega));
            }
        }
        self.base_dgp().map(|_| ())
    }

    pub fn population_size(&self) -> usize {
        self.omega * self.task_size
    }

    pub fn base_dgp(&self) -> Result<Dgp> {
        let cfg = |e: serde_json::Error| Error::Config(format!("dataset params: {e}"));
        let params = self.dataset.params.as_object().cloned().unwrap_or_default();
        if params.contains_key("n") {
            return Err(Error::Config("population size comes from omega × task_size; drop params.n".into()));
        }
        let dgp = match self.dataset.kind {
            DatasetKind::Ad => {
                let mut p: AdDgpParams = serde_json::from_value(Value::Object(params)).map_err(cfg)?;
                p.n = self.population_size();
                Dgp::Ad(p)
            }
            DatasetKind::Ihdp => {
                let mut p: IhdpDgpParams = serde_json::from_value(Value::Object(params)).map_err(cfg)?;
                if let FeatureSource::Synthetic { n } = &mut p.source {
                    *n = self.population_size();
                } else {
                    warn!("covariates read from file; task_size is ignored");
                }
                Dgp::Ihdp(p)
            }
        };
        dgp.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(dgp)
    }

    pub fn family(&self) -> Result<Vec<Dgp>> {
        let base = self.base_dgp()?;
        match &self.concept_shift {
            None => Ok(vec![base]),
            Some(cs) => {
                let variants = if cs.variants.is_empty() {
                    [1.0, 10.0, 20.0][..cs.dgp_count]
                        .iter()
                        .map(|&th| {
                            let mut m = Map::new();
                            m.insert("theta".into(), Value::from(th));
                            m
                        })
                        .collect()
                } else {
                    cs.variants.clone()
                };
                make_concept_shift_family(&base, &variants).map_err(|e| Error::Config(e.to_string()))
            }
        }
    }

    pub fn test_task_ids(&self) -> Vec<usize> {
        self.test_tasks.clone().unwrap_or_else(|| (0..self.omega).collect())
    }
}

/// Population and tasks for one seed. Streams: population `1`, tasks `2`,
/// network inits `3`, method jobs `4`, all substreams of `(seed, 0)`.
pub struct SeedContext {
    pub seed: u64,
    pub root: RngStream,
    pub taskset: TaskSet,
}

pub fn seed_context(sc: &Scenario, seed: u64) -> Result<SeedContext> {
    let root = RngStream::new(seed, 0);
    let family = sc.family()?;
    let pop = Population::generate(&family, &mut root.substream(1))?;
    let map = sc.concept_shift.as_ref().map(|c| c.chunk_map.as_slice());
    let taskset = build_taskset(&pop, sc.omega, sc.k, &sc.scheme, map, &root.substream(2))
        .map_err(|e| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        })?;
    Ok(SeedContext { seed, root, taskset })
}

impl SeedContext {
    /// Initial network for `test_id`; shared by the meta and random variants.
    pub fn init(&self, kind: NetKind, config: &CIConfig, test_id: usize) -> Result<NetParams> {
        let n_features = self.taskset.tasks[0].dataset.n_features();
        let mut rng = self.root.substream(3).substream(test_id as u64).substream(kind as u64);
        match kind {
            NetKind::Ci => build_ci(config, n_features, &mut rng),
            NetKind::Nn4 => build_nn4(config, n_features, &mut rng),
        }
    }

    pub fn job_stream(&self, test_id: usize, method: Method, preset: usize) -> RngStream {
        self.root
            .substream(4)
            .substream(test_id as u64)
            .substream(method.index() * 16 + preset as u64)
    }
}

/// Meta-training for one held-out task, as run by `eval` and `train`.
pub struct MetaRun {
    pub config: MetaConfig,
    pub state: meta::MetaState,
}

#[allow(clippy::too_many_arguments)]
pub fn run_meta(
    ctx: &SeedContext,
    sc: &Scenario,
    kind: NetKind,
    meta_config: &MetaConfig,
    grid: Option<&MetaGrid>,
    train: &[Task],
    test_id: usize,
    rng: &RngStream,
) -> Result<MetaRun> {
    let init = ctx.init(kind, &sc.meta.inner, test_id)?;
    let settings: Vec<MetaConfig> = match grid {
        None => vec![meta_config.clone()],
        Some(g) => g
            .eps_phi
            .iter()
            .flat_map(|&eps_phi| {
                g.eps_h.iter().map(move |&eps_h| MetaConfig {
                    eps_phi,
                    eps_h,
                    ..meta_config.clone()
                })
            })
            .collect(),
    };
    let mut best: Option<(f64, MetaRun)> = None;
    for (gi, config) in settings.into_iter().enumerate() {
        let state = meta::meta_train(train, &config, &init, &rng.substream(gi as u64))?;
        let score = meta::mean_inner_validation(&state);
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, MetaRun { config, state }));
        }
    }
    Ok(best.expect("nonempty meta grid").1)
}

pub fn run_id(scenario: &str, seed: u64, test_id: usize, method: Method) -> String {
    format!("{}-s{seed}-t{test_id}-{method}", scenario.replace('/', "-"))
}

struct Job {
    scenario: String,
    meta: MetaConfig,
    grid: Option<MetaGrid>,
    preset: usize,
    test_id: usize,
    method: Method,
}

struct JobOutput {
    row: ReportRow,
    curve: Vec<CurvePoint>,
    candidates: Vec<CandidateRow>,
}

pub struct ScenarioOutput {
    pub report: EvalReport,
    pub curve: Vec<CurvePoint>,
    pub candidates: Vec<CandidateRow>,
    /// Present for concept-shift scenarios.
    pub concept_shift: Option<Vec<ConceptShiftRow>>,
}

/// Leave-one-out sweep over every seed, test task and method. Jobs run on the
/// current rayon pool; output order does not depend on scheduling. When
/// `checkpoint_dir` is given, meta runs write their checkpoints beneath it.
pub fn run_scenario(sc: &Scenario, checkpoint_dir: Option<&Path>) -> Result<ScenarioOutput> {
    sc.validate()?;
    let mut jobs = Vec::new();
    for &test_id in &sc.test_task_ids() {
        for &method in &sc.methods {
            if method.is_meta() && sc.eps_presets {
                for (pi, (name, eps_h, eps_phi)) in EPS_PRESETS.iter().enumerate() {
                    jobs.push(Job {
                        scenario: format!("{}/{name}", sc.name),
                        meta: MetaConfig {
                            eps_h: *eps_h,
                            eps_phi: *eps_phi,
                            ..sc.meta.clone()
                        },
                        grid: None,
                        preset: pi + 1,
                        test_id,
                        method,
                    });
                }
            } else {
                jobs.push(Job {
                    scenario: sc.name.clone(),
                    meta: sc.meta.clone(),
                    grid: sc.meta_grid.clone(),
                    preset: 0,
                    test_id,
                    method,
                });
            }
        }
    }
    let mut outputs = Vec::new();
    for &seed in &sc.seeds {
        let ctx = seed_context(sc, seed)?;
        info!("{}: seed {seed}, {} jobs", sc.name, jobs.len());
        let done: Vec<JobOutput> = jobs.par_iter().map(|job| run_job(&ctx, sc, job, checkpoint_dir)).collect();
        outputs.extend(done);
    }
    let mut rows = Vec::new();
    let mut curve = Vec::new();
    let mut candidates = Vec::new();
    for o in outputs {
        rows.push(o.row);
        curve.extend(o.curve);
        candidates.extend(o.candidates);
    }
    let report = EvalReport { rows }.with_aggregates();
    log_shared_selection(&candidates);
    let concept_shift = match &sc.concept_shift {
        Some(cs) => Some(concept_shift_summary(&report, &cs.chunk_map)?),
        None => None,
    };
    Ok(ScenarioOutput {
        report,
        curve,
        candidates,
        concept_shift,
    })
}

/// The alternative reading of checkpoint selection: one (checkpoint, hypers)
/// shared by all test tasks of a seed, chosen by mean validation objective.
fn log_shared_selection(candidates: &[CandidateRow]) {
    type Key = (String, Method, u64);
    let mut by_run: BTreeMap<Key, BTreeMap<(usize, u64, u64), Vec<&CandidateRow>>> = BTreeMap::new();
    for c in candidates {
        by_run
            .entry((c.scenario.clone(), c.method, c.seed))
            .or_default()
            .entry((c.checkpoint, c.learning_rate.to_bits(), c.dropout.to_bits()))
            .or_default()
            .push(c);
    }
    for ((scenario, method, seed), pairs) in by_run {
        let best = pairs
            .iter()
            .map(|(k, v)| (mean(&v.iter().map(|c| c.validation_objective).collect::<Vec<_>>()), k, v))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((_, key, members)) = best {
            let m: Vec<f64> = members
                .iter()
                .filter_map(|c| c.ate.and_then(|a| mape(a, c.ate_g).ok()))
                .collect();
            if !m.is_empty() {
                info!(
                    "{scenario} {method} seed {seed}: shared selection (checkpoint {}) mean MAPE {}",
                    key.0,
                    mean(&m)
                );
            }
        }
    }
}

fn run_job(ctx: &SeedContext, sc: &Scenario, job: &Job, checkpoint_dir: Option<&Path>) -> JobOutput {
    let test_ds_rows = || {
        let (_, test) = leave_one_out(&ctx.taskset, job.test_id)?;
        Ok::<_, Error>(test)
    };
    let mut row = ReportRow {
        kind: RowKind::Task,
        scenario: job.scenario.clone(),
        omega: sc.omega,
        k: sc.k,
        n_omega: ctx.taskset.tasks[job.test_id].len(),
        method: job.method,
        seed: Some(ctx.seed),
        test_task: Some(job.test_id),
        dgp_id: Some(ctx.taskset.tasks[job.test_id].dgp_id),
        checkpoint: None,
        learning_rate: None,
        dropout: None,
        ate: None,
        ate_g: None,
        mape: None,
        abs_error: None,
        members: 1,
        status: RowStatus::Failed,
        message: String::new(),
    };
    let mut curve = Vec::new();
    let mut candidates = Vec::new();
    let result = (|| -> Result<()> {
        let test = test_ds_rows()?;
        let ate_g = ground_truth_ate(&test.dataset.subset(&test.splits.test))?;
        row.ate_g = Some(ate_g);
        let estimate = match job.method {
            Method::Oracle => oracle_ate(&test.dataset, &test.splits.test)?,
            method => {
                let sel = fit_method(ctx, sc, job, method, checkpoint_dir, &mut curve, &mut candidates, ate_g)?;
                row.checkpoint = Some(sel.checkpoint);
                row.learning_rate = Some(sel.hypers.learning_rate);
                row.dropout = Some(sel.hypers.dropout);
                predicted_ate(&sel.params, &test.dataset, &test.splits.test)?
            }
        };
        row.ate = Some(estimate);
        match mape(estimate, ate_g) {
            Ok(m) => {
                row.mape = Some(m);
                row.status = RowStatus::Ok;
            }
            Err(e) => {
                row.abs_error = Some((ate_g - estimate).abs());
                row.status = RowStatus::MapeUndefined;
                row.message = e.to_string();
            }
        }
        Ok(())
    })();
    if let Err(e) = result {
        warn!("{} {} seed {} task {}: {e}", job.scenario, job.method, ctx.seed, job.test_id);
        row.status = RowStatus::Failed;
        row.message = e.to_string();
        row.ate = None;
        row.mape = None;
    }
    JobOutput { row, curve, candidates }
}

#[allow(clippy::too_many_arguments)]
fn fit_method(
    ctx: &SeedContext,
    sc: &Scenario,
    job: &Job,
    method: Method,
    checkpoint_dir: Option<&Path>,
    curve: &mut Vec<CurvePoint>,
    candidates: &mut Vec<CandidateRow>,
    ate_g: f64,
) -> Result<meta::Selection> {
    let kind = method.net().expect("network method");
    let (train, test) = leave_one_out(&ctx.taskset, job.test_id)?;
    let rng = ctx.job_stream(job.test_id, method, job.preset);
    let mut push_curve = |i: usize, task: usize, tr: f64, va: f64| {
        curve.push(CurvePoint {
            scenario: job.scenario.clone(),
            method,
            seed: ctx.seed,
            test_task: job.test_id,
            iteration: i,
            task,
            train_objective: tr,
            validation_objective: va,
        })
    };
    let checkpoints: Vec<(usize, NetParams)> = match method {
        Method::MetaCI | Method::MetaNN4 => {
            let run = run_meta(ctx, sc, kind, &job.meta, job.grid.as_ref(), &train, job.test_id, &rng.substream(0))?;
            for (i, l) in run.state.log.iter().enumerate() {
                push_curve(i + 1, l.task, l.train_objective, l.validation_objective);
            }
            if let Some(dir) = checkpoint_dir {
                let n_features = test.dataset.n_features();
                let hash = run.config.inner.layout_hash(kind, n_features);
                let id = run_id(&job.scenario, ctx.seed, job.test_id, method);
                let seed = SeedRecord {
                    seed: ctx.seed,
                    stream: rng.stream_id(),
                };
                meta::save_run(dir, &id, &run.state, &run.config, &hash, seed)?;
            }
            run.state.checkpoints
        }
        Method::RandomCI | Method::RandomNN4 => vec![(0, ctx.init(kind, &sc.meta.inner, job.test_id)?)],
        Method::CiOmega => {
            // R rounds of L epochs, cycling through the training tasks
            let mut params = ctx.init(kind, &sc.meta.inner, job.test_id)?;
            let mut pooled = rng.substream(2);
            for r in 0..job.meta.iterations {
                let task = &train[r % train.len()];
                let out = cinet::update_operator(&params, task, &job.meta.inner, &mut pooled).map_err(|e| {
                    Error::MetaIteration {
                        iteration: r + 1,
                        task: task.id,
                        source: Box::new(e),
                    }
                })?;
                push_curve(r + 1, task.id, out.train_objective, out.validation_objective);
                params = out.params;
            }
            vec![(job.meta.iterations, params)]
        }
        Method::Oracle => unreachable!("oracle has no network"),
    };
    let base = CIConfig {
        epochs: sc.finetune.epochs,
        ..job.meta.inner.clone()
    };
    let grid = Hypers::grid(&sc.finetune.grid.learning_rate, &sc.finetune.grid.dropout);
    let search = meta::select_best_all(&checkpoints, &test, &grid, &base, &rng.substream(1))?;
    for c in &search.candidates {
        candidates.push(CandidateRow {
            scenario: job.scenario.clone(),
            method,
            seed: ctx.seed,
            test_task: job.test_id,
            checkpoint: c.checkpoint,
            learning_rate: c.hypers.learning_rate,
            dropout: c.hypers.dropout,
            validation_objective: c.validation_objective,
            ate: predicted_ate(&c.params, &test.dataset, &test.splits.test).ok(),
            ate_g,
            selected: c.checkpoint == search.best.checkpoint && c.hypers == search.best.hypers,
        });
    }
    Ok(search.best)
}

/// Output file names used by `eval`.
pub fn output_paths(out: &Path, format: Format) -> (PathBuf, PathBuf, PathBuf, PathBuf, PathBuf) {
    (
        out.join(format!("report.{}", format.extension())),
        out.join("report_curve.csv"),
        out.join("report_candidates.csv"),
        out.join("concept_shift.csv"),
        out.join("checkpoints"),
    )
}

/// Runs a scenario and writes every output file under `out`.
pub fn eval_to_dir(sc: &Scenario, out: &Path, format: Format) -> Result<ScenarioOutput> {
    let (report_path, curve_path, cand_path, concept_path, ck_dir) = output_paths(out, format);
    let result = run_scenario(sc, Some(&ck_dir))?;
    emit_report(&result.report, format, &report_path)?;
    write_csv_rows(&curve_path, &CURVE_COLUMNS, &result.curve)?;
    write_csv_rows(&cand_path, &CANDIDATE_COLUMNS, &result.candidates)?;
    if let Some(cs) = &result.concept_shift {
        write_csv_rows(&concept_path, &CONCEPT_COLUMNS, cs)?;
    }
    Ok(result)
}
