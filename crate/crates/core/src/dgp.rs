//! Data-generating processes with known potential-outcome means.
//!
//! Two families are provided:
//!
//! * the advertisement process: `p` i.i.d. standard-normal features, the
//!   first five of which confound both treatment and outcome through a
//!   registry of ten centered basis functions;
//! * an IHDP-style process: eight infant/mother covariates (from a CSV file
//!   or a synthetic stand-in), an additive outcome surface, logistic
//!   treatment assignment and heteroskedastic noise.
//!
//! Every generator draws covariates first (features, then treatment) and
//! outcomes last, so processes that differ only in outcome parameters see
//! identical `X` and `t` from the same stream state.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::mathcore::{mean, sigmoid, Matrix, RngStream};

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dgp_id: String,
    pub seed: u64,
    pub stream: u64,
    pub params: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub t: Vec<u8>,
    pub y: Vec<f64>,
    pub mu0: Option<Vec<f64>>,
    pub mu1: Option<Vec<f64>>,
    pub meta: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.rows();
        let lens_ok = self.t.len() == n
            && self.y.len() == n
            && self.mu0.as_ref().is_none_or(|v| v.len() == n)
            && self.mu1.as_ref().is_none_or(|v| v.len() == n);
        if !lens_ok {
            return Err(Error::Shape("dataset columns differ in length".into()));
        }
        if self.mu0.is_some() != self.mu1.is_some() {
            return Err(Error::Shape("mu0 and mu1 must be present together".into()));
        }
        if let Some(i) = self.t.iter().position(|&t| t > 1) {
            return Err(Error::InvalidArgument(format!("treatment at row {i} is not binary")));
        }
        Ok(())
    }

    /// Rows `idx`, in order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let pick = |v: &Vec<f64>| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Dataset {
            x: self.x.select_rows(idx),
            t: idx.iter().map(|&i| self.t[i]).collect(),
            y: pick(&self.y),
            mu0: self.mu0.as_ref().map(pick),
            mu1: self.mu1.as_ref().map(pick),
            meta: self.meta.clone(),
        }
    }

    pub fn treated_count(&self) -> usize {
        self.t.iter().filter(|&&t| t == 1).count()
    }

    /// Writes `x1..xp, t, y` and, when `with_truth` is set, `mu0, mu1`.
    pub fn write_csv(&self, path: &Path, with_truth: bool) -> Result<()> {
        let (mu0, mu1) = match (&self.mu0, &self.mu1) {
            (Some(a), Some(b)) => (Some(a), Some(b)),
            _ if with_truth => {
                return Err(Error::InvalidArgument(
                    "dataset has no ground-truth columns to export".into(),
                ))
            }
            _ => (None, None),
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut header: Vec<String> = (1..=self.n_features()).map(|j| format!("x{j}")).collect();
        header.extend(["t", "y"].map(String::from));
        if with_truth {
            header.extend(["mu0", "mu1"].map(String::from));
        }
        w.write_record(&header).map_err(|e| Error::csv(path, e))?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(f64::to_string).collect();
            rec.push(self.t[i].to_string());
            rec.push(self.y[i].to_string());
            if let (true, Some(a), Some(b)) = (with_truth, mu0, mu1) {
                rec.push(a[i].to_string());
                rec.push(b[i].to_string());
            }
            w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a file produced by [`Dataset::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Dataset> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let headers = r.headers().map_err(|e| Error::csv(path, e))?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let mut missing = Vec::new();
        let (t_col, y_col) = (col("t"), col("y"));
        if t_col.is_none() {
            missing.push("t".to_string());
        }
        if y_col.is_none() {
            missing.push("y".to_string());
        }
        let x_cols: Vec<usize> = (1..)
            .map_while(|j| col(&format!("x{j}")))
            .collect();
        if x_cols.is_empty() {
            missing.push("x1".to_string());
        }
        if !missing.is_empty() {
            return Err(Error::MissingColumns(missing));
        }
        let (t_col, y_col) = (t_col.unwrap(), y_col.unwrap());
        let truth = col("mu0").zip(col("mu1"));
        let mut x = Vec::new();
        let (mut t, mut y, mut mu0, mut mu1) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            let num = |c: usize| -> Result<f64> {
                rec[c].trim().parse::<f64>().map_err(|_| {
                    Error::InvalidArgument(format!(
                        "{}: row {}: '{}' is not a number",
                        path.display(),
                        line + 1,
                        &rec[c]
                    ))
                })
            };
            for &c in &x_cols {
                x.push(num(c)?);
            }
            let tv = num(t_col)?;
            if tv != 0.0 && tv != 1.0 {
                return Err(Error::InvalidArgument(format!("row {}: treatment {tv}", line + 1)));
            }
            t.push(tv as u8);
            y.push(num(y_col)?);
            if let Some((a, b)) = truth {
                mu0.push(num(a)?);
                mu1.push(num(b)?);
            }
        }
        let n = t.len();
        let ds = Dataset {
            x: Matrix::from_vec(n, x_cols.len(), x)?,
            t,
            y,
            mu0: truth.map(|_| mu0),
            mu1: truth.map(|_| mu1),
            meta: Provenance {
                dgp_id: "csv".into(),
                seed: 0,
                stream: 0,
                params: json!({ "path": path.display().to_string() }),
            },
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Mean of `mu1 − mu0` over all rows.
pub fn ground_truth_ate(ds: &Dataset) -> Result<f64> {
    match (&ds.mu0, &ds.mu1) {
        (Some(mu0), Some(mu1)) => {
            if mu0.is_empty() {
                return Err(Error::Empty("dataset has no rows".into()));
            }
            let ite: Vec<f64> = mu1.iter().zip(mu0).map(|(a, b)| a - b).collect();
            Ok(mean(&ite))
        }
        _ => Err(Error::MissingColumns(vec!["mu0".into(), "mu1".into()])),
    }
}

// ---------------------------------------------------------------------------
// Basis registry

/// One centered scalar basis function: `raw(x) − center`.
#[derive(Clone, Copy)]
pub struct BasisFn {
    pub name: &'static str,
    pub formula: &'static str,
    raw: fn(f64) -> f64,
    /// `E[raw(q)]` for `q ~ N(0, 1)`.
    pub center: f64,
}

impl BasisFn {
    pub const fn new(name: &'static str, formula: &'static str, raw: fn(f64) -> f64, center: f64) -> Self {
        BasisFn {
            name,
            formula,
            raw,
            center,
        }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        (self.raw)(x) - self.center
    }
}

impl fmt::Debug for BasisFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {}", self.name, self.formula)
    }
}

/// Ten basis functions. `f1..f5` drive treatment assignment and `f6..f10`
/// the outcome mean, each applied to the matching confounder `q1..q5`.
#[derive(Clone, Debug)]
pub struct BasisRegistry {
    fns: Vec<BasisFn>,
}

impl Default for BasisRegistry {
    fn default() -> Self {
        use std::f64::consts::{E, FRAC_2_PI};
        let fns = vec![
            BasisFn::new("f1", "-2 sin(2x)", |x| -2.0 * (2.0 * x).sin(), 0.0),
            BasisFn::new("f2", "x^2 - 1", |x| x * x, 1.0),
            BasisFn::new("f3", "x", |x| x, 0.0),
            // negated exponential: keeps the treated share near one half
            BasisFn::new("f4", "e^(1/2) - e^(-x)", |x| -(-x).exp(), -E.sqrt()),
            BasisFn::new("f5", "(x - 0.5)^2 - 1.25", |x| (x - 0.5) * (x - 0.5), 1.25),
            BasisFn::new("f6", "cos(x) - e^(-1/2)", f64::cos, (-0.5f64).exp()),
            BasisFn::new("f7", "tanh(2x)", |x| (2.0 * x).tanh(), 0.0),
            BasisFn::new("f8", "|x| - sqrt(2/pi)", f64::abs, FRAC_2_PI.sqrt()),
            BasisFn::new("f9", "e^(x/2) - e^(1/8)", |x| (0.5 * x).exp(), 0.125f64.exp()),
            BasisFn::new("f10", "1/(1 + e^(-3x)) - 1/2", |x| sigmoid(3.0 * x), 0.5),
        ];
        BasisRegistry { fns }
    }
}

impl BasisRegistry {
    pub fn new(fns: Vec<BasisFn>) -> Result<Self> {
        if fns.len() != 10 {
            return Err(Error::InvalidArgument(format!(
                "a basis registry needs exactly 10 functions, got {}",
                fns.len()
            )));
        }
        for f in &fns {
            for i in 0..=200 {
                let x = -10.0 + 0.1 * i as f64;
                if !f.eval(x).is_finite() {
                    return Err(Error::NonFinite(format!("{} at x = {x}", f.name)));
                }
            }
        }
        Ok(BasisRegistry { fns })
    }

    /// `j` is zero-based: `get(0)` is `f1`.
    pub fn get(&self, j: usize) -> &BasisFn {
        &self.fns[j]
    }

    pub fn len(&self) -> usize {
        self.fns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fns.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &BasisFn> {
        self.fns.iter()
    }

    pub fn treatment_score(&self, q: &[f64]) -> f64 {
        (0..5).map(|j| self.fns[j].eval(q[j])).sum()
    }

    pub fn outcome_base(&self, q: &[f64]) -> f64 {
        (0..5).map(|j| self.fns[j + 5].eval(q[j])).sum()
    }
}

// ---------------------------------------------------------------------------
// Advertisement process

/// Outcome means are rounded to this grid so that `(b + η) − b == η`
/// exactly for every dyadic `η` of moderate size.
const OUTCOME_GRID: f64 = (1u64 << 32) as f64;

fn snap(v: f64) -> f64 {
    (v * OUTCOME_GRID).round() / OUTCOME_GRID
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdDgpParams {
    #[serde(default = "AdDgpParams::default_n")]
    pub n: usize,
    #[serde(default = "AdDgpParams::default_p")]
    pub p: usize,
    #[serde(default = "one")]
    pub eta: f64,
    #[serde(default = "one")]
    pub theta: f64,
    #[serde(skip)]
    pub basis: BasisRegistry,
}

fn one() -> f64 {
    1.0
}

impl Default for AdDgpParams {
    fn default() -> Self {
        AdDgpParams {
            n: 2000,
            p: 10,
            eta: 1.0,
            theta: 1.0,
            basis: BasisRegistry::default(),
        }
    }
}

impl AdDgpParams {
    fn default_n() -> usize {
        2000
    }

    fn default_p() -> usize {
        10
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 5 {
            return Err(Error::InvalidArgument(format!(
                "ad process needs at least 5 features (q1..q5 confound), got {}",
                self.p
            )));
        }
        if self.n < 20 {
            return Err(Error::InvalidArgument(format!("sample count {} below 20", self.n)));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::InvalidArgument(format!("theta {} must be positive", self.theta)));
        }
        if !self.eta.is_finite() {
            return Err(Error::InvalidArgument("eta must be finite".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// IHDP-style process

/// Column names expected in an IHDP covariate CSV, in model order.
pub const IHDP_COLUMNS: [&str; 8] = [
    "momage",
    "bilirubin",
    "birthplace",
    "bw",
    "b_head",
    "preterm",
    "birth_o",
    "nnhealth",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Stand-in marginals: `momage` uniform integer in 15..=44, `bilirubin`
    /// lognormal(0, 0.5), `birthplace` categorical {0,1,2,3} with weights
    /// (0.4, 0.3, 0.2, 0.1), the remaining five standard normal.
    Synthetic { n: usize },
    Csv { path: PathBuf },
}

/// Additive outcome surface over standardized features `z`:
/// `mu0 = intercept + Σ linear_j z_j + quadratic_j (z_j² − 1)` and
/// `mu1 = mu0 + tau0 + Σ tau_het_j (z_j − z̄_j)`, where `z̄` is the
/// population mean, so the population ATE is `tau0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IhdpSurface {
    pub intercept: f64,
    pub linear: [f64; 8],
    pub quadratic: [f64; 8],
    pub tau0: f64,
    pub tau_het: [f64; 8],
}

impl Default for IhdpSurface {
    fn default() -> Self {
        IhdpSurface {
            intercept: 0.5,
            linear: [0.8, -0.6, 0.5, 0.4, -0.3, 0.2, 0.0, 0.3],
            quadratic: [0.2, 0.3, 0.0, 0.1, 0.0, 0.0, 0.1, 0.0],
            tau0: 1.0,
            tau_het: [0.3, -0.2, 0.1, 0.0, 0.2, 0.0, 0.0, 0.0],
        }
    }
}

/// Noise sd `scale · (0.5 + 0.5·sigmoid(Σ weights_j z_j))`. `scale = 0` is
/// the noiseless limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IhdpNoise {
    pub scale: f64,
    pub weights: [f64; 8],
}

impl Default for IhdpNoise {
    fn default() -> Self {
        IhdpNoise {
            scale: 1.0,
            weights: [0.5, 0.5, 0.0, -0.5, 0.0, 0.3, 0.0, 0.0],
        }
    }
}

/// `P(t = 1 | z) = sigmoid(intercept + Σ weights_j z_j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IhdpAssignment {
    pub intercept: f64,
    pub weights: [f64; 8],
}

impl Default for IhdpAssignment {
    fn default() -> Self {
        IhdpAssignment {
            intercept: 0.0,
            weights: [0.5, -0.5, 0.4, 0.2, 0.0, 0.0, 0.0, 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IhdpDgpParams {
    #[serde(default = "IhdpDgpParams::default_source")]
    pub source: FeatureSource,
    #[serde(default)]
    pub surface: IhdpSurface,
    #[serde(default)]
    pub noise: IhdpNoise,
    #[serde(default)]
    pub assignment: IhdpAssignment,
}

impl Default for IhdpDgpParams {
    fn default() -> Self {
        IhdpDgpParams {
            source: IhdpDgpParams::default_source(),
            surface: IhdpSurface::default(),
            noise: IhdpNoise::default(),
            assignment: IhdpAssignment::default(),
        }
    }
}

impl IhdpDgpParams {
    fn default_source() -> FeatureSource {
        FeatureSource::Synthetic { n: 4302 }
    }

    pub fn synthetic(n: usize) -> Self {
        IhdpDgpParams {
            source: FeatureSource::Synthetic { n },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let FeatureSource::Synthetic { n } = self.source {
            if n < 20 {
                return Err(Error::InvalidArgument(format!("sample count {n} below 20")));
            }
        }
        if !(self.noise.scale >= 0.0 && self.noise.scale.is_finite()) {
            return Err(Error::InvalidArgument("noise scale must be >= 0".into()));
        }
        Ok(())
    }
}

/// Reads the eight IHDP covariate columns from a CSV file.
pub fn read_ihdp_covariates(path: &Path) -> Result<Matrix> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = r.headers().map_err(|e| Error::csv(path, e))?.clone();
    let idx: Vec<Option<usize>> = IHDP_COLUMNS
        .iter()
        .map(|c| headers.iter().position(|h| h.trim() == *c))
        .collect();
    let missing: Vec<String> = IHDP_COLUMNS
        .iter()
        .zip(&idx)
        .filter(|(_, i)| i.is_none())
        .map(|(c, _)| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingColumns(missing));
    }
    let idx: Vec<usize> = idx.into_iter().flatten().collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        for &c in &idx {
            let v = rec.get(c).unwrap_or("").trim().parse::<f64>().map_err(|_| {
                Error::InvalidArgument(format!(
                    "{}: row {}: column {} is not a number",
                    path.display(),
                    line + 1,
                    headers[c].trim()
                ))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    if rows < 20 {
        return Err(Error::InvalidArgument(format!(
            "{}: {rows} rows, need at least 20",
            path.display()
        )));
    }
    Matrix::from_vec(rows, 8, data)
}

fn synthetic_ihdp_features(n: usize, rng: &mut RngStream) -> Matrix {
    const PLACE_CDF: [f64; 4] = [0.4, 0.7, 0.9, 1.0];
    let mut data = Vec::with_capacity(n * 8);
    for _ in 0..n {
        data.push(15.0 + rng.below(30) as f64);
        data.push((0.5 * rng.standard_normal()).exp());
        let u = rng.uniform();
        data.push(PLACE_CDF.iter().position(|&c| u < c).unwrap_or(3) as f64);
        for _ in 0..5 {
            data.push(rng.standard_normal());
        }
    }
    Matrix::from_vec(n, 8, data).expect("stand-in features are finite")
}

/// Column-standardized copy; constant columns are only centered.
fn standardize(x: &Matrix) -> Matrix {
    let mut z = x.clone();
    for c in 0..x.cols() {
        let col = x.column(c);
        let m = mean(&col);
        let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        for r in 0..x.rows() {
            z.set(r, c, (x.get(r, c) - m) / sd);
        }
    }
    z
}

// ---------------------------------------------------------------------------
// Generic handle

/// Features and treatments, before any outcome is drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct Covariates {
    pub x: Matrix,
    pub t: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcomes {
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug)]
pub enum Dgp {
    Ad(AdDgpParams),
    Ihdp(IhdpDgpParams),
}

impl Dgp {
    pub fn kind(&self) -> &'static str {
        match self {
            Dgp::Ad(_) => "ad",
            Dgp::Ihdp(_) => "ihdp",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Dgp::Ad(p) => p.validate(),
            Dgp::Ihdp(p) => p.validate(),
        }
    }

    /// Parameter record, used for provenance and for comparing processes.
    pub fn snapshot(&self) -> Value {
        match self {
            Dgp::Ad(p) => json!({
                "kind": "ad",
                "n": p.n,
                "p": p.p,
                "eta": p.eta,
                "theta": p.theta,
                "basis": p.basis.iter().map(|f| format!("{f:?}")).collect::<Vec<_>>(),
            }),
            Dgp::Ihdp(p) => {
                let mut v = serde_json::to_value(p).expect("params serialize");
                v["kind"] = json!("ihdp");
                v
            }
        }
    }

    pub fn covariates(&self, rng: &mut RngStream) -> Result<Covariates> {
        self.validate()?;
        match self {
            Dgp::Ad(p) => {
                let mut data = Vec::with_capacity(p.n * p.p);
                for _ in 0..p.n * p.p {
                    data.push(rng.standard_normal());
                }
                let x = Matrix::from_vec(p.n, p.p, data)?;
                let t = (0..p.n)
                    .map(|i| {
                        let s = p.basis.treatment_score(x.row(i));
                        u8::from(rng.normal(s, 1.0) > 0.0)
                    })
                    .collect();
                Ok(Covariates { x, t })
            }
            Dgp::Ihdp(p) => {
                let x = match &p.source {
                    FeatureSource::Synthetic { n } => synthetic_ihdp_features(*n, rng),
                    FeatureSource::Csv { path } => read_ihdp_covariates(path)?,
                };
                let z = standardize(&x);
                let a = &p.assignment;
                let t = (0..x.rows())
                    .map(|i| {
                        let logit = a.intercept
                            + a.weights.iter().zip(z.row(i)).map(|(w, v)| w * v).sum::<f64>();
                        u8::from(rng.uniform() < sigmoid(logit))
                    })
                    .collect();
                Ok(Covariates { x, t })
            }
        }
    }

    pub fn outcomes(&self, cov: &Covariates, rng: &mut RngStream) -> Result<Outcomes> {
        let n = cov.x.rows();
        if cov.t.len() != n {
            return Err(Error::Shape("treatment length differs from feature rows".into()));
        }
        let mut out = Outcomes {
            mu0: Vec::with_capacity(n),
            mu1: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
        };
        match self {
            Dgp::Ad(p) => {
                if cov.x.cols() < 5 {
                    return Err(Error::Shape("ad outcomes need at least 5 features".into()));
                }
                for i in 0..n {
                    let b = snap(p.basis.outcome_base(cov.x.row(i)));
                    let (m0, m1) = (b, b + p.eta);
                    let m = if cov.t[i] == 1 { m1 } else { m0 };
                    out.mu0.push(m0);
                    out.mu1.push(m1);
                    out.y.push(rng.normal(m, p.theta));
                }
            }
            Dgp::Ihdp(p) => {
                if cov.x.cols() != 8 {
                    return Err(Error::Shape("ihdp outcomes need exactly 8 features".into()));
                }
                let z = standardize(&cov.x);
                let zbar: Vec<f64> = (0..8).map(|c| mean(&z.column(c))).collect();
                let s = &p.surface;
                for i in 0..n {
                    let zi = z.row(i);
                    let mut m0 = s.intercept;
                    let mut tau = s.tau0;
                    for j in 0..8 {
                        m0 += s.linear[j] * zi[j] + s.quadratic[j] * (zi[j] * zi[j] - 1.0);
                        tau += s.tau_het[j] * (zi[j] - zbar[j]);
                    }
                    let m1 = m0 + tau;
                    let score: f64 = p.noise.weights.iter().zip(zi).map(|(w, v)| w * v).sum();
                    let sd = p.noise.scale * (0.5 + 0.5 * sigmoid(score));
                    let m = if cov.t[i] == 1 { m1 } else { m0 };
                    let eps = rng.standard_normal();
                    out.mu0.push(m0);
                    out.mu1.push(m1);
                    out.y.push(if sd > 0.0 { m + sd * eps } else { m });
                }
            }
        }
        Ok(out)
    }

    /// Covariates then outcomes from one stream.
    pub fn generate(&self, rng: &mut RngStream) -> Result<Dataset> {
        let (seed, stream) = (rng.seed(), rng.stream_id());
        let cov = self.covariates(rng)?;
        let out = self.outcomes(&cov, rng)?;
        Ok(assemble(self, cov, out, seed, stream))
    }

    /// Applies an outcome-only override; see [`make_concept_shift_family`].
    pub fn with_outcome_override(&self, ov: &Map<String, Value>) -> Result<Dgp> {
        const COVARIATE_KEYS: [&str; 5] = ["n", "p", "source", "assignment", "basis"];
        for key in ov.keys() {
            if COVARIATE_KEYS.contains(&key.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "override of '{key}' changes the feature or treatment mechanism; \
                     concept-shift variants may only change outcome parameters"
                )));
            }
        }
        let bad = |key: &str| {
            Error::InvalidArgument(format!("'{key}' is not an outcome parameter of this process"))
        };
        match self {
            Dgp::Ad(p) => {
                let mut q = p.clone();
                for (k, v) in ov {
                    let num = v.as_f64().ok_or_else(|| bad(k))?;
                    match k.as_str() {
                        "theta" => q.theta = num,
                        "eta" => q.eta = num,
                        _ => return Err(bad(k)),
                    }
                }
                q.validate()?;
                Ok(Dgp::Ad(q))
            }
            Dgp::Ihdp(p) => {
                let mut q = p.clone();
                for (k, v) in ov {
                    match k.as_str() {
                        "surface" => q.surface = serde_json::from_value(v.clone())?,
                        "noise" => q.noise = serde_json::from_value(v.clone())?,
                        "noise_scale" => q.noise.scale = v.as_f64().ok_or_else(|| bad(k))?,
                        "tau0" => q.surface.tau0 = v.as_f64().ok_or_else(|| bad(k))?,
                        _ => return Err(bad(k)),
                    }
                }
                q.validate()?;
                Ok(Dgp::Ihdp(q))
            }
        }
    }
}

pub(crate) fn assemble(dgp: &Dgp, cov: Covariates, out: Outcomes, seed: u64, stream: u64) -> Dataset {
    Dataset {
        x: cov.x,
        t: cov.t,
        y: out.y,
        mu0: Some(out.mu0),
        mu1: Some(out.mu1),
        meta: Provenance {
            dgp_id: dgp.kind().to_string(),
            seed,
            stream,
            params: dgp.snapshot(),
        },
    }
}

pub fn generate_ad_dataset(params: &AdDgpParams, rng: &mut RngStream) -> Result<Dataset> {
    Dgp::Ad(params.clone()).generate(rng)
}

pub fn generate_ihdp_dataset(params: &IhdpDgpParams, rng: &mut RngStream) -> Result<Dataset> {
    Dgp::Ihdp(params.clone()).generate(rng)
}

/// Processes sharing `base`'s feature and treatment mechanism but differing
/// in `Y | T, X`. Handle `d` in the result is the process with id `d`.
pub fn make_concept_shift_family(base: &Dgp, variants: &[Map<String, Value>]) -> Result<Vec<Dgp>> {
    if variants.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a concept-shift family needs at least 2 variants, got {}",
            variants.len()
        )));
    }
    variants.iter().map(|v| base.with_outcome_override(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn basis_is_centered() {
        let reg = BasisRegistry::default();
        assert_eq!(reg.len(), 10);
        let mut rng = RngStream::new(2024, 0);
        let draws: Vec<f64> = (0..1_000_000).map(|_| rng.standard_normal()).collect();
        for f in reg.iter() {
            let m = draws.iter().map(|&q| f.eval(q)).sum::<f64>() / draws.len() as f64;
            assert!(m.abs() < 0.02, "{f:?} has mean {m}");
        }
        assert!(BasisRegistry::new(reg.iter().copied().take(9).collect()).is_err());
        let mut bad: Vec<BasisFn> = reg.iter().copied().collect();
        bad[0] = BasisFn::new("inv", "1/x", |x| 1.0 / x, 0.0);
        assert!(BasisRegistry::new(bad).is_err());
    }

    #[test]
    fn ad_ground_truth_is_eta() {
        for (seed, eta) in [(1, 1.0), (2, 0.0), (3, 1.0), (4, 0.5)] {
            let params = AdDgpParams {
                n: 257,
                eta,
                ..Default::default()
            };
            let ds = generate_ad_dataset(&params, &mut RngStream::new(seed, 0)).unwrap();
            assert_eq!(ground_truth_ate(&ds).unwrap(), eta);
            ds.validate().unwrap();
        }
    }

    #[test]
    fn ad_treated_fraction_near_half() {
        let ds = generate_ad_dataset(&AdDgpParams::default(), &mut RngStream::new(11, 0)).unwrap();
        let frac = ds.treated_count() as f64 / ds.len() as f64;
        assert!((frac - 0.5).abs() < 0.05, "treated fraction {frac}");
    }

    #[test]
    fn theta_only_moves_y() {
        let lo = AdDgpParams::default();
        let hi = AdDgpParams {
            theta: 20.0,
            ..Default::default()
        };
        let a = generate_ad_dataset(&lo, &mut RngStream::new(5, 1)).unwrap();
        let b = generate_ad_dataset(&hi, &mut RngStream::new(5, 1)).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.t, b.t);
        assert_eq!(a.mu0, b.mu0);
        assert_eq!(a.mu1, b.mu1);
        assert_ne!(a.y, b.y);
    }

    #[test]
    fn noise_features_do_not_drive_treatment_or_outcome() {
        let params = AdDgpParams::default();
        let mut rng = RngStream::new(8, 0);
        let ds = generate_ad_dataset(&params, &mut rng).unwrap();
        let dgp = Dgp::Ad(params);
        // reverse q6..q10 in every row and recompute the deterministic parts
        let mut cov = Covariates {
            x: ds.x.clone(),
            t: ds.t.clone(),
        };
        for r in 0..cov.x.rows() {
            let mut row = cov.x.row(r)[5..].to_vec();
            row.reverse();
            for (j, v) in row.into_iter().enumerate() {
                cov.x.set(r, 5 + j, v);
            }
        }
        let out = dgp.outcomes(&cov, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(Some(out.mu0), ds.mu0);
        assert_eq!(Some(out.mu1), ds.mu1);
    }

    #[test]
    fn ad_param_errors() {
        let mut rng = RngStream::new(0, 0);
        let p4 = AdDgpParams { p: 4, ..Default::default() };
        assert!(generate_ad_dataset(&p4, &mut rng).is_err());
        let t0 = AdDgpParams { theta: 0.0, ..Default::default() };
        assert!(generate_ad_dataset(&t0, &mut rng).is_err());
        let small = AdDgpParams { n: 19, ..Default::default() };
        assert!(generate_ad_dataset(&small, &mut rng).is_err());
    }

    #[test]
    fn ihdp_stand_in_shape() {
        let ds = generate_ihdp_dataset(&IhdpDgpParams::synthetic(1144), &mut RngStream::new(3, 0)).unwrap();
        assert_eq!(ds.len(), 1144);
        assert_eq!(ds.n_features(), 8);
        let momage = ds.x.column(0);
        assert!(momage.iter().all(|&v| (15.0..=44.0).contains(&v) && v.fract() == 0.0));
        assert!(ds.x.column(1).iter().all(|&v| v > 0.0));
        assert!(ds.x.column(2).iter().all(|&v| [0.0, 1.0, 2.0, 3.0].contains(&v)));
        let frac = ds.treated_count() as f64 / ds.len() as f64;
        assert!(frac > 0.2 && frac < 0.8);
    }

    #[test]
    fn ihdp_noiseless_limit() {
        let mut params = IhdpDgpParams::synthetic(300);
        params.noise.scale = 0.0;
        let ds = generate_ihdp_dataset(&params, &mut RngStream::new(4, 0)).unwrap();
        let (mu0, mu1) = (ds.mu0.as_ref().unwrap(), ds.mu1.as_ref().unwrap());
        for i in 0..ds.len() {
            let m = if ds.t[i] == 1 { mu1[i] } else { mu0[i] };
            assert_eq!(ds.y[i], m);
        }
    }

    #[test]
    fn ihdp_noise_is_heteroskedastic_and_bounded() {
        let mut params = IhdpDgpParams::synthetic(20_000);
        params.noise.scale = 1.0;
        let ds = generate_ihdp_dataset(&params, &mut RngStream::new(6, 0)).unwrap();
        let (mu0, mu1) = (ds.mu0.as_ref().unwrap(), ds.mu1.as_ref().unwrap());
        let resid: Vec<f64> = (0..ds.len())
            .map(|i| ds.y[i] - if ds.t[i] == 1 { mu1[i] } else { mu0[i] })
            .collect();
        // noise sd lies in (0.5, 1.0): the pooled sd must too
        let sd = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
        assert!(sd > 0.5 && sd < 1.0, "pooled sd {sd}");
        // split by the noise score: high-score rows are noisier
        let z = standardize(&ds.x);
        let (mut hi, mut lo) = (Vec::new(), Vec::new());
        for (i, r) in resid.iter().enumerate() {
            let s: f64 = params.noise.weights.iter().zip(z.row(i)).map(|(w, v)| w * v).sum();
            if s > 0.0 { hi.push(r * r) } else { lo.push(r * r) }
        }
        assert!(mean(&hi) > mean(&lo));
    }

    #[test]
    fn ihdp_ate_matches_configured_tau0() {
        for seed in 0..5 {
            let mut params = IhdpDgpParams::synthetic(500 + 37 * seed as usize);
            params.surface.tau0 = 1.75;
            let ds = generate_ihdp_dataset(&params, &mut RngStream::new(seed, 0)).unwrap();
            assert!((ground_truth_ate(&ds).unwrap() - 1.75).abs() < 1e-12);
            // heterogeneous effects are really heterogeneous
            let ite: Vec<f64> = ds.mu1.as_ref().unwrap().iter().zip(ds.mu0.as_ref().unwrap()).map(|(a, b)| a - b).collect();
            assert!(crate::mathcore::population_variance(&ite) > 0.01);
        }
    }

    #[test]
    fn ihdp_csv_source() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ihdp.csv");
        let base = generate_ihdp_dataset(&IhdpDgpParams::synthetic(40), &mut RngStream::new(1, 0)).unwrap();
        let mut text = IHDP_COLUMNS.join(",") + "\n";
        for i in 0..base.len() {
            let row: Vec<String> = base.x.row(i).iter().map(f64::to_string).collect();
            text += &(row.join(",") + "\n");
        }
        std::fs::write(&path, &text).unwrap();
        let params = IhdpDgpParams {
            source: FeatureSource::Csv { path: path.clone() },
            ..Default::default()
        };
        let ds = generate_ihdp_dataset(&params, &mut RngStream::new(2, 0)).unwrap();
        assert_eq!(ds.x, base.x);

        std::fs::write(&path, "momage,bilirubin,bw\n1,2,3\n").unwrap();
        match generate_ihdp_dataset(&params, &mut RngStream::new(2, 0)) {
            Err(Error::MissingColumns(cols)) => {
                assert_eq!(cols, vec!["birthplace", "b_head", "preterm", "birth_o", "nnhealth"]);
            }
            other => panic!("expected missing columns, got {other:?}"),
        }
        let short: String = text.lines().take(10).collect::<Vec<_>>().join("\n");
        std::fs::write(&path, short).unwrap();
        assert!(generate_ihdp_dataset(&params, &mut RngStream::new(2, 0)).is_err());
    }

    #[test]
    fn concept_shift_family() {
        let base = Dgp::Ad(AdDgpParams::default());
        let fam = make_concept_shift_family(&base, &[ov(json!({"theta": 1.0})), ov(json!({"theta": 10.0}))]).unwrap();
        assert_eq!(fam.len(), 2);
        let a = fam[0].covariates(&mut RngStream::new(3, 3)).unwrap();
        let b = fam[1].covariates(&mut RngStream::new(3, 3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(fam[0].snapshot(), fam[1].snapshot());

        let three = [1.0, 10.0, 20.0].map(|t| ov(json!({ "theta": t })));
        assert_eq!(make_concept_shift_family(&base, &three).unwrap().len(), 3);
        assert!(make_concept_shift_family(&base, &three[..1]).is_err());
        let bad = [ov(json!({"theta": 1.0})), ov(json!({"n": 100}))];
        assert!(make_concept_shift_family(&base, &bad).is_err());
        let bad = [ov(json!({"theta": 1.0})), ov(json!({"p": 12}))];
        assert!(make_concept_shift_family(&base, &bad).is_err());

        let ih = Dgp::Ihdp(IhdpDgpParams::synthetic(100));
        let fam = make_concept_shift_family(&ih, &[ov(json!({"tau0": 1.0})), ov(json!({"tau0": 3.0, "noise_scale": 2.0}))]).unwrap();
        assert_eq!(fam.len(), 2);
        let bad = [ov(json!({"tau0": 1.0})), ov(json!({"assignment": {"intercept": 1.0, "weights": [0,0,0,0,0,0,0,0]}}))];
        assert!(make_concept_shift_family(&ih, &bad).is_err());
    }

    #[test]
    fn ground_truth_examples() {
        let mut ds = generate_ad_dataset(&AdDgpParams { n: 20, ..Default::default() }, &mut RngStream::new(0, 0)).unwrap();
        let two = ds.subset(&[0, 1]);
        let mut two = two;
        two.mu0 = Some(vec![0.0, 1.0]);
        two.mu1 = Some(vec![1.0, 4.0]);
        assert_eq!(ground_truth_ate(&two).unwrap(), 2.0);
        ds.mu0 = None;
        ds.mu1 = None;
        assert!(matches!(ground_truth_ate(&ds), Err(Error::MissingColumns(_))));
    }

    #[test]
    fn dataset_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let ds = generate_ad_dataset(&AdDgpParams { n: 30, ..Default::default() }, &mut RngStream::new(1, 1)).unwrap();
        ds.write_csv(&path, true).unwrap();
        let back = Dataset::read_csv(&path).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.t, ds.t);
        assert_eq!(back.y, ds.y);
        assert_eq!(back.mu1, ds.mu1);
        ds.write_csv(&path, false).unwrap();
        let back = Dataset::read_csv(&path).unwrap();
        assert!(back.mu0.is_none());
        assert!(ground_truth_ate(&back).is_err());
    }
}
