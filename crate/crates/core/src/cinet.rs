//! The counterfactual-regression network and its inner-loop trainer.
//!
//! A CI network has a representation block `Φ` (dense layers, each followed
//! by the activation) and a hypothesis block `h` that reads `[Φ(x), t]` and
//! ends in a linear scalar output. The NN4 baseline has no `Φ`: four hidden
//! layers read `[x, t]` directly.
//!
//! Objective on a batch of `N` rows:
//!
//! ```text
//! total = (1/N) Σ w_i (ŷ_i − y_i)²  +  α ‖mean Φ(treated) − mean Φ(control)‖  +  γ mean(W_h²)
//! w_i   = t_i / 2u + (1 − t_i) / 2(1 − u),   u = treated share of the batch
//! ```
//!
//! Gradients are derived by hand; `tests` checks them against central
//! differences.

use std::path::Path;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dgp::Dataset;
use crate::error::{Error, Result};
use crate::mathcore::{Matrix, RngStream};
use crate::tasking::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn slope(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Ci,
    Nn4,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    SquaredError,
}

/// Parameter block, as seen by the meta update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Representation,
    Hypothesis,
    /// The whole NN4 network.
    Single,
}

/// Dense layer: `out = in · weights + bias`, weights stored `fan_in × fan_out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Layer {
        Layer {
            weights: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    fn random(fan_in: usize, fan_out: usize, gain: f64, rng: &mut RngStream) -> Layer {
        let sd = (gain / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| sd * rng.standard_normal()).collect();
        Layer {
            weights: Matrix::from_vec(fan_in, fan_out, data).expect("finite init"),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    fn len(&self) -> usize {
        self.weights.data().len() + self.bias.len()
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.data().iter().chain(&self.bias)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.data_mut().iter_mut().chain(self.bias.iter_mut())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub kind: NetKind,
    /// `W_Φ`; empty for NN4.
    pub phi: Vec<Layer>,
    /// `W_h`; the last layer has a single output.
    pub head: Vec<Layer>,
    pub activation: Activation,
    pub dropout: f64,
}

/// Same layout as the network it differentiates.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub phi: Vec<Layer>,
    pub head: Vec<Layer>,
}

impl Gradient {
    pub fn flatten(&self) -> Vec<f64> {
        self.phi.iter().chain(&self.head).flat_map(Layer::values).copied().collect()
    }
}

impl NetParams {
    pub fn n_features(&self) -> usize {
        match self.kind {
            NetKind::Ci => self.phi[0].fan_in(),
            NetKind::Nn4 => self.head[0].fan_in() - 1,
        }
    }

    pub fn representation_width(&self) -> Option<usize> {
        self.phi.last().map(Layer::fan_out)
    }

    pub fn partition(&self) -> Vec<Block> {
        match self.kind {
            NetKind::Ci => vec![Block::Representation, Block::Hypothesis],
            NetKind::Nn4 => vec![Block::Single],
        }
    }

    pub fn param_count(&self) -> usize {
        self.phi.iter().chain(&self.head).map(Layer::len).sum()
    }

    /// `W_Φ` first, then `W_h`; weights row-major then bias within a layer.
    pub fn flatten(&self) -> Vec<f64> {
        self.phi.iter().chain(&self.head).flat_map(Layer::values).copied().collect()
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<NetParams> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut out = self.clone();
        for (dst, &src) in out.phi.iter_mut().chain(out.head.iter_mut()).flat_map(Layer::values_mut).zip(flat) {
            *dst = src;
        }
        Ok(out)
    }

    /// Layer shapes, block by block.
    pub fn shapes(&self) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        let s = |ls: &[Layer]| ls.iter().map(|l| (l.fan_in(), l.fan_out())).collect();
        (s(&self.phi), s(&self.head))
    }

    pub fn same_layout(&self, other: &NetParams) -> bool {
        self.kind == other.kind && self.shapes() == other.shapes()
    }

    fn check_layout(&self) -> Result<()> {
        if self.head.is_empty() || self.head.last().is_some_and(|l| l.fan_out() != 1) {
            return Err(Error::Shape("hypothesis block must end in one output".into()));
        }
        if self.kind == NetKind::Ci && self.phi.is_empty() {
            return Err(Error::Shape("CI network needs a representation block".into()));
        }
        let mut width = self.phi.first().map(Layer::fan_in);
        for l in &self.phi {
            if Some(l.fan_in()) != width || l.bias.len() != l.fan_out() {
                return Err(Error::Shape("representation layers do not chain".into()));
            }
            width = Some(l.fan_out());
        }
        let mut width = match width {
            Some(w) => w + 1,
            None => self.head[0].fan_in(),
        };
        for l in &self.head {
            if l.fan_in() != width || l.bias.len() != l.fan_out() {
                return Err(Error::Shape("hypothesis layers do not chain".into()));
            }
            width = l.fan_out();
        }
        Ok(())
    }

    fn gradient_zeros(&self) -> Gradient {
        let z = |ls: &[Layer]| ls.iter().map(|l| Layer::zeros(l.fan_in(), l.fan_out())).collect();
        Gradient {
            phi: z(&self.phi),
            head: z(&self.head),
        }
    }

    fn sgd_step(&mut self, grad: &Gradient, lr: f64) {
        let dst = self.phi.iter_mut().chain(self.head.iter_mut()).flat_map(Layer::values_mut);
        let src = grad.phi.iter().chain(&grad.head).flat_map(Layer::values);
        for (p, g) in dst.zip(src) {
            *p -= lr * g;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CIConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    /// Hidden widths of `Φ`; the last one is the representation width.
    pub phi_widths: Vec<usize>,
    /// Hidden widths of `h`, before the scalar output.
    pub head_widths: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
}

impl Default for CIConfig {
    fn default() -> Self {
        CIConfig {
            alpha: 0.1,
            gamma: 1e-4,
            learning_rate: 0.01,
            batch_size: 32,
            epochs: 64,
            dropout: 0.0,
            phi_widths: vec![25, 25],
            head_widths: vec![25, 25],
            activation: Activation::Relu,
            loss: LossKind::SquaredError,
        }
    }
}

impl CIConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha {} must be >= 0", self.alpha));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma {} must be >= 0", self.gamma));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be >= 0", self.learning_rate));
        }
        if self.batch_size < 1 {
            return bad("batch size must be >= 1".into());
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.phi_widths.is_empty() || self.head_widths.is_empty() {
            return bad("both blocks need at least one hidden layer".into());
        }
        if self.phi_widths.iter().chain(&self.head_widths).any(|&w| w == 0) {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }

    /// Hash of everything that fixes the parameter layout.
    pub fn layout_hash(&self, kind: NetKind, n_features: usize) -> String {
        let v = serde_json::json!({
            "kind": kind,
            "n_features": n_features,
            "phi_widths": if kind == NetKind::Ci { self.phi_widths.clone() } else { vec![] },
            "head_widths": match kind {
                NetKind::Ci => self.head_widths.clone(),
                NetKind::Nn4 => vec![nn4_width(self); 4],
            },
            "activation": self.activation,
        });
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

fn nn4_width(config: &CIConfig) -> usize {
    config.head_widths.first().copied().unwrap_or(25)
}

/// He-normal hidden layers (`sd = sqrt(2 / fan_in)`), `sqrt(1 / fan_in)` for
/// the output layer; zero biases.
pub fn build_ci(config: &CIConfig, n_features: usize, rng: &mut RngStream) -> Result<NetParams> {
    config.validate()?;
    if n_features == 0 {
        return Err(Error::Config("network needs at least one feature".into()));
    }
    let mut phi = Vec::new();
    let mut width = n_features;
    for &w in &config.phi_widths {
        phi.push(Layer::random(width, w, 2.0, rng));
        width = w;
    }
    let head = build_head(width + 1, &config.head_widths, rng);
    Ok(NetParams {
        kind: NetKind::Ci,
        phi,
        head,
        activation: config.activation,
        dropout: config.dropout,
    })
}

fn build_head(mut width: usize, hidden: &[usize], rng: &mut RngStream) -> Vec<Layer> {
    let mut head = Vec::new();
    for &w in hidden {
        head.push(Layer::random(width, w, 2.0, rng));
        width = w;
    }
    head.push(Layer::random(width, 1, 1.0, rng));
    head
}

/// The NN4 baseline: four hidden layers of width `head_widths[0]` over
/// `[x, t]`, trained on the weighted factual loss only.
pub fn build_nn4(config: &CIConfig, n_features: usize, rng: &mut RngStream) -> Result<NetParams> {
    config.validate()?;
    if config.alpha != 0.0 {
        warn!("NN4 has no representation block; alpha {} forced to 0", config.alpha);
    }
    let head = build_head(n_features + 1, &[nn4_width(config); 4], rng);
    Ok(NetParams {
        kind: NetKind::Nn4,
        phi: Vec::new(),
        head,
        activation: config.activation,
        dropout: config.dropout,
    })
}

/// Imbalance weight actually applied: zero for NN4.
pub fn effective_alpha(params: &NetParams, config: &CIConfig) -> f64 {
    match params.kind {
        NetKind::Ci => config.alpha,
        NetKind::Nn4 => 0.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct LayerTrace {
    input: Matrix,
    pre: Matrix,
    /// Post-activation before dropout; only kept for hidden layers.
    act: Option<Matrix>,
    mask: Option<Vec<f64>>,
}

struct Trace {
    layers: Vec<LayerTrace>,
    rep: Option<Matrix>,
    out: Vec<f64>,
}

fn with_treatment(a: &Matrix, t: &[f64]) -> Matrix {
    let (n, w) = (a.rows(), a.cols());
    let mut data = Vec::with_capacity(n * (w + 1));
    for (r, &tv) in t.iter().enumerate() {
        data.extend_from_slice(a.row(r));
        data.push(tv);
    }
    Matrix::from_raw(n, w + 1, data)
}

fn run(params: &NetParams, x: &Matrix, t: &[f64], dropout: f64, mut rng: Option<&mut RngStream>) -> Trace {
    let act = params.activation;
    let n_phi = params.phi.len();
    let n_total = n_phi + params.head.len();
    let mut layers = Vec::with_capacity(n_total);
    let mut a = x.clone();
    let mut rep = None;
    if n_phi == 0 {
        a = with_treatment(&a, t);
    }
    for (li, layer) in params.phi.iter().chain(&params.head).enumerate() {
        let mut z = a.mul(&layer.weights);
        for r in 0..z.rows() {
            for (v, b) in z.data_mut()[r * layer.bias.len()..(r + 1) * layer.bias.len()]
                .iter_mut()
                .zip(&layer.bias)
            {
                *v += b;
            }
        }
        let hidden = li + 1 < n_total;
        if !hidden {
            let out = z.data().to_vec();
            layers.push(LayerTrace {
                input: a,
                pre: z,
                act: None,
                mask: None,
            });
            return Trace { layers, rep, out };
        }
        let mut h = z.clone();
        for v in h.data_mut() {
            *v = act.apply(*v);
        }
        let activated = h.clone();
        let mask = match rng.as_deref_mut() {
            Some(rng) if dropout > 0.0 => {
                let keep = 1.0 / (1.0 - dropout);
                let m: Vec<f64> = (0..h.data().len())
                    .map(|_| if rng.uniform() < dropout { 0.0 } else { keep })
                    .collect();
                for (v, s) in h.data_mut().iter_mut().zip(&m) {
                    *v *= s;
                }
                Some(m)
            }
            _ => None,
        };
        layers.push(LayerTrace {
            input: a,
            pre: z,
            act: Some(activated),
            mask,
        });
        a = h;
        if li + 1 == n_phi {
            rep = Some(a.clone());
            a = with_treatment(&a, t);
        }
    }
    unreachable!("network has an output layer")
}

fn check_input(params: &NetParams, x: &Matrix, t: &[f64]) -> Result<()> {
    params.check_layout()?;
    if x.cols() != params.n_features() {
        return Err(Error::Shape(format!(
            "{} features given, network expects {}",
            x.cols(),
            params.n_features()
        )));
    }
    if t.len() != x.rows() {
        return Err(Error::Shape("treatment length differs from batch rows".into()));
    }
    Ok(())
}

/// `h(Φ(x), t)` for a single row. Dropout (inverted scaling) only in train mode.
pub fn forward(params: &NetParams, x: &[f64], t: u8, mode: Mode, rng: &mut RngStream) -> Result<f64> {
    let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
    let tv = [f64::from(t)];
    check_input(params, &xm, &tv)?;
    let trace = match mode {
        Mode::Train => run(params, &xm, &tv, params.dropout, Some(rng)),
        Mode::Eval => run(params, &xm, &tv, 0.0, None),
    };
    Ok(trace.out[0])
}

/// Eval-mode predictions for every row under the given treatments.
pub fn predict(params: &NetParams, x: &Matrix, t: &[u8]) -> Result<Vec<f64>> {
    let tv: Vec<f64> = t.iter().map(|&v| f64::from(v)).collect();
    check_input(params, x, &tv)?;
    Ok(run(params, x, &tv, 0.0, None).out)
}

/// `Φ(x)` in eval mode; `None` for NN4.
pub fn represent(params: &NetParams, x: &Matrix) -> Result<Option<Matrix>> {
    let t = vec![0.0; x.rows()];
    check_input(params, x, &t)?;
    Ok(run(params, x, &t, 0.0, None).rep)
}

pub fn sample_weights(t: &[u8]) -> Result<Vec<f64>> {
    let n = t.len();
    let treated = t.iter().filter(|&&v| v == 1).count();
    if treated == 0 || treated == n {
        return Err(Error::MissingGroup(format!("{treated} of {n} rows treated")));
    }
    let u = treated as f64 / n as f64;
    Ok(t.iter()
        .map(|&v| if v == 1 { 1.0 / (2.0 * u) } else { 1.0 / (2.0 * (1.0 - u)) })
        .collect())
}

fn column_means(m: &Matrix, rows: impl Iterator<Item = usize>) -> (Vec<f64>, usize) {
    let mut acc = vec![0.0; m.cols()];
    let mut count = 0;
    for r in rows {
        for (a, v) in acc.iter_mut().zip(m.row(r)) {
            *a += v;
        }
        count += 1;
    }
    for a in &mut acc {
        *a /= count as f64;
    }
    (acc, count)
}

/// Linear mean discrepancy: `‖mean(treated) − mean(control)‖₂`.
pub fn discrepancy(rep_treated: &Matrix, rep_control: &Matrix) -> Result<f64> {
    if rep_treated.rows() == 0 || rep_control.rows() == 0 {
        return Err(Error::MissingGroup("discrepancy needs both groups".into()));
    }
    if rep_treated.cols() != rep_control.cols() {
        return Err(Error::Shape("representation widths differ".into()));
    }
    let (m1, _) = column_means(rep_treated, 0..rep_treated.rows());
    let (m0, _) = column_means(rep_control, 0..rep_control.rows());
    Ok(m1.iter().zip(&m0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub factual: f64,
    pub imbalance: f64,
    pub complexity: f64,
    pub total: f64,
}

/// Rows gathered from a dataset, treatment as 0/1 floats.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Matrix,
    pub t: Vec<u8>,
    pub y: Vec<f64>,
}

impl Batch {
    pub fn gather(ds: &Dataset, idx: &[usize]) -> Batch {
        Batch {
            x: ds.x.select_rows(idx),
            t: idx.iter().map(|&i| ds.t[i]).collect(),
            y: idx.iter().map(|&i| ds.y[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            x: self.x.select_rows(idx),
            t: idx.iter().map(|&i| self.t[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

fn complexity(params: &NetParams) -> (f64, usize) {
    let count: usize = params.head.iter().map(|l| l.weights.data().len()).sum();
    let sq: f64 = params.head.iter().flat_map(|l| l.weights.data()).map(|w| w * w).sum();
    (sq / count as f64, count)
}

/// Loss and, when `want_grad`, its gradient. Dropout applies when `rng` is given.
fn evaluate(
    params: &NetParams,
    batch: &Batch,
    config: &CIConfig,
    dropout: f64,
    rng: Option<&mut RngStream>,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Gradient>)> {
    if batch.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    let tv: Vec<f64> = batch.t.iter().map(|&v| f64::from(v)).collect();
    check_input(params, &batch.x, &tv)?;
    let w = sample_weights(&batch.t)?;
    let alpha = effective_alpha(params, config);
    let trace = run(params, &batch.x, &tv, dropout, rng);
    let n = batch.len() as f64;

    let factual = trace
        .out
        .iter()
        .zip(&batch.y)
        .zip(&w)
        .map(|((p, y), wi)| wi * (p - y) * (p - y))
        .sum::<f64>()
        / n;

    let treated = || batch.t.iter().enumerate().filter(|(_, &v)| v == 1).map(|(i, _)| i);
    let control = || batch.t.iter().enumerate().filter(|(_, &v)| v == 0).map(|(i, _)| i);
    let (imbalance, mean_gap) = match &trace.rep {
        Some(rep) => {
            let (m1, n1) = column_means(rep, treated());
            let (m0, n0) = column_means(rep, control());
            let gap: Vec<f64> = m1.iter().zip(&m0).map(|(a, b)| a - b).collect();
            let d = gap.iter().map(|g| g * g).sum::<f64>().sqrt();
            (d, Some((gap, n1, n0)))
        }
        None => (0.0, None),
    };
    let (cx, cx_count) = complexity(params);
    let total = factual + alpha * imbalance + config.gamma * cx;
    let loss = LossBreakdown {
        factual,
        imbalance,
        complexity: cx,
        total,
    };
    if !total.is_finite() {
        return Err(Error::NonFinite("training objective diverged".into()));
    }
    if !want_grad {
        return Ok((loss, None));
    }

    let mut grad = params.gradient_zeros();
    let n_phi = params.phi.len();
    let n_layers = trace.layers.len();
    // d total / d output
    let mut delta = Matrix::from_vec(
        batch.len(),
        1,
        trace
            .out
            .iter()
            .zip(&batch.y)
            .zip(&w)
            .map(|((p, y), wi)| 2.0 * wi * (p - y) / n)
            .collect(),
    )?;
    for li in (0..n_layers).rev() {
        let lt = &trace.layers[li];
        let layer = if li < n_phi { &params.phi[li] } else { &params.head[li - n_phi] };
        if let Some(act_out) = &lt.act {
            // delta currently holds d/d(post-dropout activation)
            let d = delta.data_mut();
            if let Some(mask) = &lt.mask {
                for (v, m) in d.iter_mut().zip(mask) {
                    *v *= m;
                }
            }
            for ((v, &z), &a) in d.iter_mut().zip(lt.pre.data()).zip(act_out.data()) {
                *v *= params.activation.slope(z, a);
            }
        }
        let g = if li < n_phi { &mut grad.phi[li] } else { &mut grad.head[li - n_phi] };
        g.weights = lt.input.tmul(&delta);
        for r in 0..delta.rows() {
            for (b, v) in g.bias.iter_mut().zip(delta.row(r)) {
                *b += v;
            }
        }
        if li == 0 {
            break;
        }
        let mut upstream = delta.mul_t(&layer.weights);
        if li == n_phi {
            // strip the treatment column and add the balancing term
            let width = upstream.cols() - 1;
            let mut stripped = Vec::with_capacity(upstream.rows() * width);
            for r in 0..upstream.rows() {
                stripped.extend_from_slice(&upstream.row(r)[..width]);
            }
            upstream = Matrix::from_raw(upstream.rows(), width, stripped);
            if let (Some((gap, n1, n0)), true) = (&mean_gap, imbalance > 0.0 && alpha > 0.0) {
                for r in 0..upstream.rows() {
                    let scale = if batch.t[r] == 1 {
                        alpha / (imbalance * *n1 as f64)
                    } else {
                        -alpha / (imbalance * *n0 as f64)
                    };
                    for (c, gv) in gap.iter().enumerate() {
                        let cur = upstream.get(r, c);
                        upstream.set(r, c, cur + scale * gv);
                    }
                }
            }
        }
        delta = upstream;
    }
    if config.gamma > 0.0 {
        let scale = 2.0 * config.gamma / cx_count as f64;
        for (g, l) in grad.head.iter_mut().zip(&params.head) {
            for (gv, wv) in g.weights.data_mut().iter_mut().zip(l.weights.data()) {
                *gv += scale * wv;
            }
        }
    }
    Ok((loss, Some(grad)))
}

/// Objective on `batch` in eval mode (no dropout).
pub fn ci_loss(params: &NetParams, batch: &Batch, config: &CIConfig) -> Result<LossBreakdown> {
    evaluate(params, batch, config, 0.0, None, false).map(|(l, _)| l)
}

/// Exact gradient of [`ci_loss`]'s total, in eval mode.
pub fn backward(params: &NetParams, batch: &Batch, config: &CIConfig) -> Result<Gradient> {
    let (_, g) = evaluate(params, batch, config, 0.0, None, true)?;
    Ok(g.expect("gradient requested"))
}

#[derive(Clone, Debug)]
pub struct InnerResult {
    pub params: NetParams,
    pub train_objective: f64,
    pub validation_objective: f64,
    pub skipped_batches: usize,
    pub steps: usize,
    /// Validation objective after each epoch, when requested.
    pub curve: Vec<f64>,
}

/// `U^L`: `config.epochs` epochs of mini-batch SGD over the task's training
/// split. Batches lacking a treatment group are skipped and counted.
/// `epochs = 0` returns the input unchanged.
pub fn update_operator(params_in: &NetParams, task: &Task, config: &CIConfig, rng: &mut RngStream) -> Result<InnerResult> {
    train(params_in, task, config, rng, false)
}

/// [`update_operator`] that also records the validation objective per epoch.
pub fn update_operator_traced(
    params_in: &NetParams,
    task: &Task,
    config: &CIConfig,
    rng: &mut RngStream,
) -> Result<InnerResult> {
    train(params_in, task, config, rng, true)
}

/// Objective on a split of a task, eval mode.
pub fn split_objective(params: &NetParams, ds: &Dataset, idx: &[usize], config: &CIConfig) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::Empty("split is empty".into()));
    }
    Ok(ci_loss(params, &Batch::gather(ds, idx), config)?.total)
}

fn train(params_in: &NetParams, task: &Task, config: &CIConfig, rng: &mut RngStream, trace: bool) -> Result<InnerResult> {
    if config.epochs > 0 {
        config.validate()?;
    }
    params_in.check_layout()?;
    let ds = &task.dataset;
    let split = &task.splits;
    if split.train.is_empty() {
        return Err(Error::Empty(format!("task {} has an empty training split", task.id)));
    }
    let mut params = params_in.clone();
    let train_batch = Batch::gather(ds, &split.train);
    let n = train_batch.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut skipped = 0;
    let mut steps = 0;
    let mut curve = Vec::new();
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let batch = train_batch.select(chunk);
            let (_, grad) = match evaluate(&params, &batch, config, config.dropout, Some(rng), true) {
                Ok(r) => r,
                Err(Error::MissingGroup(_)) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            params.sgd_step(&grad.expect("gradient requested"), config.learning_rate);
            steps += 1;
        }
        if trace {
            curve.push(split_objective(&params, ds, &split.validation, config)?);
        }
    }
    if skipped > 0 {
        debug!("task {}: skipped {skipped} single-group batches", task.id);
    }
    if config.epochs > 0 && steps == 0 {
        warn!("task {}: every batch lacked a treatment group; no update made", task.id);
    }
    let train_objective = ci_loss(&params, &train_batch, config)?.total;
    let validation_objective = if split.validation.is_empty() {
        f64::NAN
    } else {
        split_objective(&params, ds, &split.validation, config)?
    };
    Ok(InnerResult {
        params,
        train_objective,
        validation_objective,
        skipped_batches: skipped,
        steps,
        curve,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub stream: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub block: Block,
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: SeedRecord,
    pub iteration: Option<usize>,
    pub kind: NetKind,
    pub activation: Activation,
    pub dropout: f64,
    pub layers: Vec<LayerRecord>,
}

impl Checkpoint {
    pub fn from_params(params: &NetParams, config_hash: String, seed: SeedRecord, iteration: Option<usize>) -> Self {
        let rec = |block, l: &Layer| LayerRecord {
            block,
            rows: l.fan_in(),
            cols: l.fan_out(),
            weights: l.weights.data().to_vec(),
            bias: l.bias.clone(),
        };
        let head_block = match params.kind {
            NetKind::Ci => Block::Hypothesis,
            NetKind::Nn4 => Block::Single,
        };
        Checkpoint {
            format_version: CHECKPOINT_FORMAT,
            config_hash,
            seed,
            iteration,
            kind: params.kind,
            activation: params.activation,
            dropout: params.dropout,
            layers: params
                .phi
                .iter()
                .map(|l| rec(Block::Representation, l))
                .chain(params.head.iter().map(|l| rec(head_block, l)))
                .collect(),
        }
    }

    pub fn params(&self) -> Result<NetParams> {
        if self.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format version {}", self.format_version)));
        }
        let mut phi = Vec::new();
        let mut head = Vec::new();
        for l in &self.layers {
            if l.bias.len() != l.cols {
                return Err(Error::Checkpoint("bias length differs from layer width".into()));
            }
            let layer = Layer {
                weights: Matrix::from_vec(l.rows, l.cols, l.weights.clone())?,
                bias: l.bias.clone(),
            };
            match l.block {
                Block::Representation => phi.push(layer),
                Block::Hypothesis | Block::Single => head.push(layer),
            }
        }
        let params = NetParams {
            kind: self.kind,
            phi,
            head,
            activation: self.activation,
            dropout: self.dropout,
        };
        params.check_layout()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        crate::write_atomic(path, text.as_bytes())
    }

    /// Loads and checks the layout hash unless `force` is set.
    pub fn load(path: &Path, expected_hash: Option<&str>, force: bool) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if let Some(h) = expected_hash {
            if h != ck.config_hash {
                if force {
                    warn!("{}: config hash mismatch ignored", path.display());
                } else {
                    return Err(Error::Checkpoint(format!(
                        "{}: config hash {} does not match {h}",
                        path.display(),
                        ck.config_hash
                    )));
                }
            }
        }
        Ok(ck)
    }
}
