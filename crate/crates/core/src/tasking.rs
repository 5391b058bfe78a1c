//! Task construction: chunk a population along its confounders, mix each
//! chunk 3:2 with samples from `k` other chunks, attach the outcome process
//! assigned to the chunk, and split the result.
//!
//! Rounding rules, all deterministic:
//! * chunk sizes differ by at most one; the remainder goes to the earliest chunks;
//! * a task built around a chunk of size `n` takes `floor(2n / 5k)` rows from
//!   each donor and the remaining `n − k·floor(2n / 5k)` rows from its own chunk,
//!   all without replacement; donors are the `k` cyclic successors of the own chunk;
//! * train tasks split 1:1 and the test task 2:1:1, flooring the smaller parts
//!   and giving the remainder to the training part.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dgp::{Covariates, Dataset, Dgp, Outcomes};
use crate::error::{Error, Result};
use crate::mathcore::{empirical_quantile, Matrix, RngStream};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkScheme {
    /// Contiguous quantile ranges of one feature.
    Single(usize),
    /// Nested ordering: every feature but the last is cut into
    /// `ceil(Ω^(1/m))` quantile bins, the last is ordered by value, and the
    /// resulting lexicographic order is cut into `Ω` equal runs. With two
    /// features this yields roughly rectangular regions of the joint density.
    Joint(Vec<usize>),
}

impl ChunkScheme {
    pub fn features(&self) -> Vec<usize> {
        match self {
            ChunkScheme::Single(j) => vec![*j],
            ChunkScheme::Joint(js) => js.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRange {
    pub feature: usize,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkAssignment {
    pub chunk_count: usize,
    /// Chunk id of every population row.
    pub assignment: Vec<usize>,
    pub scheme: ChunkScheme,
}

impl ChunkAssignment {
    /// Row ids of chunk `c`, ascending.
    pub fn members(&self, c: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == c)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.chunk_count];
        for &a in &self.assignment {
            s[a] += 1;
        }
        s
    }

    pub fn ranges(&self, x: &Matrix) -> Vec<Vec<FeatureRange>> {
        (0..self.chunk_count)
            .map(|c| {
                let rows = self.members(c);
                self.scheme
                    .features()
                    .into_iter()
                    .map(|f| {
                        let vals = rows.iter().map(|&r| x.get(r, f));
                        FeatureRange {
                            feature: f,
                            min: vals.clone().fold(f64::INFINITY, f64::min),
                            max: vals.fold(f64::NEG_INFINITY, f64::max),
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

fn chunk_sizes(n: usize, count: usize) -> Vec<usize> {
    let (base, rem) = (n / count, n % count);
    (0..count).map(|c| base + usize::from(c < rem)).collect()
}

fn bins_per_leading_feature(omega: usize, m: usize) -> usize {
    let mut b = 1usize;
    while b.pow(m as u32) < omega {
        b += 1;
    }
    b
}

pub fn chunk_population(x: &Matrix, omega_count: usize, scheme: &ChunkScheme) -> Result<ChunkAssignment> {
    let n = x.rows();
    if omega_count < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 chunks, got {omega_count}")));
    }
    if omega_count > n {
        return Err(Error::InvalidArgument(format!(
            "{omega_count} chunks requested from {n} rows"
        )));
    }
    let features = scheme.features();
    if features.is_empty() {
        return Err(Error::InvalidArgument("chunking scheme names no feature".into()));
    }
    for &f in &features {
        if f >= x.cols() {
            return Err(Error::InvalidArgument(format!(
                "feature {f} out of range for {} columns",
                x.cols()
            )));
        }
        let first = x.get(0, f);
        if (0..n).all(|r| x.get(r, f) == first) {
            return Err(Error::InvalidArgument(format!(
                "feature {f} is constant; quantile chunks are degenerate"
            )));
        }
    }

    let (leading, last) = features.split_at(features.len() - 1);
    let last = last[0];
    let bins = bins_per_leading_feature(omega_count, features.len());
    let mut keys: Vec<(Vec<usize>, f64, usize)> = Vec::with_capacity(n);
    let mut cuts: Vec<Vec<f64>> = Vec::new();
    for &f in leading {
        let col = x.column(f);
        let c = (1..bins)
            .map(|b| empirical_quantile(&col, b as f64 / bins as f64))
            .collect::<Result<Vec<_>>>()?;
        cuts.push(c);
    }
    for r in 0..n {
        let bin_ids = leading
            .iter()
            .zip(&cuts)
            .map(|(&f, c)| c.iter().filter(|&&cut| x.get(r, f) > cut).count())
            .collect();
        keys.push((bin_ids, x.get(r, last), r));
    }
    keys.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut assignment = vec![0; n];
    let mut pos = 0;
    for (c, size) in chunk_sizes(n, omega_count).into_iter().enumerate() {
        for key in &keys[pos..pos + size] {
            assignment[key.2] = c;
        }
        pos += size;
    }
    Ok(ChunkAssignment {
        chunk_count: omega_count,
        assignment,
        scheme: scheme.clone(),
    })
}

/// Rows chosen for one task and the chunk each came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Mix {
    pub rows: Vec<usize>,
    pub sources: Vec<usize>,
}

impl Mix {
    pub fn count_from(&self, chunk: usize) -> usize {
        self.sources.iter().filter(|&&s| s == chunk).count()
    }
}

/// Per-donor quota `floor(0.4·n / k)` in exact integer arithmetic.
pub fn donor_quota(own_size: usize, k: usize) -> usize {
    (2 * own_size) / (5 * k)
}

pub fn mix_chunks(assignment: &ChunkAssignment, own: usize, k: usize, rng: &mut RngStream) -> Result<Mix> {
    let omega = assignment.chunk_count;
    if own >= omega {
        return Err(Error::InvalidArgument(format!("chunk {own} out of range")));
    }
    if k < 1 || k > omega - 1 {
        return Err(Error::InvalidArgument(format!(
            "mixing count k = {k} outside [1, {}]",
            omega - 1
        )));
    }
    let own_rows = assignment.members(own);
    let n = own_rows.len();
    let quota = donor_quota(n, k);
    let own_take = n - k * quota;
    let mut rows = rng.sample_without_replacement(&own_rows, own_take);
    let mut sources = vec![own; own_take];
    for j in 1..=k {
        let donor = (own + j) % omega;
        let pool = assignment.members(donor);
        if pool.len() < quota {
            return Err(Error::InvalidArgument(format!(
                "donor chunk {donor} has {} rows, fewer than its quota {quota}",
                pool.len()
            )));
        }
        rows.extend(rng.sample_without_replacement(&pool, quota));
        sources.extend(std::iter::repeat_n(donor, quota));
    }
    Ok(Mix { rows, sources })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskRole {
    Train,
    Test,
}

/// Index sets into a task's dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn for_role(order: &[usize], role: TaskRole) -> Splits {
        let n = order.len();
        match role {
            TaskRole::Train => {
                let val = n / 2;
                let train = n - val;
                Splits {
                    train: order[..train].to_vec(),
                    validation: order[train..].to_vec(),
                    test: Vec::new(),
                }
            }
            TaskRole::Test => {
                let quarter = n / 4;
                let train = n - 2 * quarter;
                Splits {
                    train: order[..train].to_vec(),
                    validation: order[train..train + quarter].to_vec(),
                    test: order[train + quarter..].to_vec(),
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Task {
    pub id: usize,
    pub dataset: Dataset,
    /// Population row of every task row.
    pub rows: Vec<usize>,
    /// Source chunk of every task row.
    pub sources: Vec<usize>,
    pub role: TaskRole,
    /// Seeded permutation of task rows; splits are contiguous runs of it.
    pub order: Vec<usize>,
    pub splits: Splits,
    pub dgp_id: usize,
}

impl Task {
    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    pub fn with_role(&self, role: TaskRole) -> Task {
        Task {
            role,
            splits: Splits::for_role(&self.order, role),
            ..self.clone()
        }
    }

    /// A task over a whole dataset, for callers that bring their own data.
    pub fn from_dataset(id: usize, dataset: Dataset, role: TaskRole, rng: &mut RngStream) -> Task {
        let n = dataset.len();
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Task {
            id,
            rows: (0..n).collect(),
            sources: vec![id; n],
            role,
            splits: Splits::for_role(&order, role),
            order,
            dataset,
            dgp_id: 0,
        }
    }
}

/// Shared covariates with one outcome draw per process of a family.
#[derive(Clone, Debug)]
pub struct Population {
    pub covariates: Covariates,
    pub outcomes: Vec<Outcomes>,
    pub snapshots: Vec<Value>,
    pub kinds: Vec<String>,
    pub seed: u64,
    pub stream: u64,
}

impl Population {
    /// Covariates from `family[0]`, then outcomes for each process in order,
    /// all from `rng`. A one-process family reproduces `Dgp::generate`.
    pub fn generate(family: &[Dgp], rng: &mut RngStream) -> Result<Population> {
        let first = family
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty process family".into()))?;
        let (seed, stream) = (rng.seed(), rng.stream_id());
        let covariates = first.covariates(rng)?;
        let outcomes = family
            .iter()
            .map(|d| d.outcomes(&covariates, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Population {
            covariates,
            outcomes,
            snapshots: family.iter().map(Dgp::snapshot).collect(),
            kinds: family.iter().map(|d| d.kind().to_string()).collect(),
            seed,
            stream,
        })
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Population> {
        let (Some(mu0), Some(mu1)) = (&ds.mu0, &ds.mu1) else {
            return Err(Error::MissingColumns(vec!["mu0".into(), "mu1".into()]));
        };
        Ok(Population {
            covariates: Covariates {
                x: ds.x.clone(),
                t: ds.t.clone(),
            },
            outcomes: vec![Outcomes {
                mu0: mu0.clone(),
                mu1: mu1.clone(),
                y: ds.y.clone(),
            }],
            snapshots: vec![ds.meta.params.clone()],
            kinds: vec![ds.meta.dgp_id.clone()],
            seed: ds.meta.seed,
            stream: ds.meta.stream,
        })
    }

    pub fn len(&self) -> usize {
        self.covariates.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covariates.t.is_empty()
    }

    /// The whole population under process `d`.
    pub fn dataset(&self, d: usize) -> Dataset {
        self.subset(d, &(0..self.len()).collect::<Vec<_>>())
    }

    fn subset(&self, d: usize, rows: &[usize]) -> Dataset {
        let out = &self.outcomes[d];
        let pick = |v: &Vec<f64>| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let mut ds = Dataset {
            x: self.covariates.x.select_rows(rows),
            t: rows.iter().map(|&i| self.covariates.t[i]).collect(),
            y: pick(&out.y),
            mu0: Some(pick(&out.mu0)),
            mu1: Some(pick(&out.mu1)),
            meta: crate::dgp::Provenance {
                dgp_id: self.kinds[d].clone(),
                seed: self.seed,
                stream: self.stream,
                params: self.snapshots[d].clone(),
            },
        };
        ds.meta.params["family_index"] = Value::from(d);
        ds
    }
}

#[derive(Clone, Debug)]
pub struct TaskSet {
    pub tasks: Vec<Task>,
    pub k: usize,
    pub assignment: ChunkAssignment,
    pub chunk_ranges: Vec<Vec<FeatureRange>>,
    pub dgp_snapshots: Vec<Value>,
    pub seed: u64,
    pub stream: u64,
}

pub fn build_taskset(
    population: &Population,
    omega_count: usize,
    k: usize,
    scheme: &ChunkScheme,
    concept_map: Option<&[usize]>,
    rng: &RngStream,
) -> Result<TaskSet> {
    if omega_count < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 tasks, got {omega_count}")));
    }
    if k < 1 || k > omega_count - 1 {
        return Err(Error::InvalidArgument(format!(
            "mixing count k = {k} outside [1, {}]",
            omega_count - 1
        )));
    }
    let dgp_count = population.outcomes.len();
    let map: Vec<usize> = match concept_map {
        None => vec![0; omega_count],
        Some(m) => {
            if m.len() != omega_count {
                return Err(Error::InvalidArgument(format!(
                    "concept-shift map covers {} chunks, expected {omega_count}",
                    m.len()
                )));
            }
            if let Some(&d) = m.iter().find(|&&d| d >= dgp_count) {
                return Err(Error::InvalidArgument(format!(
                    "concept-shift map names process {d}, family has {dgp_count}"
                )));
            }
            m.to_vec()
        }
    };
    let x = &population.covariates.x;
    let assignment = chunk_population(x, omega_count, scheme)?;
    let mut tasks = Vec::with_capacity(omega_count);
    for own in 0..omega_count {
        let mix = mix_chunks(&assignment, own, k, &mut rng.substream(own as u64))?;
        let dataset = population.subset(map[own], &mix.rows);
        let mut order: Vec<usize> = (0..mix.rows.len()).collect();
        rng.substream(1_000_000 + own as u64).shuffle(&mut order);
        tasks.push(Task {
            id: own,
            dataset,
            rows: mix.rows,
            sources: mix.sources,
            role: TaskRole::Train,
            splits: Splits::for_role(&order, TaskRole::Train),
            order,
            dgp_id: map[own],
        });
    }
    Ok(TaskSet {
        tasks,
        k,
        chunk_ranges: assignment.ranges(x),
        assignment,
        dgp_snapshots: population.snapshots.clone(),
        seed: rng.seed(),
        stream: rng.stream_id(),
    })
}

/// Every other task as a 1:1 train task, `test_id` as a 2:1:1 test task.
pub fn leave_one_out(ts: &TaskSet, test_id: usize) -> Result<(Vec<Task>, Task)> {
    if test_id >= ts.tasks.len() {
        return Err(Error::InvalidArgument(format!(
            "test task {test_id} out of range for {} tasks",
            ts.tasks.len()
        )));
    }
    let train = ts
        .tasks
        .iter()
        .filter(|t| t.id != test_id)
        .map(|t| t.with_role(TaskRole::Train))
        .collect();
    Ok((train, ts.tasks[test_id].with_role(TaskRole::Test)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkManifest {
    pub id: usize,
    pub size: usize,
    pub ranges: Vec<FeatureRange>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub id: usize,
    pub dgp_id: usize,
    pub role: TaskRole,
    pub size: usize,
    /// Rows contributed by each chunk, indexed by chunk id.
    pub provenance: Vec<usize>,
    pub population_rows: Vec<usize>,
    pub splits: Splits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSetManifest {
    pub omega: usize,
    pub k: usize,
    pub seed: u64,
    pub stream: u64,
    pub scheme: ChunkScheme,
    pub chunks: Vec<ChunkManifest>,
    pub dgps: Vec<Value>,
    pub tasks: Vec<TaskManifest>,
}

impl TaskSet {
    pub fn omega(&self) -> usize {
        self.tasks.len()
    }

    pub fn manifest(&self) -> TaskSetManifest {
        let sizes = self.assignment.sizes();
        TaskSetManifest {
            omega: self.omega(),
            k: self.k,
            seed: self.seed,
            stream: self.stream,
            scheme: self.assignment.scheme.clone(),
            chunks: sizes
                .iter()
                .zip(&self.chunk_ranges)
                .enumerate()
                .map(|(id, (&size, ranges))| ChunkManifest {
                    id,
                    size,
                    ranges: ranges.clone(),
                })
                .collect(),
            dgps: self.dgp_snapshots.clone(),
            tasks: self
                .tasks
                .iter()
                .map(|t| {
                    let mut provenance = vec![0; self.omega()];
                    for &s in &t.sources {
                        provenance[s] += 1;
                    }
                    TaskManifest {
                        id: t.id,
                        dgp_id: t.dgp_id,
                        role: t.role,
                        size: t.len(),
                        provenance,
                        population_rows: t.rows.clone(),
                        splits: t.splits.clone(),
                    }
                })
                .collect(),
        }
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest())?;
        crate::write_atomic(path, text.as_bytes())
    }

    /// SHA-256 over the manifest and every task's data, bit for bit.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.manifest()).expect("manifest serializes"));
        for t in &self.tasks {
            let ds = &t.dataset;
            for v in ds.x.data().iter().chain(&ds.y) {
                h.update(v.to_bits().to_le_bytes());
            }
            h.update(&ds.t);
            for v in ds.mu0.iter().chain(&ds.mu1).flatten() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
