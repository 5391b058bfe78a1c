//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! per criterion to stderr, then fails if any criterion failed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use metaci::cinet::{
    backward, build_ci, ci_loss, discrepancy, sample_weights, update_operator, Activation, Batch, CIConfig, NetKind,
    NetParams,
};
use metaci::dgp::{AdDgpParams, Dgp};
use metaci::experiment::{
    self, ate, emit_report, mape, read_report, AtePrediction, Format, Method, RowKind, RowStatus, Scenario,
};
use metaci::mathcore::{finite_diff_gradient, Matrix, RngStream};
use metaci::meta::{inner_stream, meta_train, reptile_step, EpsSchedule, MetaConfig, EPS_PRESETS};
use metaci::tasking::{build_taskset, leave_one_out, ChunkScheme, Population};

const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const ORACLE_TOL: f64 = 1e-12;
const ORACLE_CASES: usize = 100;
const ATE_TOL: f64 = 1e-12;
const DIRECTION_RATIO: f64 = 0.8;
const DIRECTION_SEED_WINS: usize = 2;

const LIMIT_C1: Duration = Duration::from_secs(60);
const LIMIT_C2: Duration = Duration::from_secs(10);
const LIMIT_C3: Duration = Duration::from_secs(10);
const LIMIT_C4: Duration = Duration::from_secs(10);
const LIMIT_C6: Duration = Duration::from_secs(20 * 60);
const LIMIT_C5: Duration = Duration::from_secs(2 * 20 * 60);
const LIMIT_C7: Duration = Duration::from_secs(25 * 60);
const LIMIT_C8: Duration = Duration::from_secs(30 * 60);
const LIMIT_C9: Duration = Duration::from_secs(30);

type Outcome = Result<String, String>;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------------------
// 1. gradient correctness

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn c1_gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut worst_coord: f64 = 0.0;
    let mut count = 0;
    for phi_layers in 1..=3 {
        for head_layers in 1..=3 {
            for width in [1usize, 4, 25] {
                for (alpha, gamma) in [(0.0, 0.0), (1.0, 0.0), (0.0, 0.1), (1.0, 0.1)] {
                    let config = CIConfig {
                        alpha,
                        gamma,
                        dropout: 0.0,
                        phi_widths: vec![width; phi_layers],
                        head_widths: vec![width; head_layers],
                        activation: Activation::Tanh,
                        ..Default::default()
                    };
                    let tag = (phi_layers * 100 + head_layers * 10) as u64 + width as u64;
                    let mut rng = RngStream::new(2024, tag);
                    let net = build_ci(&config, 3, &mut rng).map_err(|e| e.to_string())?;
                    let n = 8;
                    let x = Matrix::from_vec(n, 3, (0..3 * n).map(|_| rng.standard_normal()).collect()).unwrap();
                    let t = vec![1, 0, 1, 1, 0, 0, 1, 0];
                    let y = (0..n).map(|_| rng.normal(0.0, 2.0)).collect();
                    let batch = Batch { x, t, y };
                    let analytic = backward(&net, &batch, &config).map_err(|e| e.to_string())?.flatten();
                    let numeric = finite_diff_gradient(
                        |p| ci_loss(&net.with_flat(p).unwrap(), &batch, &config).unwrap().total,
                        &net.flatten(),
                        GRAD_STEP,
                    )
                    .map_err(|e| e.to_string())?;
                    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
                    let rel = norm(&diff) / norm(&analytic).max(norm(&numeric)).max(f64::MIN_POSITIVE);
                    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    let coord = diff.iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale.max(f64::MIN_POSITIVE);
                    worst = worst.max(rel);
                    worst_coord = worst_coord.max(coord);
                    count += 1;
                }
            }
        }
    }
    check(worst < GRAD_TOL, format!("max relative error {worst:e} over {count} checks"))?;
    Ok(format!(
        "{count} checks, max norm-wise relative error {worst:.2e}, max coordinate error / max |g| {worst_coord:.2e}"
    ))
}

// ---------------------------------------------------------------------------
// 2. formula oracles

fn oracle_weights(t: &[u8]) -> Vec<f64> {
    let n = t.len() as f64;
    let mut treated = 0.0;
    for &v in t {
        treated += f64::from(v);
    }
    let u = treated / n;
    t.iter()
        .map(|&v| {
            let tv = f64::from(v);
            tv / (2.0 * u) + (1.0 - tv) / (2.0 * (1.0 - u))
        })
        .collect()
}

fn oracle_disc(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let d = a[0].len();
    let mut s = 0.0;
    for j in 0..d {
        let ma: f64 = a.iter().map(|r| r[j]).sum::<f64>() / a.len() as f64;
        let mb: f64 = b.iter().map(|r| r[j]).sum::<f64>() / b.len() as f64;
        s += (ma - mb) * (ma - mb);
    }
    s.sqrt()
}

fn oracle_ate(y: &[f64], cf: &[f64], t: &[u8]) -> f64 {
    let n1 = t.iter().filter(|&&v| v == 1).count() as f64;
    let n0 = t.len() as f64 - n1;
    let mut total = 0.0;
    for i in 0..t.len() {
        total += if t[i] == 1 { (y[i] - cf[i]) / (2.0 * n1) } else { (cf[i] - y[i]) / (2.0 * n0) };
    }
    total
}

fn c2_oracles() -> Outcome {
    let mut rng = RngStream::new(77, 0);
    let mut max_err: f64 = 0.0;
    let mut note = |e: f64| max_err = max_err.max(e);
    let close = |a: f64, b: f64| (a - b).abs() <= ORACLE_TOL * a.abs().max(b.abs()).max(1.0);
    for case in 0..ORACLE_CASES {
        let n = 2 + rng.below(30);
        let mut t: Vec<u8> = (0..n).map(|_| u8::from(rng.uniform() < 0.5)).collect();
        t[0] = 1;
        t[n - 1] = 0;

        let w = sample_weights(&t).map_err(|e| e.to_string())?;
        for (a, b) in w.iter().zip(oracle_weights(&t)) {
            note((a - b).abs());
            check(close(*a, b), format!("sample_weights case {case}"))?;
        }

        let d = 1 + rng.below(6);
        let mut rows = |m: usize| -> Vec<Vec<f64>> { (0..m).map(|_| (0..d).map(|_| rng.normal(0.0, 3.0)).collect()).collect() };
        let (ra, rb) = (rows(1 + case % 7), rows(1 + case % 5));
        let got = discrepancy(&Matrix::from_rows(&ra).unwrap(), &Matrix::from_rows(&rb).unwrap())
            .map_err(|e| e.to_string())?;
        let want = oracle_disc(&ra, &rb);
        note((got - want).abs());
        check(close(got, want), format!("discrepancy case {case}"))?;

        let config = CIConfig {
            phi_widths: vec![1 + rng.below(4)],
            head_widths: vec![1 + rng.below(4)],
            ..Default::default()
        };
        let c = build_ci(&config, 2, &mut rng).unwrap();
        let i = build_ci(&config, 2, &mut rng).unwrap();
        let (ep, eh) = (rng.uniform_range(1e-6, 1.0), rng.uniform_range(1e-6, 1.0));
        let out = reptile_step(&c, &i, ep, eh).map_err(|e| e.to_string())?;
        let phi_len: usize = c.phi.iter().map(|l| l.weights.data().len() + l.bias.len()).sum();
        for (k, ((o, a), b)) in out.flatten().iter().zip(c.flatten()).zip(i.flatten()).enumerate() {
            let eps = if k < phi_len { ep } else { eh };
            let want = a + eps * (b - a);
            note((o - want).abs());
            check(close(*o, want), format!("reptile_step case {case}"))?;
        }

        let y: Vec<f64> = (0..n).map(|_| rng.normal(1.0, 2.0)).collect();
        let cf: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 2.0)).collect();
        let got = ate(&AtePrediction { y: y.clone(), y_cf: cf.clone(), t: t.clone() }).map_err(|e| e.to_string())?;
        let want = oracle_ate(&y, &cf, &t);
        note((got - want).abs());
        check(close(got, want), format!("ate case {case}"))?;

        let g = rng.normal(0.0, 5.0);
        let a = rng.normal(0.0, 5.0);
        let got = mape(a, g).map_err(|e| e.to_string())?;
        let want = ((g - a) / g).abs();
        note((got - want).abs());
        check(close(got, want), format!("mape case {case}"))?;
    }
    Ok(format!("{ORACLE_CASES} cases per formula, max abs deviation {max_err:.2e}"))
}

// ---------------------------------------------------------------------------
// 3. task composition

fn c3_composition() -> Outcome {
    let mut checked = 0;
    for omega in [4usize, 7] {
        for k in [1, 3, omega - 1] {
            let dgp = Dgp::Ad(AdDgpParams { n: omega * 500 + 3, ..Default::default() });
            let rng = RngStream::new(5, omega as u64 * 10 + k as u64);
            let pop = Population::generate(&[dgp], &mut rng.substream(1)).map_err(|e| e.to_string())?;
            let ts = build_taskset(&pop, omega, k, &ChunkScheme::Single(0), None, &rng.substream(2))
                .map_err(|e| e.to_string())?;
            let sizes = ts.assignment.sizes();
            for task in &ts.tasks {
                let own = task.id;
                let size = sizes[own];
                check(task.len() == size, format!("task {own} size {} != chunk {size}", task.len()))?;
                let quota = (4 * size / 10) / k;
                let expected_own = size - k * quota;
                check(expected_own >= 6 * size / 10, "own share below floor(60%)")?;
                let mut counts = vec![0usize; omega];
                for &s in &task.sources {
                    counts[s] += 1;
                }
                for (c, &got) in counts.iter().enumerate() {
                    let offset = (c + omega - own) % omega;
                    let want = if c == own {
                        expected_own
                    } else if offset <= k {
                        quota
                    } else {
                        0
                    };
                    check(
                        got == want,
                        format!("|Ω|={omega} k={k} task {own} chunk {c}: {got} rows, expected {want}"),
                    )?;
                }
                let mut seen = task.rows.clone();
                seen.sort_unstable();
                seen.dedup();
                check(seen.len() == task.len(), "rows drawn with replacement")?;
                for (row, &src) in task.rows.iter().zip(&task.sources) {
                    check(ts.assignment.assignment[*row] == src, "provenance disagrees with chunk assignment")?;
                }
                let n = task.len();
                let s = &task.splits;
                check(s.validation.len() == n / 2 && s.train.len() == n - n / 2 && s.test.is_empty(), "1:1 split")?;
            }
            for test_id in 0..omega {
                let (train, test) = leave_one_out(&ts, test_id).map_err(|e| e.to_string())?;
                check(train.len() == omega - 1, "train task count")?;
                let n = test.len();
                let s = &test.splits;
                check(
                    s.validation.len() == n / 4 && s.test.len() == n / 4 && s.train.len() == n - 2 * (n / 4),
                    format!("2:1:1 split of {n}"),
                )?;
                let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
                all.sort_unstable();
                check(all == (0..n).collect::<Vec<_>>(), "splits do not partition the task")?;
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} (|Ω|, k) settings, provenance and splits exact"))
}

// ---------------------------------------------------------------------------
// 4. ground-truth recovery

fn c4_recovery() -> Outcome {
    let sc: Scenario = serde_json::from_value(serde_json::json!({
        "name": "oracle",
        "dataset": {"kind": "ad", "params": {"eta": 1.0, "theta": 1e-15}},
        "task_size": 500,
        "omega": 4,
        "k": 3,
        "scheme": {"single": 0},
        "methods": ["Oracle"],
        "seeds": [1, 2, 3]
    }))
    .map_err(|e| e.to_string())?;
    let out = experiment::run_scenario(&sc, None).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    for r in out.report.task_rows() {
        check(r.status == RowStatus::Ok, format!("row failed: {}", r.message))?;
        let (a, g, m) = (r.ate.unwrap(), r.ate_g.unwrap(), r.mape.unwrap());
        check((g - 1.0).abs() <= ATE_TOL, format!("ground truth {g}"))?;
        check((a - 1.0).abs() <= ATE_TOL, format!("ATE {a}"))?;
        check(m <= ATE_TOL, format!("MAPE {m}"))?;
        worst = worst.max((a - 1.0).abs());
        rows += 1;
    }
    check(rows == 12, format!("{rows} rows"))?;
    Ok(format!("{rows} oracle runs, max |ATE - 1| {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 5 and 6. Meta versus random, and determinism

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn cli_eval(config: &Path, out: &Path, jobs: usize) -> Result<Duration, String> {
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_metaci"))
        .args(["eval", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--jobs", &jobs.to_string(), "--format", "csv"])
        .env("RUST_LOG", "warn")
        .status()
        .map_err(|e| e.to_string())?;
    check(status.success(), format!("eval exited with {status}"))?;
    Ok(start.elapsed())
}

fn c5_c6(dir: &Path) -> (Outcome, Duration, Outcome, Duration) {
    let config = configs().join("meta_vs_random_omega7.json");
    let (a, b) = (dir.join("run-a"), dir.join("run-b"));
    let t_a = match cli_eval(&config, &a, 1) {
        Ok(t) => t,
        Err(e) => return (Err(e.clone()), Duration::ZERO, Err(e), Duration::ZERO),
    };
    let c6 = meta_vs_random_direction(&a.join("report.csv"));
    let c5 = cli_eval(&config, &b, 4).and_then(|t_b| {
        let (fa, fb) = (files_under(&a), files_under(&b));
        check(fa.keys().eq(fb.keys()), "runs wrote different file sets")?;
        let ckpts = fa.keys().filter(|p| p.starts_with("checkpoints")).count();
        for (p, bytes) in &fa {
            check(&fb[p] == bytes, format!("{} differs between runs", p.display()))?;
        }
        check(ckpts > 0, "no checkpoints written")?;
        Ok((format!("{} files identical ({ckpts} checkpoint files), jobs 1 vs 4", fa.len()), t_b))
    });
    match c5 {
        Ok((msg, t_b)) => (Ok(msg), t_a + t_b, c6, t_a),
        Err(e) => (Err(e), t_a, c6, t_a),
    }
}

fn mape_by(path: &Path) -> Result<BTreeMap<(Method, u64), Vec<f64>>, String> {
    let report = read_report(path).map_err(|e| e.to_string())?;
    report.validate().map_err(|e| e.to_string())?;
    let mut by: BTreeMap<(Method, u64), Vec<f64>> = BTreeMap::new();
    for r in report.task_rows() {
        check(r.status == RowStatus::Ok, format!("{} task {:?} failed: {}", r.method, r.test_task, r.message))?;
        by.entry((r.method, r.seed.unwrap())).or_default().push(r.mape.unwrap());
    }
    Ok(by)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn overall(by: &BTreeMap<(Method, u64), Vec<f64>>, m: Method) -> f64 {
    mean(&by.iter().filter(|(k, _)| k.0 == m).flat_map(|(_, v)| v.clone()).collect::<Vec<_>>())
}

fn meta_vs_random_direction(report: &Path) -> Outcome {
    let by = mape_by(report)?;
    let seeds: Vec<u64> = by.keys().map(|k| k.1).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let mut wins = 0;
    let mut per_seed = Vec::new();
    for &s in &seeds {
        let (m, r) = (mean(&by[&(Method::MetaCI, s)]), mean(&by[&(Method::RandomCI, s)]));
        per_seed.push(format!("seed {s}: {m:.4} vs {r:.4}"));
        wins += usize::from(m < r);
    }
    let (meta, random) = (overall(&by, Method::MetaCI), overall(&by, Method::RandomCI));
    let msg = format!(
        "MetaCI {meta:.4} vs RandomCI {random:.4} (ratio {:.3}); {}",
        meta / random,
        per_seed.join(", ")
    );
    check(wins >= DIRECTION_SEED_WINS && meta < DIRECTION_RATIO * random, msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------------------
// 7. concept shift

fn c7_concept(dir: &Path) -> Outcome {
    let sc = Scenario::from_path(&configs().join("concept_shift2.json")).map_err(|e| e.to_string())?;
    let out = experiment::eval_to_dir(&sc, dir, Format::Csv).map_err(|e| e.to_string())?;
    let by = mape_by(&dir.join("report.csv"))?;
    let (meta, random) = (overall(&by, Method::MetaCI), overall(&by, Method::RandomCI));
    let table = out.concept_shift.ok_or("no concept-shift summary")?;
    check(dir.join("concept_shift.csv").exists(), "concept_shift.csv missing")?;
    check(table.len() == 4, format!("{} summary rows, expected 2 processes × 2 methods", table.len()))?;
    let cells: Vec<String> = table
        .iter()
        .map(|r| format!("{} d{} μ={:.3} σ²={:.3}", r.method, r.dgp, r.mean_ate, r.var_ate))
        .collect();
    let msg = format!("MetaCI {meta:.4} vs RandomCI {random:.4}; {}", cells.join("; "));
    check(meta <= random, msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------------------
// 8. regime sweep

fn c8_presets(dir: &Path) -> Outcome {
    let sc = Scenario::from_path(&configs().join("eps_presets.json")).map_err(|e| e.to_string())?;
    check(sc.eps_presets && sc.omega == 4 && sc.k == 3, "preset scenario must be |Ω|=4, k=3 with presets on")?;
    let out = experiment::eval_to_dir(&sc, dir, Format::Json).map_err(|e| e.to_string())?;
    let parsed = read_report(&dir.join("report.json")).map_err(|e| e.to_string())?;
    check(parsed == out.report, "JSON report does not round-trip")?;
    parsed.validate().map_err(|e| e.to_string())?;
    let failed = parsed.task_rows().filter(|r| r.status != RowStatus::Ok).count();
    check(failed == 0, format!("{failed} runs did not complete"))?;
    let agg: Vec<_> = parsed.aggregate_rows().collect();
    check(agg.len() == 3, format!("{} aggregate rows", agg.len()))?;
    let mut cells = Vec::new();
    for (name, eps_h, eps_phi) in EPS_PRESETS {
        let want = format!("{}/{name}", sc.name);
        let row = agg.iter().find(|r| r.scenario == want).ok_or(format!("no aggregate for {want}"))?;
        check(row.kind == RowKind::Aggregate && row.members == sc.omega * sc.seeds.len(), "member count")?;
        cells.push(format!("(ε_h={eps_h}, ε_Φ={eps_phi}) {:.4}", row.mape.unwrap()));
    }
    let csv = dir.join("report.csv");
    emit_report(&parsed, Format::Csv, &csv).map_err(|e| e.to_string())?;
    check(read_report(&csv).map_err(|e| e.to_string())? == parsed, "CSV report does not round-trip")?;
    Ok(cells.join(", "))
}

// ---------------------------------------------------------------------------
// 9. Reptile degeneracy

fn c9_degenerate() -> Outcome {
    let dgp = Dgp::Ad(AdDgpParams { n: 1000, ..Default::default() });
    let rng = RngStream::new(9, 0);
    let pop = Population::generate(&[dgp], &mut rng.substream(1)).map_err(|e| e.to_string())?;
    let ts = build_taskset(&pop, 2, 1, &ChunkScheme::Single(0), None, &rng.substream(2)).map_err(|e| e.to_string())?;
    let config = MetaConfig {
        iterations: 1,
        eps_phi: 1.0,
        eps_h: 1.0,
        schedule: EpsSchedule::LinearDecay,
        checkpoint_every: 1,
        inner: CIConfig { epochs: 16, ..Default::default() },
    };
    let bits = |p: &NetParams| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let mut n = 0;
    for kind in [NetKind::Ci, NetKind::Nn4] {
        let mut init_rng = rng.substream(3);
        let init = match kind {
            NetKind::Ci => build_ci(&config.inner, 10, &mut init_rng),
            NetKind::Nn4 => metaci::cinet::build_nn4(&CIConfig { alpha: 0.0, ..config.inner.clone() }, 10, &mut init_rng),
        }
        .map_err(|e| e.to_string())?;
        let meta_rng = rng.substream(4);
        let state = meta_train(&ts.tasks[..1], &config, &init, &meta_rng).map_err(|e| e.to_string())?;
        let direct = update_operator(&init, &ts.tasks[0], &config.inner, &mut inner_stream(&meta_rng, 0))
            .map_err(|e| e.to_string())?;
        check(bits(&state.params) == bits(&direct.params), format!("{kind:?}: parameters differ"))?;
        n += direct.params.param_count();
    }
    Ok(format!("CI and NN4, {n} parameters bit-identical"))
}

// ---------------------------------------------------------------------------

fn line(id: u32, name: &str, limit: Duration, elapsed: Duration, outcome: &Outcome) -> bool {
    let in_time = elapsed <= limit;
    let pass = outcome.is_ok() && in_time;
    let detail = match outcome {
        Ok(m) => m.clone(),
        Err(e) => e.clone(),
    };
    let timing = format!("{:.1}s of {}s", elapsed.as_secs_f64(), limit.as_secs());
    let _ = writeln!(
        std::io::stderr(),
        "ACCEPTANCE {id} {name}: {} [{timing}{}] {detail}",
        if pass { "PASS" } else { "FAIL" },
        if in_time { "" } else { ", over time limit" }
    );
    pass
}

fn timed<F: FnOnce() -> Outcome>(f: F) -> (Outcome, Duration) {
    let start = Instant::now();
    let o = f();
    (o, start.elapsed())
}

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let mut passed = Vec::new();

    let (o, t) = timed(c1_gradients);
    passed.push(line(1, "gradient correctness", LIMIT_C1, t, &o));
    let (o, t) = timed(c2_oracles);
    passed.push(line(2, "formula oracles", LIMIT_C2, t, &o));
    let (o, t) = timed(c3_composition);
    passed.push(line(3, "task composition", LIMIT_C3, t, &o));
    let (o, t) = timed(c4_recovery);
    passed.push(line(4, "ground-truth recovery", LIMIT_C4, t, &o));
    let (o5, t5, o6, t6) = c5_c6(tmp.path());
    passed.push(line(5, "determinism", LIMIT_C5, t5, &o5));
    passed.push(line(6, "meta versus random direction", LIMIT_C6, t6, &o6));
    let (o, t) = timed(|| c7_concept(&tmp.path().join("concept")));
    passed.push(line(7, "concept-shift direction", LIMIT_C7, t, &o));
    let (o, t) = timed(|| c8_presets(&tmp.path().join("presets")));
    passed.push(line(8, "epsilon regime sweep", LIMIT_C8, t, &o));
    let (o, t) = timed(c9_degenerate);
    passed.push(line(9, "Reptile degeneracy", LIMIT_C9, t, &o));

    let failed: Vec<usize> = passed.iter().enumerate().filter(|(_, p)| !**p).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "acceptance criteria failed: {failed:?}");
}
