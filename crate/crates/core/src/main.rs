use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use metaci::cinet::{NetKind, SeedRecord};
use metaci::experiment::{self, Format, Method, Scenario};
use metaci::meta;
use metaci::tasking::leave_one_out;
use metaci::{Error, Result};

#[derive(Parser)]
#[command(name = "metaci", version, about = "Meta-learned initialization for counterfactual regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the scenario's list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated subset of methods.
    #[arg(long, value_delimiter = ',')]
    method: Vec<String>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the population and task manifests for each seed.
    Generate(Common),
    /// Meta-train for one held-out task and write its checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        test_task: usize,
    },
    /// Full leave-one-out evaluation.
    Eval(Common),
    /// Merge report files and recompute aggregates.
    Report {
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
}

fn load(common: &Common) -> Result<Scenario> {
    let mut sc = Scenario::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        sc.seeds = vec![seed];
    }
    if !common.method.is_empty() {
        sc.methods = common.method.iter().map(|m| m.parse()).collect::<Result<Vec<Method>>>()?;
    }
    sc.validate()?;
    if let Some(n) = common.jobs {
        if n == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(sc)
}

fn generate(common: &Common) -> Result<()> {
    let sc = load(common)?;
    for &seed in &sc.seeds {
        let ctx = experiment::seed_context(&sc, seed)?;
        let dir = common.out.join(format!("seed-{seed}"));
        ctx.taskset.write_manifest(&dir.join("taskset.json"))?;
        for task in &ctx.taskset.tasks {
            task.dataset.write_csv(&dir.join(format!("task-{}.csv", task.id)), true)?;
        }
        info!("seed {seed}: {} tasks, checksum {}", ctx.taskset.omega(), ctx.taskset.checksum());
    }
    Ok(())
}

fn train(common: &Common, test_task: usize) -> Result<()> {
    let sc = load(common)?;
    if test_task >= sc.omega {
        return Err(Error::Config(format!("--test-task {test_task} out of range")));
    }
    let methods: Vec<Method> = sc.methods.iter().copied().filter(|m| m.is_meta()).collect();
    if methods.is_empty() {
        return Err(Error::Config("train needs MetaCI or MetaNN4 among the methods".into()));
    }
    for &seed in &sc.seeds {
        let ctx = experiment::seed_context(&sc, seed)?;
        let (train, test) = leave_one_out(&ctx.taskset, test_task)?;
        for &method in &methods {
            let kind = method.net().unwrap_or(NetKind::Ci);
            let rng = ctx.job_stream(test_task, method, 0);
            let run = experiment::run_meta(
                &ctx,
                &sc,
                kind,
                &sc.meta,
                sc.meta_grid.as_ref(),
                &train,
                test_task,
                &rng.substream(0),
            )?;
            let hash = run.config.inner.layout_hash(kind, test.dataset.n_features());
            let id = experiment::run_id(&sc.name, seed, test_task, method);
            let record = SeedRecord {
                seed,
                stream: rng.stream_id(),
            };
            meta::save_run(&common.out.join("checkpoints"), &id, &run.state, &run.config, &hash, record)?;
            info!("{id}: {} checkpoints", run.state.checkpoints.len());
        }
    }
    Ok(())
}

fn eval(common: &Common) -> Result<()> {
    let sc = load(common)?;
    let out = experiment::eval_to_dir(&sc, &common.out, common.format)?;
    for r in out.report.aggregate_rows() {
        info!(
            "{} {}: mean MAPE {} over {} runs",
            r.scenario,
            r.method,
            r.mape.map_or("-".to_string(), |m| m.to_string()),
            r.members
        );
    }
    Ok(())
}

fn report(inputs: &[PathBuf], out: &Path, format: Format) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Config("no input reports".into()));
    }
    let reports = inputs.iter().map(|p| experiment::read_report(p)).collect::<Result<Vec<_>>>()?;
    let merged = experiment::merge_reports(&reports);
    merged.validate()?;
    experiment::emit_report(&merged, format, out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Generate(c) => generate(c),
        Command::Train { common, test_task } => train(common, *test_task),
        Command::Eval(c) => eval(c),
        Command::Report { inputs, out, format } => report(inputs, out, *format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}
