use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use minflight::config::ScenarioFile;
use minflight::path::GuidingPath;
use minflight::planner::{plan_guiding_paths, read_paths, tracks_from_pairs, write_paths};
use minflight::policy::{load_checkpoint, save_checkpoint, ActorCritic, NetShape};
use minflight::progress::Stage;
use minflight::scenarios::{generate as generate_scenario, ScenarioKind};
use minflight::seed::derive_seed;
use minflight::trainer::{
    evaluate, train as run_training, write_trajectory_csv, Environment, EvalOptions, LogRow,
    TrainError, TrainStart,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Classify, CliError, CliResult};

const RESUME_STREAM: u64 = 0x5245_5355;
const LOG_FILE: &str = "train_log.csv";
const MANIFEST_FILE: &str = "manifest.json";
const FINAL_CHECKPOINT: &str = "final.ckpt";

fn load_scenario(path: &Path, seed: Option<u64>) -> CliResult<ScenarioFile> {
    let text =
        fs::read_to_string(path).config(|| format!("cannot read scenario {}", path.display()))?;
    let mut file =
        ScenarioFile::from_json(&text).config(|| format!("invalid scenario {}", path.display()))?;
    if let Some(s) = seed {
        file.seed = s;
    }
    Ok(file)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).other(|| format!("cannot create {}", dir.display()))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .other(|| format!("cannot create {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)
        .other(|| format!("cannot write {}", path.display()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn pair_file(dir: &Path, pair: usize) -> PathBuf {
    dir.join(format!("pair_{pair:03}.txt"))
}

pub fn plan(scenario: &Path, seed: Option<u64>, out: &Path) -> CliResult<()> {
    let file = load_scenario(scenario, seed)?;
    let esdf = file
        .build_esdf()
        .config(|| "cannot build the distance field".into())?;
    let plan = plan_guiding_paths(&file.scenario(), &esdf, &file.prm, file.seed)
        .map_err(|e| CliError::Plan(anyhow!(e).context("planning failed")))?;
    create_dir(out)?;
    let mut pairs = Vec::new();
    for (i, paths) in plan.pairs.iter().enumerate() {
        let path = pair_file(out, i);
        let mut w = create(&path)?;
        write_paths(&mut w, paths)?;
        w.flush()?;
        let lengths: Vec<f64> = paths.iter().map(GuidingPath::length).collect();
        println!("pair {i}: {} path(s), lengths {:?}", paths.len(), lengths);
        pairs.push(json!({ "pair": i, "paths": paths.len(), "lengths": lengths }));
    }
    let tracks: Vec<_> = plan
        .tracks
        .iter()
        .map(|t| json!({ "choice": t.choice, "length": t.path.length() }))
        .collect();
    write_json(
        &out.join("summary.json"),
        &json!({ "seed": file.seed, "pairs": pairs, "combinations": tracks }),
    )
}

/// Reads the pair files written by `plan` and rebuilds the track
/// combinations.
fn load_plan(file: &ScenarioFile, dir: &Path) -> CliResult<Vec<minflight::planner::Track>> {
    let n = file.scenario().targets().len();
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let path = pair_file(dir, i);
        let f = File::open(&path).config(|| format!("missing guiding paths {}", path.display()))?;
        let paths =
            read_paths(BufReader::new(f)).config(|| format!("cannot read {}", path.display()))?;
        if paths.is_empty() {
            return Err(CliError::Config(anyhow!(
                "{} holds no paths",
                path.display()
            )));
        }
        pairs.push(paths);
    }
    tracks_from_pairs(&pairs, file.prm.max_combinations)
        .config(|| "inconsistent guiding paths".into())
}

fn environment(file: &ScenarioFile, paths: &Path) -> CliResult<Environment> {
    let tracks = load_plan(file, paths)?;
    let esdf = file
        .build_esdf()
        .config(|| "cannot build the distance field".into())?;
    file.environment(esdf, tracks)
        .config(|| "cannot set up the environment".into())
}

fn read_model(path: &Path, shape: &NetShape) -> CliResult<ActorCritic<f32>> {
    let f = File::open(path).config(|| format!("cannot open checkpoint {}", path.display()))?;
    load_checkpoint(BufReader::new(f), Some(shape))
        .config(|| format!("cannot load checkpoint {}", path.display()))
}

/// Training position stored next to every checkpoint.
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointState {
    iteration: usize,
    env_steps: u64,
    stage: Stage,
}

fn state_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".state.json");
    PathBuf::from(s)
}

fn write_checkpoint(
    path: &Path,
    model: &ActorCritic<f32>,
    state: &CheckpointState,
) -> CliResult<()> {
    let mut w = create(path)?;
    save_checkpoint(model, &mut w).other(|| format!("cannot write {}", path.display()))?;
    w.flush()?;
    write_json(&state_path(path), state)
}

pub struct TrainArgs {
    pub scenario: PathBuf,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub paths: PathBuf,
    pub stage: Option<Stage>,
    pub resume: Option<PathBuf>,
    pub threads: Option<usize>,
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let mut file = load_scenario(&args.scenario, args.seed)?;
    if let Some(stage) = args.stage {
        file.train.start_stage = stage;
    }
    create_dir(&args.out)?;
    let log_path = args.out.join(LOG_FILE);
    let final_path = args.out.join(FINAL_CHECKPOINT);
    write_json(
        &args.out.join(MANIFEST_FILE),
        &json!({
            "tool": "minflight",
            "version": env!("CARGO_PKG_VERSION"),
            "seed": file.seed,
            "threads": args.threads,
            "config": file,
            "inputs": {
                "scenario": args.scenario,
                "paths": args.paths,
                "resume": args.resume,
            },
            "outputs": {
                "log": log_path,
                "final_checkpoint": final_path,
                "periodic_checkpoints": args.out.join("checkpoint_<iteration>.ckpt"),
            },
        }),
    )?;

    let env = environment(&file, &args.paths)?;
    let shape = NetShape::new(file.ppo.hidden_width);
    let (start, seed) = match &args.resume {
        Some(ckpt) => {
            let model = read_model(ckpt, &shape)?;
            let sp = state_path(ckpt);
            let text = fs::read_to_string(&sp)
                .config(|| format!("missing checkpoint state {}", sp.display()))?;
            let st: CheckpointState = serde_json::from_str(&text)
                .config(|| format!("invalid checkpoint state {}", sp.display()))?;
            let seed = derive_seed(file.seed, RESUME_STREAM, st.iteration as u64);
            let start = TrainStart {
                model,
                stage: st.stage,
                iteration: st.iteration,
                env_steps: st.env_steps,
            };
            (Some(start), seed)
        }
        None => (None, file.seed),
    };

    let append = args.resume.is_some() && log_path.exists();
    let log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .other(|| format!("cannot open {}", log_path.display()))?;
    let mut log = BufWriter::new(log);
    if !append {
        writeln!(log, "{}", LogRow::csv_header())?;
    }
    let interval = file.train.checkpoint_interval;
    let out_dir = args.out.clone();
    let result = run_training(
        &env,
        &file.train,
        &file.ppo,
        seed,
        start,
        &mut |row, model, outcome| {
            writeln!(log, "{}", row.csv_line())?;
            log.flush()?;
            if interval > 0 && row.iteration % interval == 0 {
                let path = out_dir.join(format!("checkpoint_{:06}.ckpt", row.iteration));
                let state = CheckpointState {
                    iteration: row.iteration,
                    env_steps: row.env_steps,
                    stage: outcome.stage,
                };
                write_checkpoint(&path, model, &state)
                    .map_err(|e| io::Error::other(e.to_string()))?;
            }
            Ok(())
        },
    );
    let outcome = match result {
        Ok(o) => o,
        Err(e @ TrainError::NonFinite { .. }) => {
            return Err(CliError::NonFinite(anyhow!(e).context(
                "non-finite loss or gradient; last good iteration is in the log",
            )))
        }
        Err(e @ TrainError::Config(_)) => return Err(CliError::Config(anyhow!(e))),
        Err(e) => return Err(CliError::Other(anyhow!(e))),
    };
    write_checkpoint(
        &final_path,
        &outcome.model,
        &CheckpointState {
            iteration: outcome.iterations,
            env_steps: outcome.env_steps,
            stage: outcome.stage,
        },
    )?;
    println!(
        "iterations {} env_steps {} stage {} switch {:?} slow_lap {:?} fast_lap {:?} reached_target {}",
        outcome.iterations,
        outcome.env_steps,
        outcome.stage,
        outcome.switch_iteration,
        outcome.slow_lap_time,
        outcome.fast_lap_time,
        outcome.reached_target
    );
    Ok(())
}

pub struct EvalArgs {
    pub scenario: PathBuf,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub paths: PathBuf,
    pub checkpoint: PathBuf,
    pub runs: usize,
    pub deterministic: bool,
    pub stage: Stage,
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let file = load_scenario(&args.scenario, args.seed)?;
    let env = environment(&file, &args.paths)?;
    let model = read_model(&args.checkpoint, &NetShape::new(file.ppo.hidden_width))?;
    let opts = EvalOptions {
        runs: args.runs,
        drag_randomization: !args.deterministic,
        seed: file.seed,
        max_steps: file.train.max_episode_steps,
        stage: args.stage,
        combo: 0,
        record_trajectories: true,
    };
    let (stats, runs) = evaluate(&model, &env, &opts);
    create_dir(&args.out)?;
    for (k, run) in runs.iter().enumerate() {
        let path = args.out.join(format!("run_{k:03}.csv"));
        let mut w = create(&path)?;
        write_trajectory_csv(&mut w, &run.trajectory)?;
        w.flush()?;
    }
    write_json(&args.out.join("stats.json"), &stats)?;
    println!(
        "{}",
        serde_json::to_string(&stats).expect("stats serialize")
    );
    Ok(())
}

pub fn export_esdf(scenario: &Path, out: &Path) -> CliResult<()> {
    let file = load_scenario(scenario, None)?;
    let esdf = file
        .build_esdf()
        .config(|| "cannot build the distance field".into())?;
    let mut w = create(out)?;
    esdf.write_to(&mut w)
        .other(|| format!("cannot write {}", out.display()))?;
    w.flush()?;
    Ok(())
}

fn required<'a>(arg: Option<&'a Path>, flag: &str, what: &str) -> CliResult<&'a Path> {
    arg.ok_or_else(|| CliError::Config(anyhow!("exporting {what} needs --{flag}")))
}

pub fn export_paths(scenario: &Path, paths: Option<&Path>, out: &Path) -> CliResult<()> {
    let file = load_scenario(scenario, None)?;
    let tracks = load_plan(&file, required(paths, "paths", "paths")?)?;
    let mut w = create(out)?;
    write_paths(&mut w, &[tracks[0].path.clone()])?;
    w.flush()?;
    Ok(())
}

pub fn export_trajectory(
    scenario: &Path,
    seed: Option<u64>,
    paths: Option<&Path>,
    checkpoint: Option<&Path>,
    out: &Path,
) -> CliResult<()> {
    let file = load_scenario(scenario, seed)?;
    let env = environment(&file, required(paths, "paths", "a trajectory")?)?;
    let model = read_model(
        required(checkpoint, "checkpoint", "a trajectory")?,
        &NetShape::new(file.ppo.hidden_width),
    )?;
    let opts = EvalOptions {
        runs: 1,
        seed: file.seed,
        max_steps: file.train.max_episode_steps,
        record_trajectories: true,
        ..EvalOptions::default()
    };
    let (_, runs) = evaluate(&model, &env, &opts);
    let mut w = create(out)?;
    write_trajectory_csv(&mut w, &runs[0].trajectory)?;
    w.flush()?;
    Ok(())
}

pub fn generate(kind: ScenarioKind, seed: u64, out: Option<&Path>) -> CliResult<()> {
    let text = generate_scenario(kind, seed).to_json();
    match out {
        Some(path) => {
            let mut w = create(path)?;
            writeln!(w, "{text}")?;
            w.flush()?;
        }
        None => println!("{text}"),
    }
    Ok(())
}
