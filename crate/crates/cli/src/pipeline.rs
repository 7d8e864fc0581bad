//! Pipeline stages. Each stage reads its inputs from the run directory (or
//! explicit paths), writes its outputs there and records them in the
//! manifest.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use sbi_vfm::eval::{c2st, check_one_hot, C2stReport, RunEvaluation};
use sbi_vfm::flowmatch::{euler_sample, train, Dataset, FlowModel, TrainReport};
use sbi_vfm::io::{file_sha256, SampleSet, SampleSidecar, SampleSource, SimDataset, SAMPLES_FORMAT};
use sbi_vfm::rng::split_index;
use sbi_vfm::tasks::Task;

use crate::config::ExperimentConfig;
use crate::error::{require_file, CliError, CliResult};
use crate::manifest::{now_unix, RunManifest};

pub const REPORT_FILE: &str = "report.json";
pub const RESULTS_FILE: &str = "results.csv";

/// Fixed layout of one experiment cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn train_data(&self) -> PathBuf {
        self.root.join("data").join("train.json")
    }

    pub fn holdout(&self) -> PathBuf {
        self.root.join("data").join("holdout.json")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model.pawf")
    }

    pub fn loss_csv(&self) -> PathBuf {
        self.root.join("loss.csv")
    }

    pub fn generated(&self) -> PathBuf {
        self.root.join("samples").join("model.json")
    }

    pub fn reference(&self) -> PathBuf {
        self.root.join("samples").join("reference.json")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join(REPORT_FILE)
    }

    fn ensure(&self, file: &Path) -> CliResult<()> {
        if let Some(parent) = file.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::from_io(parent, e))?;
        }
        Ok(())
    }
}

/// Bookkeeping shared by every stage: write the resolved config, then log
/// the stage and hash its outputs into the manifest.
fn finish_stage(cfg: &ExperimentConfig, run: &RunDir, stage: &str, started: f64, mut files: Vec<PathBuf>) -> CliResult<()> {
    let config_path = run.config();
    run.ensure(&config_path)?;
    fs::write(&config_path, cfg.snapshot()).map_err(|e| CliError::from_io(&config_path, e))?;
    files.push(config_path);
    let mut manifest = RunManifest::load_or_new(&run.root, cfg)?;
    manifest.record(&run.root, stage, cfg.stage_seed(stage), started, &files)?;
    manifest.save(&run.root)
}

/// Training set of `n` (default `n_sims`) pairs plus `n_obs` held-out
/// observations, each from its own stage stream.
pub fn cmd_simulate(cfg: &ExperimentConfig, run: &RunDir, n: Option<usize>) -> CliResult<Vec<PathBuf>> {
    let started = now_unix();
    let task_cfg = cfg.task_config()?;
    let task = Task::new(&task_cfg)?;
    let mut files = Vec::new();
    for (path, count, stage) in [
        (run.train_data(), n.unwrap_or(cfg.n_sims), "simulate"),
        (run.holdout(), cfg.n_obs, "holdout"),
    ] {
        let seed = cfg.stage_seed(stage);
        let (theta, x) = task.simulate(count, seed)?;
        run.ensure(&path)?;
        files.extend(SimDataset { task: task_cfg, seed, theta, x }.write(&path)?);
    }
    finish_stage(cfg, run, "simulate", started, files.clone())?;
    Ok(files)
}

pub fn cmd_train(cfg: &ExperimentConfig, run: &RunDir, data: Option<&Path>) -> CliResult<TrainReport> {
    let started = now_unix();
    let data_path = data.map(Path::to_path_buf).unwrap_or_else(|| run.train_data());
    require_file(&data_path)?;
    let ds = SimDataset::read(&data_path)?;
    let task_cfg = cfg.task_config()?;
    if ds.task != task_cfg {
        return Err(CliError::Config(format!(
            "{} was simulated for a different task than the config describes",
            data_path.display()
        )));
    }
    let task = Task::new(&task_cfg)?;
    let mut model = FlowModel::new(
        cfg.method,
        task.support(),
        task.x_dim(),
        cfg.hidden,
        cfg.blocks,
        cfg.activation(),
        cfg.stage_seed("init"),
    )?;
    let report = train(&mut model, &Dataset::new(ds.theta, ds.x)?, &cfg.train_config())?;
    // The checkpoint stores f32; keep the in-memory model identical to it.
    model.params.round_to_f32();
    let (ckpt, csv) = (run.checkpoint(), run.loss_csv());
    run.ensure(&ckpt)?;
    model.save(&ckpt)?;
    fs::write(&csv, report.to_csv()).map_err(|e| CliError::from_io(&csv, e))?;
    finish_stage(cfg, run, "train", started, vec![ckpt, csv])?;
    Ok(report)
}

#[derive(Clone, Debug, Default)]
pub struct SampleArgs {
    pub checkpoint: Option<PathBuf>,
    pub observations: Option<PathBuf>,
    pub n: Option<usize>,
    pub steps: Option<usize>,
}

fn read_observations(path: &Path) -> CliResult<SimDataset> {
    require_file(path)?;
    Ok(SimDataset::read(path)?)
}

fn observation_rows(ds: &SimDataset) -> Vec<Vec<f64>> {
    ds.x.outer_iter().map(|r| r.to_vec()).collect()
}

/// Model posterior draws for every held-out observation.
pub fn cmd_sample(cfg: &ExperimentConfig, run: &RunDir, args: &SampleArgs) -> CliResult<PathBuf> {
    let started = now_unix();
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| run.checkpoint());
    require_file(&ckpt)?;
    let model = FlowModel::load(&ckpt)?;
    let obs = read_observations(&args.observations.clone().unwrap_or_else(|| run.holdout()))?;
    if obs.x.ncols() != model.x_dim() {
        return Err(sbi_vfm::Error::Shape {
            context: "observation dimension of checkpoint",
            expected: model.x_dim(),
            actual: obs.x.ncols(),
        }
        .into());
    }
    let (n, steps) = (args.n.unwrap_or(cfg.n_posterior), args.steps.unwrap_or(cfg.steps));
    let seed = cfg.stage_seed("sample");
    let observations = observation_rows(&obs);
    let blocks = observations
        .iter()
        .enumerate()
        .map(|(i, x)| euler_sample(&model, x, n, steps, split_index(seed, "observation", i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let meta = SampleSidecar {
        format: SAMPLES_FORMAT.into(),
        source: SampleSource::Model,
        shape: [observations.len(), n, model.theta_dim()],
        seed,
        n_steps: Some(steps),
        model_hash: Some(model.content_hash()?),
        method: Some(model.method().as_str().into()),
        task: Some(obs.task),
        observations,
        data_file: String::new(),
    };
    let out = run.generated();
    run.ensure(&out)?;
    let files = SampleSet::new(meta, blocks)?.write(&out)?;
    finish_stage(cfg, run, "sample", started, files)?;
    Ok(out)
}

/// Exact posterior draws for every held-out observation.
pub fn cmd_reference(cfg: &ExperimentConfig, run: &RunDir, observations: Option<&Path>, n: Option<usize>) -> CliResult<PathBuf> {
    let started = now_unix();
    let obs = read_observations(&observations.map(Path::to_path_buf).unwrap_or_else(|| run.holdout()))?;
    let task = Task::new(&obs.task)?;
    let n = n.unwrap_or(cfg.n_posterior);
    let seed = cfg.stage_seed("reference");
    let observations = observation_rows(&obs);
    let blocks = observations
        .iter()
        .enumerate()
        .map(|(i, x)| task.reference(x, n, split_index(seed, "observation", i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let meta = SampleSidecar {
        format: SAMPLES_FORMAT.into(),
        source: SampleSource::Reference,
        shape: [observations.len(), n, task.theta_dim()],
        seed,
        n_steps: None,
        model_hash: None,
        method: None,
        task: Some(obs.task),
        observations,
        data_file: String::new(),
    };
    let out = run.reference();
    run.ensure(&out)?;
    let files = SampleSet::new(meta, blocks)?.write(&out)?;
    finish_stage(cfg, run, "reference", started, files)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub method: String,
    pub n_sims: usize,
    pub depth: usize,
    pub hidden: usize,
    /// Mean C2ST across observations.
    pub score: f64,
    pub sd: f64,
    pub per_observation: Vec<C2stReport>,
    pub model_hash: Option<String>,
    pub reference_sha256: String,
    pub generated_sha256: String,
    pub seed: u64,
}

/// C2ST of generated against reference draws, observation by observation.
pub fn cmd_evaluate(cfg: &ExperimentConfig, run: &RunDir, reference: Option<&Path>, generated: Option<&Path>) -> CliResult<EvalReport> {
    let started = now_unix();
    let ref_path = reference.map(Path::to_path_buf).unwrap_or_else(|| run.reference());
    let gen_path = generated.map(Path::to_path_buf).unwrap_or_else(|| run.generated());
    require_file(&ref_path)?;
    require_file(&gen_path)?;
    let (r, g) = (SampleSet::read(&ref_path)?, SampleSet::read(&gen_path)?);
    let ([mr, _, dr], [mg, _, dg]) = (r.meta.shape, g.meta.shape);
    if mr != mg || dr != dg {
        return Err(CliError::Config(format!(
            "sample files disagree: reference shape {:?}, generated shape {:?}",
            r.meta.shape, g.meta.shape
        )));
    }
    if r.meta.observations != g.meta.observations {
        return Err(CliError::Config("sample files were drawn for different observations".into()));
    }
    let support = match g.meta.task.or(r.meta.task) {
        Some(t) => Some(Task::new(&t)?.support()),
        None => None,
    };
    let seed = cfg.stage_seed("evaluate");
    let mut reports = Vec::with_capacity(mr);
    for i in 0..mr {
        let (rb, gb): (Array2<f64>, Array2<f64>) = (r.block(i), g.block(i));
        if let Some(s) = &support {
            check_one_hot(s, gb.view())?;
        }
        reports.push(c2st(rb.view(), gb.view(), &cfg.c2st_config(split_index(seed, "c2st", i as u64)))?);
    }
    let agg = RunEvaluation::from_reports(reports);
    let report = EvalReport {
        task: cfg.task.to_string(),
        method: cfg.method.as_str().into(),
        n_sims: cfg.n_sims,
        depth: cfg.blocks,
        hidden: cfg.hidden,
        score: agg.mean,
        sd: agg.sd,
        per_observation: agg.per_observation,
        model_hash: g.meta.model_hash.clone(),
        reference_sha256: file_sha256(&ref_path)?,
        generated_sha256: file_sha256(&gen_path)?,
        seed,
    };
    let out = run.report();
    let text = serde_json::to_string_pretty(&report).map_err(sbi_vfm::Error::from)? + "\n";
    fs::write(&out, text).map_err(|e| CliError::from_io(&out, e))?;
    finish_stage(cfg, run, "evaluate", started, vec![out])?;
    Ok(report)
}

fn find_reports(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::from_io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| CliError::from_io(dir, e)))
        .collect::<CliResult<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_reports(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == REPORT_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

/// Collect every `report.json` under `dir` into one `results.csv` there,
/// one row per cell. Returns the CSV path and the row count.
pub fn cmd_report(dir: &Path) -> CliResult<(PathBuf, usize)> {
    if !dir.is_dir() {
        return Err(CliError::NotFound(dir.to_path_buf()));
    }
    let mut paths = Vec::new();
    find_reports(dir, &mut paths)?;
    let mut csv = String::from("task,method,n_sims,depth,hidden,score\n");
    for p in &paths {
        let text = fs::read_to_string(p).map_err(|e| CliError::from_io(p, e))?;
        let r: EvalReport =
            serde_json::from_str(&text).map_err(|e| sbi_vfm::Error::Format(format!("{}: {e}", p.display())))?;
        csv.push_str(&format!("{},{},{},{},{},{:.6}\n", r.task, r.method, r.n_sims, r.depth, r.hidden, r.score));
    }
    let out = dir.join(RESULTS_FILE);
    fs::write(&out, csv).map_err(|e| CliError::from_io(&out, e))?;
    Ok((out, paths.len()))
}

/// Every stage in order for one cell.
pub fn cmd_run(cfg: &ExperimentConfig, run: &RunDir) -> CliResult<EvalReport> {
    cmd_simulate(cfg, run, None)?;
    cmd_train(cfg, run, None)?;
    cmd_sample(cfg, run, &SampleArgs::default())?;
    cmd_reference(cfg, run, None, None)?;
    cmd_evaluate(cfg, run, None, None)
}
