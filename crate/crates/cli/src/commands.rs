use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use lagot::bench::{
    generate, ground_truth_metric, heldout_seed, read_dataset, w2_marginal_error, write_dataset, DatasetSpec, Manifest,
};
use lagot::lagrangian::{LagrangianSpec, MetricField};
use lagot::measure::EmpiricalMeasure;
use lagot::metric_learn::{alignment_score, evaluation_grid, write_metric_csv, MetricLearnState};
use lagot::nlot::NlotState;
use lagot::spline::{write_paths_csv, PathSpline};
use serde_json::{json, Map, Value};

use crate::config::{RunConfig, Task};
use crate::error::{CliError, CliResult};
use crate::rundir::{RunDir, METRIC_DUMP_FILE};
use crate::svg::Figure;

/// Translation used by the `translation` dataset.
const TRANSLATION: [f64; 2] = [2.0, 0.0];

pub fn gen_data(setting: &str, n: Option<usize>, seed: u64, out: &Path) -> CliResult<PathBuf> {
    let n = n.unwrap_or_else(|| lagot::bench::default_samples(setting));
    if n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let spec = DatasetSpec::new(setting, n, seed);
    let measures = generate(&spec).map_err(|e| match e {
        lagot::Error::UnknownDataset(_) => CliError::Usage(e.to_string()),
        e => e.into(),
    })?;
    write_dataset(out, &spec, &measures)?;
    Ok(out.join("manifest.json"))
}

/// Flags shared by `train` and `train-metric`.
#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub sets: Vec<String>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Stop once this many steps (or rounds) are done, leaving a resumable run.
    pub stop_after: Option<usize>,
}

/// Resolved configuration and run directory; `true` when resuming.
fn prepare(args: &TrainArgs, task: Task) -> CliResult<(RunConfig, RunDir, bool)> {
    if let Some(run) = &args.resume {
        if args.config.is_some() || !args.sets.is_empty() || args.data.is_some() || args.out.is_some() {
            return Err(CliError::Usage("--resume takes its configuration from the run directory".into()));
        }
        let dir = RunDir::open(run)?;
        let cfg = dir.read_config()?;
        if cfg.task() != task {
            return Err(CliError::Usage(format!("{} holds a `{}` run", run.display(), cfg.task().name())));
        }
        return Ok((cfg, dir, true));
    }
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path, task)?,
        None => RunConfig::defaults(task),
    };
    cfg.set("task", task.name())?;
    for pair in &args.sets {
        cfg.set_pair(pair)?;
    }
    if let Some(d) = &args.data {
        cfg.set("data_dir", &d.to_string_lossy())?;
    }
    if let Some(o) = &args.out {
        cfg.set("out_dir", &o.to_string_lossy())?;
    }
    if cfg.task() != task {
        return Err(CliError::Usage(format!("config sets task = {}", cfg.get("task"))));
    }
    if cfg.get("data_dir").is_empty() {
        return Err(CliError::Usage("no data directory: pass --data or set data_dir".into()));
    }
    let dir = RunDir::create(Path::new(cfg.get("out_dir")))?;
    if dir.has_checkpoint() {
        return Err(CliError::Usage(format!(
            "{} already holds a run; use --resume or another --out",
            dir.root.display()
        )));
    }
    Ok((cfg, dir, false))
}

fn load_data(cfg: &RunConfig) -> CliResult<(Manifest, Vec<EmpiricalMeasure>)> {
    Ok(read_dataset(Path::new(cfg.get("data_dir")))?)
}

fn pair_indices(cfg: &RunConfig, k: usize) -> CliResult<(usize, usize)> {
    let (s, t) = (cfg.count("source"), cfg.count("target"));
    if s >= k || t >= k {
        return Err(CliError::Runtime(format!("source {s} / target {t} out of range for {k} measures")));
    }
    Ok((s, t))
}

fn finite(name: &str, at: u64, v: f64) -> lagot::Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(lagot::Error::NonFinite(format!("{name} at step {at}")))
    }
}

fn head(m: &EmpiricalMeasure, count: usize) -> CliResult<EmpiricalMeasure> {
    let n = count.min(m.len()).max(1);
    Ok(EmpiricalMeasure::new(m.dim(), m.points()[..n * m.dim()].to_vec())?)
}

fn check_stop(stop_after: Option<usize>, budget: usize) -> u64 {
    stop_after.map_or(budget, |s| s.min(budget)) as u64
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let (cfg, dir, resumed) = prepare(args, Task::Nlot)?;
    let _lock = dir.lock()?;
    if !resumed {
        dir.write_config(&cfg)?;
    }
    let (manifest, measures) = load_data(&cfg)?;
    let (si, ti) = pair_indices(&cfg, measures.len())?;
    let lag = cfg.lagrangian();
    let ncfg = cfg.nlot_config();
    let mut state = NlotState::new(manifest.d, &ncfg)?;
    if resumed && dir.has_checkpoint() {
        state.load(&dir.checkpoint())?;
    } else {
        dir.save_checkpoint(|p| state.save(p))?;
    }
    dir.truncate_log("step", state.step)?;
    let budget = ncfg.steps;
    let stop = check_stop(args.stop_after, budget);
    let (every, log_every) = (cfg.count("checkpoint_every").max(1) as u64, cfg.count("log_every").max(1) as u64);
    let mut log = dir.log()?;
    let mut last = None;
    state.train(&measures[si], &measures[ti], &lag, stop.saturating_sub(state.step) as usize, |s, r| {
        finite("dual loss", r.step, r.dual_loss)?;
        if s.step % log_every == 0 || s.step == budget as u64 {
            log.append(&serde_json::to_value(r)?)?;
        }
        if s.step % every == 0 {
            dir.save_checkpoint(|p| s.save(p))?;
        }
        last = Some(r.clone());
        Ok(())
    })?;
    dir.save_checkpoint(|p| state.save(p))?;
    if budget == 0 {
        return Ok(());
    }
    if state.step < budget as u64 {
        eprintln!("stopped at step {}; continue with --resume {}", state.step, dir.root.display());
        return Ok(());
    }
    let mut summary = Map::new();
    summary.insert("steps".into(), json!(state.step));
    if let Some(r) = last {
        summary.insert("dual_loss".into(), json!(r.dual_loss));
        summary.insert("mean_conjugate_residual".into(), json!(r.mean_conjugate_residual));
        summary.insert("mean_path_energy".into(), json!(r.mean_path_energy));
    }
    summary.extend(evaluate_nlot(&cfg, &manifest, &state, &lag, (si, ti))?);
    dir.update_summary(summary)
}

fn heldout(cfg: &RunConfig, manifest: &Manifest) -> CliResult<Vec<EmpiricalMeasure>> {
    let n = match cfg.count("eval.samples") {
        0 => manifest.n,
        n => n,
    };
    Ok(generate(&DatasetSpec::new(&manifest.name, n, heldout_seed(manifest.seed)))?)
}

/// W2 between the push-forward of fresh source samples and fresh target
/// samples, plus the map error on the translation dataset.
fn evaluate_nlot(
    cfg: &RunConfig,
    manifest: &Manifest,
    state: &NlotState,
    lag: &LagrangianSpec,
    (si, ti): (usize, usize),
) -> CliResult<Map<String, Value>> {
    let held = heldout(cfg, manifest)?;
    let pushed = state.push_forward(lag, &held[si])?;
    let mut out = Map::new();
    out.insert("w2_error".into(), json!(w2_marginal_error(&pushed, &held[ti])?));
    out.insert("eval_samples".into(), json!(pushed.len()));
    if manifest.name == "translation" {
        let err = (0..pushed.len())
            .map(|i| {
                let (x, y) = (held[si].point(i), pushed.point(i));
                (y[0] - x[0] - TRANSLATION[0]).hypot(y[1] - x[1] - TRANSLATION[1])
            })
            .sum::<f64>()
            / pushed.len() as f64;
        out.insert("translation_error".into(), json!(err));
    }
    Ok(out)
}

pub fn train_metric(args: &TrainArgs) -> CliResult<()> {
    let (cfg, dir, resumed) = prepare(args, Task::Metric)?;
    let _lock = dir.lock()?;
    if !resumed {
        dir.write_config(&cfg)?;
    }
    let (manifest, measures) = load_data(&cfg)?;
    let mcfg = cfg.metric_config();
    let mut state = MetricLearnState::new(&measures, &mcfg)?;
    if resumed && dir.has_checkpoint() {
        state.load(&dir.checkpoint())?;
    } else {
        dir.save_checkpoint(|p| state.save(p))?;
    }
    dir.truncate_log("round", state.round)?;
    let budget = mcfg.rounds;
    let stop = check_stop(args.stop_after, budget);
    let (every, log_every) = (cfg.count("checkpoint_every").max(1) as u64, cfg.count("log_every").max(1) as u64);
    let truth = ground_truth_metric(&manifest.name);
    let grid = evaluation_grid(&measures, cfg.count("eval.grid"));
    let mut log = dir.log()?;
    let mut last = None;
    let uf = mcfg.update_frequency as u64;
    state.train(&measures, stop.saturating_sub(state.round) as usize, |s, r| {
        let dual = r.dual_losses.iter().sum::<f64>() / r.dual_losses.len() as f64;
        finite("dual loss", r.round, dual)?;
        finite("metric energy", r.round, r.metric_energy)?;
        let mut record = json!({
            "round": r.round,
            "step": (r.round + 1) * uf,
            "dual_loss": dual,
            "dual_losses": r.dual_losses,
            "mean_conjugate_residual": r.mean_conjugate_residual,
            "mean_path_energy": r.metric_energy,
        });
        if let Some(t) = &truth {
            record["alignment_score"] = json!(alignment_score(t, &s.metric_field(), &grid)?);
        }
        if s.round % log_every == 0 || s.round == budget as u64 {
            log.append(&record)?;
        }
        if s.round % every == 0 {
            dir.save_checkpoint(|p| s.save(p))?;
        }
        last = Some(record);
        Ok(())
    })?;
    dir.save_checkpoint(|p| state.save(p))?;
    if budget == 0 {
        return Ok(());
    }
    if state.round < budget as u64 {
        eprintln!("stopped at round {}; continue with --resume {}", state.round, dir.root.display());
        return Ok(());
    }
    let mut summary = Map::new();
    summary.insert("rounds".into(), json!(state.round));
    if let Some(Value::Object(r)) = last {
        for k in ["dual_loss", "mean_conjugate_residual", "mean_path_energy"] {
            if let Some(v) = r.get(k) {
                summary.insert(k.into(), v.clone());
            }
        }
    }
    summary.extend(evaluate_metric(&cfg, &dir, &manifest, &measures, &state)?);
    dir.update_summary(summary)
}

fn evaluate_metric(
    cfg: &RunConfig,
    dir: &RunDir,
    manifest: &Manifest,
    measures: &[EmpiricalMeasure],
    state: &MetricLearnState,
) -> CliResult<Map<String, Value>> {
    let grid = evaluation_grid(measures, cfg.count("eval.grid"));
    let learned = state.metric_field();
    let path = dir.path(METRIC_DUMP_FILE);
    let mut out = BufWriter::new(File::create(&path).map_err(|e| CliError::io(&path, e))?);
    write_metric_csv(&mut out, &learned, &grid)?;
    let mut summary = Map::new();
    if let Some(truth) = ground_truth_metric(&manifest.name) {
        summary.insert("alignment_score".into(), json!(alignment_score(&truth, &learned, &grid)?));
    }
    Ok(summary)
}

/// A finished or interrupted run loaded from disk.
enum Loaded {
    Nlot { state: NlotState, lag: LagrangianSpec, pair: (usize, usize) },
    Metric { state: Box<MetricLearnState> },
}

fn load_run(dir: &RunDir, cfg: &RunConfig) -> CliResult<(Manifest, Vec<EmpiricalMeasure>, Loaded)> {
    if !dir.has_checkpoint() {
        return Err(CliError::Runtime(format!("{} has no checkpoint", dir.root.display())));
    }
    let (manifest, measures) = load_data(cfg)?;
    let loaded = match cfg.task() {
        Task::Nlot => {
            let mut state = NlotState::new(manifest.d, &cfg.nlot_config())?;
            state.load(&dir.checkpoint())?;
            let pair = pair_indices(cfg, measures.len())?;
            Loaded::Nlot { state, lag: cfg.lagrangian(), pair }
        }
        Task::Metric => {
            let mut state = MetricLearnState::new(&measures, &cfg.metric_config())?;
            state.load(&dir.checkpoint())?;
            Loaded::Metric { state: Box::new(state) }
        }
    };
    Ok((manifest, measures, loaded))
}

pub fn eval(run: &Path, samples: Option<usize>) -> CliResult<()> {
    let dir = RunDir::open(run)?;
    let _lock = dir.lock()?;
    let mut cfg = dir.read_config()?;
    if let Some(n) = samples {
        cfg.set("eval.samples", &n.to_string())?;
    }
    let (manifest, measures, loaded) = load_run(&dir, &cfg)?;
    let summary = match &loaded {
        Loaded::Nlot { state, lag, pair } => evaluate_nlot(&cfg, &manifest, state, lag, *pair)?,
        Loaded::Metric { state } => evaluate_metric(&cfg, &dir, &manifest, &measures, state)?,
    };
    println!("{}", serde_json::to_string(&Value::Object(summary.clone()))?);
    dir.update_summary(summary)
}

/// Export options; `None` falls back to the run configuration.
#[derive(Clone, Debug, Default)]
pub struct ExportArgs {
    pub count: Option<usize>,
    pub samples: Option<usize>,
    pub fine_tune: Option<usize>,
}

fn transport_paths(
    cfg: &RunConfig,
    measures: &[EmpiricalMeasure],
    loaded: &Loaded,
    args: &ExportArgs,
) -> CliResult<Vec<PathSpline>> {
    let count = args.count.unwrap_or_else(|| cfg.count("export.count"));
    let fine_tune = args.fine_tune.unwrap_or_else(|| cfg.count("export.fine_tune"));
    let mut paths = Vec::new();
    match loaded {
        Loaded::Nlot { state, lag, pair } => {
            paths = state.transport_paths(lag, &head(&measures[pair.0], count)?, fine_tune)?.0;
        }
        Loaded::Metric { state } => {
            for (i, pair) in state.pairs.iter().enumerate() {
                paths.extend(pair.transport_paths(&state.lag, &head(&measures[i], count)?, fine_tune)?.0);
            }
        }
    }
    Ok(paths)
}

pub fn export_paths(run: &Path, out: Option<&Path>, args: &ExportArgs) -> CliResult<PathBuf> {
    let dir = RunDir::open(run)?;
    let cfg = dir.read_config()?;
    let (_, measures, loaded) = load_run(&dir, &cfg)?;
    let paths = transport_paths(&cfg, &measures, &loaded, args)?;
    let path = out.map_or_else(|| dir.path("paths.csv"), Path::to_path_buf);
    let mut file = BufWriter::new(File::create(&path).map_err(|e| CliError::io(&path, e))?);
    write_paths_csv(&mut file, &paths, args.samples.unwrap_or_else(|| cfg.count("export.samples")))?;
    Ok(path)
}

fn as_pairs(m: &EmpiricalMeasure, limit: usize) -> Vec<[f64; 2]> {
    m.points().chunks(m.dim()).take(limit).map(|p| [p[0], p.get(1).copied().unwrap_or(0.0)]).collect()
}

const PLOT_SAMPLES: usize = 512;
const PLOT_PATHS: usize = 24;

pub fn plot(run: &Path, out: Option<&Path>) -> CliResult<PathBuf> {
    let dir = RunDir::open(run)?;
    let cfg = dir.read_config()?;
    let (_, measures, loaded) = load_run(&dir, &cfg)?;
    let paths = transport_paths(&cfg, &measures, &loaded, &ExportArgs { count: Some(PLOT_PATHS), ..Default::default() })?;
    let traces: Vec<Vec<[f64; 2]>> = paths
        .iter()
        .map(|p| {
            p.sample(48).map(|s| s.into_iter().map(|(_, x)| [x[0], x.get(1).copied().unwrap_or(0.0)]).collect())
        })
        .collect::<lagot::Result<_>>()?;
    let mut frame: Vec<[f64; 2]> = measures.iter().flat_map(|m| as_pairs(m, PLOT_SAMPLES)).collect();
    frame.extend(traces.iter().flatten());
    let mut fig = Figure::framing(&frame, 640.0);
    match &loaded {
        Loaded::Nlot { state, lag, pair } => {
            match lag {
                LagrangianSpec::KineticMinusPotential(p) => fig.contours(|x| p.value(&x).ok(), 8, 80),
                LagrangianSpec::Metric(m) => fig.glyphs(m, 16),
                LagrangianSpec::Kinetic => {}
            }
            let src = head(&measures[pair.0], PLOT_SAMPLES)?;
            let pushed = state.push_forward(lag, &head(&src, PLOT_SAMPLES / 2)?)?;
            fig.points(&as_pairs(&src, PLOT_SAMPLES), "#1f77b4", 1.6, 0.5);
            fig.points(&as_pairs(&measures[pair.1], PLOT_SAMPLES), "#d62728", 1.6, 0.5);
            fig.points(&as_pairs(&pushed, PLOT_SAMPLES), "#2ca02c", 1.6, 0.7);
        }
        Loaded::Metric { state } => {
            let learned: MetricField = state.metric_field();
            fig.glyphs(&learned, 16);
            let k = measures.len().max(2);
            for (i, m) in measures.iter().enumerate() {
                let hue = 300.0 * i as f64 / (k - 1) as f64;
                fig.points(&as_pairs(m, PLOT_SAMPLES), &format!("hsl({hue:.0},70%,45%)"), 1.4, 0.6);
            }
        }
    }
    for t in &traces {
        fig.polyline(t, "#444444", 0.8, 0.7);
    }
    let path = out.map_or_else(|| dir.path("plot.svg"), Path::to_path_buf);
    std::fs::write(&path, fig.finish()).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}
