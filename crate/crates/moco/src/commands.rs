//! Subcommand implementations. Each command writes its resolved
//! configuration next to its outputs so that it can be rerun with
//! `--config`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use moco_core::decomposition::{das_dennis_weights, ScalarizationConfig, WeightVector};
use moco_core::inference::{check_compatible, solve_front, summarize, EvalReport, FrontOptions};
use moco_core::model::PolicyParams;
use moco_core::pareto::{normalized_hv, HvFrame};
use moco_core::problems::{generate, Instance, Problem};
use moco_core::rng::{stream_rng, Stream};
use moco_core::training::{variance_comparison, StepRecord, TrainConfig, Trainer, VarianceLog};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{MocoError, Result};
use crate::formats::{
    front_to_csv, hv_report, routing_header, routing_row, to_json_pretty, variance_csv, weights_to_csv,
    write_file, write_instances, EvalReportJson, MetricsWriter,
};
use crate::gradcheck::{self, CheckRow, GradcheckConfig};

pub const CONFIG_FILE: &str = "config.json";

fn write_config<T: Serialize>(out: &Path, value: &T) -> Result<()> {
    write_file(&out.join(CONFIG_FILE), to_json_pretty(value).as_bytes())
}

// -------------------------------------------------------------------------
// gen

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub problem: Problem,
    pub n: usize,
    pub kappa: usize,
    pub count: usize,
    pub seed: u64,
}

pub fn generate_dataset(cfg: &GenConfig) -> Result<Vec<Instance>> {
    let mut rng = stream_rng(cfg.seed, Stream::Dataset, 0);
    Ok((0..cfg.count).map(|_| generate(cfg.problem, cfg.n, cfg.kappa, &mut rng)).collect::<moco_core::Result<_>>()?)
}

/// Writes `instances.jsonl`; returns its path.
pub fn cmd_gen(cfg: &GenConfig, out: &Path) -> Result<PathBuf> {
    if !cfg.problem.supports(cfg.kappa) {
        return Err(MocoError::Usage(format!("{} does not support kappa = {}", cfg.problem, cfg.kappa)));
    }
    let instances = generate_dataset(cfg)?;
    let path = out.join("instances.jsonl");
    let header = format!(
        "problem={} n={} kappa={} count={} seed={}",
        cfg.problem, cfg.n, cfg.kappa, cfg.count, cfg.seed
    );
    write_instances(&path, &header, &instances)?;
    write_config(out, cfg)?;
    Ok(path)
}

// -------------------------------------------------------------------------
// weights

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    pub kappa: usize,
    pub h: usize,
}

pub fn cmd_weights(cfg: &WeightsConfig, out: &Path) -> Result<PathBuf> {
    if cfg.h == 0 || cfg.kappa == 0 {
        return Err(MocoError::Usage("kappa and H must be at least 1".into()));
    }
    let weights = das_dennis_weights(cfg.kappa, cfg.h)?;
    let path = out.join("weights.csv");
    write_file(&path, weights_to_csv(&weights).as_bytes())?;
    write_config(out, cfg)?;
    Ok(path)
}

// -------------------------------------------------------------------------
// train

pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Trains and writes `checkpoint.bin`, `metrics.csv` and `routing.csv`.
/// On a numerical failure the pre-step parameters and the error are saved
/// as `failure.bin` and `failure.txt` before the error is returned.
pub fn cmd_train(cfg: &TrainConfig, out: &Path, progress: bool) -> Result<TrainOutcome> {
    cfg.validate().map_err(|e| MocoError::Usage(format!("config: {e}")))?;
    std::fs::create_dir_all(out).map_err(|e| MocoError::io(out, e))?;
    write_config(out, cfg)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let metrics_path = out.join("metrics.csv");
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    let mut routing = vec![routing_header(cfg.model.n_ff_experts)];
    let start = Instant::now();
    let mut sink_err = None;
    let result = trainer.run(|r| {
        let wall_ms = start.elapsed().as_millis() as u64;
        if let Err(e) = metrics.line(&crate::formats::metrics_row(r, wall_ms)) {
            sink_err = Some(e);
            return Err(moco_core::Error::Invalid("metrics sink failed".into()));
        }
        routing.push(routing_row(r));
        if progress {
            if let Some(hv) = r.validation_hv {
                eprintln!("step {:>6}  {}  validation hv {hv:.4}  {wall_ms} ms", r.step, r.algorithm);
            }
        }
        Ok(())
    });
    metrics.finish()?;
    write_file(&out.join("routing.csv"), (routing.join("\n") + "\n").as_bytes())?;
    let records = match result {
        Ok(r) => r,
        Err(e) => {
            if let Some(s) = sink_err {
                return Err(s);
            }
            if matches!(e, moco_core::Error::NonFinite(_)) {
                checkpoint::save(&out.join("failure.bin"), trainer.params())?;
                let msg = format!("step {}: {e}\n", trainer.step() + 1);
                write_file(&out.join("failure.txt"), msg.as_bytes())?;
            }
            return Err(e.into());
        }
    };
    let ckpt = out.join("checkpoint.bin");
    checkpoint::save(&ckpt, trainer.params())?;
    Ok(TrainOutcome { records, checkpoint: ckpt, metrics: metrics_path })
}

// -------------------------------------------------------------------------
// eval

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub weights: PathBuf,
    /// Defaults to the reference-point table entry for the dataset.
    #[serde(default)]
    pub frame: Option<HvFrame>,
    #[serde(default)]
    pub hv_ref: Option<f64>,
    #[serde(default)]
    pub augment: bool,
    #[serde(default)]
    pub pool: bool,
    /// Also write per-instance front CSVs and HV reports.
    #[serde(default)]
    pub fronts: bool,
    #[serde(default)]
    pub scalarization: Option<ScalarizationConfig>,
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub json: EvalReportJson,
    pub warnings: Vec<String>,
}

/// Evaluates every instance in parallel; results are in dataset order.
pub fn evaluate_parallel(
    params: &PolicyParams,
    dataset: &[Instance],
    weights: &[WeightVector],
    frame: &HvFrame,
    scal: &ScalarizationConfig,
    opts: FrontOptions,
) -> Result<Vec<moco_core::inference::Front>> {
    check_compatible(params, dataset, weights, frame)?;
    let fronts = dataset
        .par_iter()
        .map(|inst| solve_front(params, inst, weights, scal, opts))
        .collect::<moco_core::Result<Vec<_>>>()?;
    Ok(fronts)
}

pub fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(MocoError::Usage("--threads must be at least 1".into()));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| MocoError::Usage(format!("thread pool: {e}")))
}

pub fn cmd_eval(cfg: &EvalConfig, out: &Path, threads: Option<usize>) -> Result<EvalOutcome> {
    let start = Instant::now();
    let params = checkpoint::load(&cfg.checkpoint)?;
    let dataset = crate::formats::read_instances(&cfg.dataset)?;
    let weights = crate::formats::read_weights(&cfg.weights)?;
    let model = params.config();
    if dataset.is_empty() {
        return Err(MocoError::format(&cfg.dataset, 0, "dataset holds no instances"));
    }
    let frame = match &cfg.frame {
        Some(f) => f.clone(),
        None => HvFrame::reference(model.problem, model.kappa, dataset[0].size()).ok_or_else(|| {
            MocoError::Usage(format!("no reference frame for {}{}; pass one in the config", model.problem, dataset[0].size()))
        })?,
    };
    let scal = cfg.scalarization.clone().unwrap_or_else(|| ScalarizationConfig::weighted_sum(model.kappa));
    let mut warnings = Vec::new();
    if cfg.augment && model.problem.coordinate_sets(model.kappa) == 0 {
        warnings.push(format!("augmentation is not defined for {}; skipped", model.problem));
    }
    let opts = FrontOptions { augment: cfg.augment, pool: cfg.pool };
    let fronts = thread_pool(threads)?.install(|| evaluate_parallel(&params, &dataset, &weights, &frame, &scal, opts))?;
    let hvs = fronts.iter().map(|f| normalized_hv(&f.archive, &frame)).collect::<moco_core::Result<Vec<_>>>()?;
    let report = summarize(hvs, weights.len(), cfg.augment, cfg.hv_ref)?;

    std::fs::create_dir_all(out).map_err(|e| MocoError::io(out, e))?;
    write_config(out, &EvalConfig { frame: Some(frame.clone()), ..cfg.clone() })?;
    if cfg.fronts {
        for (i, f) in fronts.iter().enumerate() {
            write_file(&out.join(format!("fronts/instance_{i:05}.csv")), front_to_csv(f.archive.points()).as_bytes())?;
            let hv = hv_report(&f.archive, &frame, cfg.hv_ref)?;
            write_file(&out.join(format!("fronts/instance_{i:05}.hv.json")), to_json_pretty(&hv).as_bytes())?;
        }
    }
    let json = EvalReportJson {
        mean_hv: report.mean_hv,
        gap: report.gap,
        n_instances: report.n_instances,
        n_weights: report.n_weights,
        augment: cfg.augment,
        wall_ms: start.elapsed().as_millis() as u64,
    };
    write_file(&out.join("report.json"), to_json_pretty(&json).as_bytes())?;
    Ok(EvalOutcome { report, json, warnings })
}

// -------------------------------------------------------------------------
// gradcheck and variance

pub fn cmd_gradcheck(cfg: &GradcheckConfig, out: Option<&Path>) -> Result<Vec<CheckRow>> {
    let rows = gradcheck::run(cfg)?;
    if let Some(out) = out {
        write_file(&out.join("gradcheck.txt"), gradcheck::render_table(&rows).as_bytes())?;
        write_config(out, cfg)?;
    }
    Ok(rows)
}

/// Pooled gradient variance of the first `variance_batches` batches for
/// both algorithms from one initialization; writes `variance.csv`.
pub fn cmd_variance(cfg: &TrainConfig, out: &Path) -> Result<VarianceLog> {
    cfg.validate().map_err(|e| MocoError::Usage(format!("config: {e}")))?;
    let log = variance_comparison(cfg, cfg.variance_batches)?;
    write_file(&out.join("variance.csv"), variance_csv(&log).as_bytes())?;
    write_config(out, cfg)?;
    Ok(log)
}
