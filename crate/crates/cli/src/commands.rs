use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use tkm::dataeval::{
    any_overlap_score, events_to_intervals, gen_synthetic, label_runs, postprocess_events,
    sample_weights, scale_apply, scale_fit, segment_metrics, segment_roc,
    threshold_for_sensitivity, Interval, SegmentMetrics,
};
use tkm::experiment::{run_study, SynthStudyConfig};
use tkm::featmap::grid_search_map_params;
use tkm::oracle::{fit_dense_primal, fit_dual, predict_dense, DualKernel};
use tkm::solver::{fit_adapt_tkrr, fit_tkrr, predict, weighted_loss};
use tkm::{io, FeatureMapConfig, Init, LabeledDataset, MixtureSpec, TkmModel, TrainConfig};

use crate::config::Config;
use crate::{
    AdaptArgs, Cli, CliError, Command, EvaluateArgs, ExperimentArgs, FeatmapArg, InitArg,
    KernelGridArgs, ListArg, OracleArgs, PredictArgs, Preset, SynthGenArgs, ThresholdArgs,
    TrainArgs,
};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    let cfg = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::SynthGen(a) => synth_gen(a, &cfg),
        Command::KernelGrid(a) => kernel_grid(a, &cfg),
        Command::Train(a) => train(a, &cfg),
        Command::Adapt(a) => adapt(a, &cfg),
        Command::Predict(a) => predict_cmd(a, &cfg),
        Command::Evaluate(a) => evaluate(a, &cfg),
        Command::ExperimentSynth(a) => experiment(a, &cfg),
        Command::OracleCheck(a) => oracle_check(a, &cfg),
    }?;
    for key in cfg.unused() {
        log::warn!("config key {key} is not used by this command");
    }
    Ok(())
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut w = sink(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(tkm::TkmError::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn featmap(arg: FeatmapArg, d: usize) -> Result<FeatureMapConfig> {
    Ok(FeatureMapConfig::new(arg.m, arg.u, arg.sigma, d)?)
}

fn synth_gen(a: SynthGenArgs, cfg: &Config) -> Result<()> {
    let preset: Preset = cfg.require(a.preset, "preset")?;
    let seed = cfg.pick_or(a.seed, "seed", 0)?;
    let mut spec = match preset {
        Preset::Source => MixtureSpec::source(seed),
        Preset::Target => MixtureSpec::target(seed),
    };
    spec.n_pos = cfg.pick_or(a.n_pos, "n-pos", spec.n_pos)?;
    spec.n_neg = cfg.pick_or(a.n_neg, "n-neg", spec.n_neg)?;
    let ds = gen_synthetic(&spec)?;
    let out: Option<PathBuf> = cfg.pick(a.out, "out")?;
    let mut w = sink(out.as_deref())?;
    io::write_dataset(&mut w, &ds)?;
    w.flush()?;
    Ok(())
}

fn kernel_grid(a: KernelGridArgs, cfg: &Config) -> Result<()> {
    let data: PathBuf = cfg.require(a.data, "data")?;
    let sigma: f64 = cfg.require(a.sigma, "sigma")?;
    let m_grid: ListArg<u32> = cfg.pick_or(a.m_grid, "m-grid", ListArg((10..=20).collect()))?;
    let u_grid: ListArg<f64> = cfg.pick_or(
        a.u_grid,
        "u-grid",
        ListArg(vec![1.0, 1.25, 1.5, 1.75, 2.0, 2.25]),
    )?;
    let ds = io::read_dataset_file(&data)?;
    let ms: Vec<usize> = m_grid.0.iter().map(|&m| m as usize).collect();
    let report = grid_search_map_params(&ds.x, sigma, &ms, &u_grid.0)?;
    let out: Option<PathBuf> = cfg.pick(a.out, "out")?;
    let mut w = sink(out.as_deref())?;
    w.write_all(report.to_csv().as_bytes())?;
    w.flush()?;
    Ok(())
}

fn tune_threshold(
    model: &mut TkmModel,
    t: ThresholdArgs,
    cfg: &Config,
    train: &LabeledDataset,
) -> Result<()> {
    let fixed: Option<f64> = cfg.pick(t.threshold, "threshold")?;
    let target: Option<f64> = cfg.pick(t.target_sensitivity, "target-sensitivity")?;
    let tune_path: Option<PathBuf> = cfg.pick(t.tune_data, "tune-data")?;
    match (fixed, target) {
        (Some(_), Some(_)) => Err(CliError::Usage(
            "--threshold and --target-sensitivity are mutually exclusive".into(),
        )),
        (Some(v), None) => {
            model.threshold = v;
            Ok(())
        }
        (None, Some(s)) => {
            let tune = match tune_path {
                Some(p) => io::read_dataset_file(&p)?,
                None => train.clone(),
            };
            let scores = predict(model, &tune.x)?.scores;
            model.threshold = threshold_for_sensitivity(&scores, &tune.y, s)?;
            log::info!("threshold {} reaches sensitivity {s}", model.threshold);
            Ok(())
        }
        (None, None) => Ok(()),
    }
}

fn save_model(model: &TkmModel, trace: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    if let Some(p) = trace {
        let losses = model.trace.as_deref().unwrap_or(&[]);
        io::write_trace_file(&p, losses)?;
    }
    write_json(out.as_deref(), model)
}

fn train(a: TrainArgs, cfg: &Config) -> Result<()> {
    let data: PathBuf = cfg.require(a.data, "data")?;
    let ds = io::read_dataset_file(&data)?;
    let fm = featmap(cfg.require(a.featmap, "featmap")?, ds.n_features())?;
    if cfg.pick_or(a.init, "init", InitArg::Random)? == InitArg::Source {
        return Err(CliError::Usage(
            "train has no source model; source init is for adapt".into(),
        ));
    }
    let tc = TrainConfig {
        rank: cfg.pick_or(a.rank, "rank", 4)?,
        lambda: cfg.pick_or(a.lambda, "lambda", 1e-3)?,
        n_max: cfg.pick_or(a.n_max, "n-max", 20)?,
        init: Init::Random {
            seed: cfg.pick_or(a.seed, "seed", 0)?,
        },
        class_weighting: !cfg.switch(a.no_class_weights, "no-class-weights")?,
        loss_trace: true,
        tolerance: cfg.pick(a.tolerance, "tolerance")?,
        record_iterates: false,
    };
    let (x, scaling) = if cfg.switch(a.scale, "scale")? {
        let p = scale_fit(&ds.x, (-1.0, 1.0))?;
        (scale_apply(&ds.x, &p)?.x, Some(p))
    } else {
        (ds.x.clone(), None)
    };
    let mut model = fit_tkrr(&x, &ds.y, &tc, &fm)?;
    model.scaling = scaling;
    tune_threshold(&mut model, a.threshold, cfg, &ds)?;
    save_model(&model, cfg.pick(a.trace, "trace")?, cfg.pick(a.out, "out")?)
}

fn adapt(a: AdaptArgs, cfg: &Config) -> Result<()> {
    let data: PathBuf = cfg.require(a.data, "data")?;
    let source_path: PathBuf = cfg.require(a.source, "source")?;
    let ds = io::read_dataset_file(&data)?;
    let source = io::read_model_file(&source_path)?;
    let mu: f64 = cfg.require(a.mu, "mu")?;
    let fm = match cfg.pick(a.featmap, "featmap")? {
        Some(f) => featmap(f, ds.n_features())?,
        None => source.featmap,
    };
    let init = match cfg.pick_or(a.init, "init", InitArg::Source)? {
        InitArg::Source => Init::Source,
        InitArg::Random => Init::Random {
            seed: cfg.pick_or(a.seed, "seed", 0)?,
        },
    };
    let tc = TrainConfig {
        rank: cfg.pick_or(a.rank, "rank", source.weights.rank())?,
        lambda: 0.0,
        n_max: cfg.pick_or(a.n_max, "n-max", 20)?,
        init,
        class_weighting: !cfg.switch(a.no_class_weights, "no-class-weights")?,
        loss_trace: true,
        tolerance: cfg.pick(a.tolerance, "tolerance")?,
        record_iterates: false,
    };
    let mut model = fit_adapt_tkrr(&ds.x, &ds.y, &source, mu, &tc, &fm)?;
    tune_threshold(&mut model, a.threshold, cfg, &ds)?;
    save_model(&model, cfg.pick(a.trace, "trace")?, cfg.pick(a.out, "out")?)
}

fn predict_cmd(a: PredictArgs, cfg: &Config) -> Result<()> {
    let model_path: PathBuf = cfg.require(a.model, "model")?;
    let data: PathBuf = cfg.require(a.data, "data")?;
    let mut model = io::read_model_file(&model_path)?;
    if let Some(t) = cfg.pick(a.threshold, "threshold")? {
        model.threshold = t;
    }
    let ds = io::read_dataset_file(&data)?;
    let p = predict(&model, &ds.x)?;
    let out: Option<PathBuf> = cfg.pick(a.out, "out")?;
    let mut w = sink(out.as_deref())?;
    io::write_scores(&mut w, &p.scores, &p.labels)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct Metrics {
    level: &'static str,
    sensitivity: f64,
    precision: f64,
    f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    fa_per_24h: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    auroc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    segment: Option<SegmentMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_predicted_events: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_true_events: Option<usize>,
}

fn true_events(events: Option<PathBuf>, ds: Option<&LabeledDataset>) -> Result<Vec<Interval>> {
    if let Some(p) = events {
        return Ok(io::read_events_file(&p)?);
    }
    match ds.and_then(|d| d.timing.as_ref().map(|t| (d, t))) {
        Some((d, t)) => Ok(events_to_intervals(&label_runs(&d.y), t)?),
        None => Err(CliError::Usage(
            "event scoring needs --events or a dataset with start_s,dur_s columns".into(),
        )),
    }
}

fn duration(flag: Option<f64>, ds: Option<&LabeledDataset>) -> Result<f64> {
    if let Some(d) = flag {
        return Ok(d);
    }
    let timing = ds.and_then(|d| d.timing.as_ref());
    match timing {
        Some(t) if !t.is_empty() => Ok(t[t.len() - 1].end_s() - t[0].start_s),
        _ => Err(CliError::Usage(
            "recording duration unknown; pass --duration".into(),
        )),
    }
}

fn event_metrics(
    pred: &[Interval],
    truth: &[Interval],
    total: f64,
    segment: Option<SegmentMetrics>,
    auroc: Option<f64>,
) -> Result<Metrics> {
    let m = any_overlap_score(pred, truth, total)?;
    Ok(Metrics {
        level: "event",
        sensitivity: m.sensitivity,
        precision: m.precision,
        f1: m.f1,
        fa_per_24h: Some(m.fa_per_24h),
        auroc,
        segment,
        n_predicted_events: Some(pred.len()),
        n_true_events: Some(truth.len()),
    })
}

fn evaluate(a: EvaluateArgs, cfg: &Config) -> Result<()> {
    let data: Option<PathBuf> = cfg.pick(a.data, "data")?;
    let ds = data.map(|p| io::read_dataset_file(&p)).transpose()?;
    let events: Option<PathBuf> = cfg.pick(a.events, "events")?;
    let dur: Option<f64> = cfg.pick(a.duration, "duration")?;
    let scores: Option<PathBuf> = cfg.pick(a.scores, "scores")?;
    let pred_events: Option<PathBuf> = cfg.pick(a.pred_events, "pred-events")?;
    let metrics = match (scores, pred_events) {
        (Some(_), Some(_)) => {
            return Err(CliError::Usage(
                "--scores and --pred-events are mutually exclusive".into(),
            ))
        }
        (None, None) => return Err(CliError::Usage("missing --scores or --pred-events".into())),
        (None, Some(p)) => {
            let pred = io::read_events_file(&p)?;
            let truth = true_events(events, ds.as_ref())?;
            event_metrics(&pred, &truth, duration(dur, ds.as_ref())?, None, None)?
        }
        (Some(p), None) => {
            let ds =
                ds.ok_or_else(|| CliError::Usage("--scores needs --data with true labels".into()))?;
            let (scores, labels) = io::read_scores_file(&p)?;
            let threshold = cfg.pick_or(a.threshold, "threshold", 0.0)?;
            let labels = labels.unwrap_or_else(|| {
                scores
                    .iter()
                    .map(|&s| if s >= threshold { 1.0 } else { -1.0 })
                    .collect()
            });
            if labels.len() != ds.len() {
                return Err(tkm::TkmError::InvalidArgument(format!(
                    "{} predictions for {} labelled samples",
                    labels.len(),
                    ds.len()
                ))
                .into());
            }
            let seg = segment_metrics(&labels, &ds.y)?;
            let auroc = (ds.n_positive() > 0 && ds.n_negative() > 0)
                .then(|| segment_roc(&scores, &ds.y).map(|r| r.auroc))
                .transpose()?;
            match &ds.timing {
                Some(t) => {
                    let k = cfg.pick_or(a.k, "k", 8)?;
                    let n = cfg.pick_or(a.n, "n", 10)?;
                    let pred = events_to_intervals(&postprocess_events(&labels, k, n)?, t)?;
                    let truth = true_events(events, Some(&ds))?;
                    let total = duration(dur, Some(&ds))?;
                    event_metrics(&pred, &truth, total, Some(seg), auroc)?
                }
                None => Metrics {
                    level: "segment",
                    sensitivity: seg.sensitivity,
                    precision: seg.precision,
                    f1: seg.f1,
                    fa_per_24h: None,
                    auroc,
                    segment: None,
                    n_predicted_events: None,
                    n_true_events: None,
                },
            }
        }
    };
    let out: Option<PathBuf> = cfg.pick(a.out, "out")?;
    write_json(out.as_deref(), &metrics)
}

fn experiment(a: ExperimentArgs, cfg: &Config) -> Result<()> {
    let mut sc = SynthStudyConfig::default();
    if let Some(f) = cfg.pick(a.featmap, "featmap")? {
        sc.featmap = featmap(f, 2)?;
    }
    if let Some(ListArg(s)) = cfg.pick(a.seeds, "seeds")? {
        sc.seeds = s;
    }
    if let Some(ListArg(m)) = cfg.pick(a.mu_grid, "mu-grid")? {
        sc.mu_grid = m;
    }
    sc.rank = cfg.pick_or(a.rank, "rank", sc.rank)?;
    sc.lambda = cfg.pick_or(a.lambda, "lambda", sc.lambda)?;
    sc.n_max = cfg.pick_or(a.n_max, "n-max", sc.n_max)?;
    sc.lattice = cfg.pick_or(a.lattice, "lattice", sc.lattice)?;
    let out: PathBuf = cfg.pick_or(a.out, "out", PathBuf::from("synth_study"))?;
    let report = run_study(&sc)?;
    report.write(&out)?;
    let s = &report.summary;
    let mut w = sink(None)?;
    writeln!(
        w,
        "{:<12} {:>8} {:>8} {:>9}",
        "model", "mu", "init", "median_f1"
    )?;
    writeln!(
        w,
        "{:<12} {:>8} {:>8} {:>9.3}",
        "source", "-", "-", s.median_f1_source
    )?;
    writeln!(
        w,
        "{:<12} {:>8} {:>8} {:>9.3}",
        "target_only", "-", "-", s.median_f1_target_only
    )?;
    for m in &s.median_f1_adapted {
        writeln!(
            w,
            "{:<12} {:>8.0e} {:>8} {:>9.3}",
            "adapted", m.mu, "source", m.source_init
        )?;
        writeln!(
            w,
            "{:<12} {:>8.0e} {:>8} {:>9.3}",
            "adapted", m.mu, "random", m.random_init
        )?;
    }
    writeln!(
        w,
        "lattice agreement, largest mu vs source: {:.4}",
        s.median_agree_high_mu_source
    )?;
    writeln!(
        w,
        "lattice agreement, smallest mu vs target-only / source: {:.4} / {:.4}",
        s.median_agree_low_mu_target_only, s.median_agree_low_mu_source
    )?;
    writeln!(
        w,
        "updates to within 1% of final loss, source / random init: {} / {}",
        s.median_updates_source_init, s.median_updates_random_init
    )?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct OracleEntry {
    loss: f64,
    objective: Option<f64>,
    auroc: Option<f64>,
}

#[derive(Debug, Serialize)]
struct OracleReport {
    tkrr: OracleEntry,
    dense_primal: OracleEntry,
    dual_featmap: OracleEntry,
    dual_rbf: OracleEntry,
    /// Largest training-set score difference between the two featmap references.
    primal_dual_max_diff: f64,
}

fn oracle_check(a: OracleArgs, cfg: &Config) -> Result<()> {
    let data: PathBuf = cfg.require(a.data, "data")?;
    let ds = io::read_dataset_file(&data)?;
    let fm = featmap(cfg.require(a.featmap, "featmap")?, ds.n_features())?;
    let lambda = cfg.pick_or(a.lambda, "lambda", 1e-3)?;
    let tc = TrainConfig {
        rank: cfg.pick_or(a.rank, "rank", 4)?,
        lambda,
        n_max: cfg.pick_or(a.n_max, "n-max", 20)?,
        init: Init::Random {
            seed: cfg.pick_or(a.seed, "seed", 0)?,
        },
        ..TrainConfig::default()
    };
    let c = sample_weights(&ds.y, true)?;
    let auroc = |s: &[f64]| -> Result<Option<f64>> {
        if ds.n_positive() == 0 || ds.n_negative() == 0 {
            return Ok(None);
        }
        Ok(Some(segment_roc(s, &ds.y)?.auroc))
    };
    let loss = |s: &[f64]| -> f64 {
        s.iter()
            .zip(&ds.y)
            .zip(&c)
            .map(|((f, y), w)| w * (f - y) * (f - y))
            .sum::<f64>()
            / ds.len() as f64
    };
    let model = fit_tkrr(&ds.x, &ds.y, &tc, &fm)?;
    let tk_scores = predict(&model, &ds.x)?.scores;
    let tk_loss = weighted_loss(&model, &ds.x, &ds.y, &c)?;
    let (w, _) = fit_dense_primal(&ds.x, &ds.y, &c, lambda, &fm)?;
    let dp_scores = predict_dense(&w, &ds.x, &fm)?;
    let dual_fm = fit_dual(&ds.x, &ds.y, &c, lambda, DualKernel::FeatureMap(fm))?;
    let df_scores = dual_fm.predict(&ds.x)?;
    let dual_rbf = fit_dual(
        &ds.x,
        &ds.y,
        &c,
        lambda,
        DualKernel::Rbf { sigma: fm.sigma },
    )?;
    let dr_scores = dual_rbf.predict(&ds.x)?;
    let report = OracleReport {
        tkrr: OracleEntry {
            loss: tk_loss,
            objective: Some(tk_loss + lambda * model.weights.norm_squared()),
            auroc: auroc(&tk_scores)?,
        },
        dense_primal: OracleEntry {
            loss: loss(&dp_scores),
            objective: Some(loss(&dp_scores) + lambda * w.norm_squared()),
            auroc: auroc(&dp_scores)?,
        },
        dual_featmap: OracleEntry {
            loss: loss(&df_scores),
            objective: None,
            auroc: auroc(&df_scores)?,
        },
        dual_rbf: OracleEntry {
            loss: loss(&dr_scores),
            objective: None,
            auroc: auroc(&dr_scores)?,
        },
        primal_dual_max_diff: dp_scores
            .iter()
            .zip(&df_scores)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max),
    };
    let out: Option<PathBuf> = cfg.pick(a.out, "out")?;
    write_json(out.as_deref(), &report)
}
