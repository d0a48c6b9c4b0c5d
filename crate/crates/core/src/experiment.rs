//! The synthetic source/target transfer study.
//!
//! For each seed: generate a source and a target set from the two mixture
//! presets, draw a small stratified training subset from the target, train
//! a source model and a target-only model, then adapt the source model to
//! the subset over a grid of `μ` with both initializations. Every model is
//! scored by F1 on the full target set, and decision functions are sampled
//! on a regular lattice over `[−1, 1]²`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataeval::{gen_synthetic, segment_metrics, LabeledDataset, MixtureSpec};
use crate::error::{Result, TkmError};
use crate::featmap::{sigma_from_rho, FeatureMapConfig};
use crate::io::{write_json_file, write_text_file, write_trace_file};
use crate::solver::{fit_adapt_tkrr_traced, fit_tkrr, predict, Init, TkmModel, TrainConfig};

/// `M = 14`, `U = 1.75`, `σ = √(1/10)`, two inputs.
pub fn study_featmap() -> FeatureMapConfig {
    FeatureMapConfig {
        m: 14,
        u: 1.75,
        sigma: sigma_from_rho(5.0),
        d: 2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthStudyConfig {
    pub featmap: FeatureMapConfig,
    pub rank: usize,
    pub lambda: f64,
    pub n_max: usize,
    pub mu_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub subset_pos: usize,
    pub subset_neg: usize,
    /// Points per axis of the decision lattice.
    pub lattice: usize,
    /// `μ` of the convergence comparison.
    pub convergence_mu: f64,
}

impl Default for SynthStudyConfig {
    fn default() -> Self {
        Self {
            featmap: study_featmap(),
            rank: 4,
            lambda: 1e-3,
            n_max: 20,
            mu_grid: vec![1e-6, 1e-4, 1e-2, 1.0],
            seeds: (0..10).collect(),
            subset_pos: 3,
            subset_neg: 17,
            lattice: 200,
            convergence_mu: 1e-2,
        }
    }
}

/// Datasets and seeds of one study replicate, all derived from one seed.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub source: LabeledDataset,
    pub target: LabeledDataset,
    pub subset: LabeledDataset,
    pub source_init: u64,
    pub target_init: u64,
    pub adapt_init: u64,
}

pub fn seed_data(seed: u64, cfg: &SynthStudyConfig) -> Result<SeedData> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let source = gen_synthetic(&MixtureSpec::source(master.next_u64()))?;
    let target = gen_synthetic(&MixtureSpec::target(master.next_u64()))?;
    let subset = target.stratified_subset(cfg.subset_pos, cfg.subset_neg, master.next_u64())?;
    Ok(SeedData {
        source,
        target,
        subset,
        source_init: master.next_u64(),
        target_init: master.next_u64(),
        adapt_init: master.next_u64(),
    })
}

/// 100 points, half positive, drawn from the source preset. Used for the
/// `(M, U)` kernel grid.
pub fn kernel_grid_sample(seed: u64) -> Result<DMatrix<f64>> {
    let mut spec = MixtureSpec::source(seed);
    spec.n_pos = 50;
    spec.n_neg = 50;
    Ok(gen_synthetic(&spec)?.x)
}

fn train_cfg(cfg: &SynthStudyConfig, init: Init) -> TrainConfig {
    TrainConfig {
        rank: cfg.rank,
        lambda: cfg.lambda,
        n_max: cfg.n_max,
        init,
        class_weighting: true,
        loss_trace: true,
        tolerance: None,
        record_iterates: false,
    }
}

/// F1 of the model's labels on a dataset.
pub fn f1_on(model: &TkmModel, ds: &LabeledDataset) -> Result<f64> {
    let p = predict(model, &ds.x)?;
    Ok(segment_metrics(&p.labels, &ds.y)?.f1)
}

#[derive(Debug, Clone)]
pub struct AdaptRun {
    pub mu: f64,
    pub init: Init,
    pub f1: f64,
    pub model: TkmModel,
    /// Data-fit loss before the first update and after each update.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub source: TkmModel,
    pub target_only: TkmModel,
    pub f1_source: f64,
    pub f1_target_only: f64,
    pub adapt: Vec<AdaptRun>,
}

impl SeedRun {
    pub fn adapted(&self, mu: f64, source_init: bool) -> Option<&AdaptRun> {
        self.adapt
            .iter()
            .find(|a| a.mu == mu && matches!(a.init, Init::Source) == source_init)
    }
}

/// Runs one replicate: source, target-only, and adaptation at every `μ` of
/// the grid (plus the convergence `μ`) from source and random starts.
pub fn run_seed(seed: u64, cfg: &SynthStudyConfig) -> Result<SeedRun> {
    let data = seed_data(seed, cfg)?;
    let fm = cfg.featmap;
    let source = fit_tkrr(
        &data.source.x,
        &data.source.y,
        &train_cfg(
            cfg,
            Init::Random {
                seed: data.source_init,
            },
        ),
        &fm,
    )?;
    let target_only = fit_tkrr(
        &data.subset.x,
        &data.subset.y,
        &train_cfg(
            cfg,
            Init::Random {
                seed: data.target_init,
            },
        ),
        &fm,
    )?;
    let mut mus = cfg.mu_grid.clone();
    if !mus.contains(&cfg.convergence_mu) {
        mus.push(cfg.convergence_mu);
    }
    let mut adapt = Vec::with_capacity(2 * mus.len());
    for &mu in &mus {
        for init in [
            Init::Source,
            Init::Random {
                seed: data.adapt_init,
            },
        ] {
            let fitted = fit_adapt_tkrr_traced(
                &data.subset.x,
                &data.subset.y,
                &source,
                mu,
                &train_cfg(cfg, init),
                &fm,
            )?;
            let losses = fitted.losses();
            adapt.push(AdaptRun {
                mu,
                init,
                f1: f1_on(&fitted.model, &data.target)?,
                model: fitted.model,
                losses,
            });
        }
    }
    Ok(SeedRun {
        seed,
        f1_source: f1_on(&source, &data.target)?,
        f1_target_only: f1_on(&target_only, &data.target)?,
        source,
        target_only,
        adapt,
    })
}

/// `n × n` grid over `[−1, 1]²` as rows `(x1, x2)`, `x1` varying fastest.
pub fn lattice_points(n: usize) -> DMatrix<f64> {
    let step = if n > 1 { 2.0 / (n - 1) as f64 } else { 0.0 };
    let coord = |i: usize| if n > 1 { -1.0 + step * i as f64 } else { 0.0 };
    DMatrix::from_fn(
        n * n,
        2,
        |r, c| if c == 0 { coord(r % n) } else { coord(r / n) },
    )
}

/// Fraction of lattice points where two models assign the same label.
pub fn lattice_agreement(a: &TkmModel, b: &TkmModel, n: usize) -> Result<f64> {
    let pts = lattice_points(n);
    let la = predict(a, &pts)?.labels;
    let lb = predict(b, &pts)?.labels;
    let same = la.iter().zip(&lb).filter(|(p, q)| p == q).count();
    Ok(same as f64 / la.len() as f64)
}

/// `x1,x2,score` over the lattice.
pub fn lattice_csv(model: &TkmModel, n: usize) -> Result<String> {
    let pts = lattice_points(n);
    let scores = predict(model, &pts)?.scores;
    let mut out = String::from("x1,x2,score\n");
    for (i, s) in scores.iter().enumerate() {
        let _ = writeln!(out, "{},{},{}", pts[(i, 0)], pts[(i, 1)], s);
    }
    Ok(out)
}

/// Number of block updates until the loss first comes within `rel` of its
/// final value. Index 0 of `losses` is the starting point.
pub fn updates_to_within(losses: &[f64], rel: f64) -> Option<usize> {
    let last = *losses.last()?;
    losses
        .iter()
        .position(|l| (l - last).abs() <= rel * last.abs())
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct F1Row {
    pub seed: u64,
    pub model: String,
    pub mu: Option<f64>,
    pub init: Option<String>,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MedianF1 {
    pub mu: f64,
    pub source_init: f64,
    pub random_init: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedDiagnostics {
    pub seed: u64,
    /// Lattice label agreement of the largest-`μ` adapted model with the source.
    pub agree_high_mu_source: f64,
    /// Smallest-`μ` adapted model against the target-only model.
    pub agree_low_mu_target_only: f64,
    /// Smallest-`μ` adapted model against the source.
    pub agree_low_mu_source: f64,
    pub updates_source_init: Option<usize>,
    pub updates_random_init: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudySummary {
    pub config: SynthStudyConfig,
    pub median_f1_source: f64,
    pub median_f1_target_only: f64,
    pub median_f1_adapted: Vec<MedianF1>,
    pub median_agree_high_mu_source: f64,
    pub median_agree_low_mu_target_only: f64,
    pub median_agree_low_mu_source: f64,
    pub median_updates_source_init: f64,
    pub median_updates_random_init: f64,
    pub seeds: Vec<SeedDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub summary: StudySummary,
    pub f1_rows: Vec<F1Row>,
    pub runs: Vec<SeedRun>,
}

fn init_name(init: Init) -> &'static str {
    match init {
        Init::Source => "source",
        Init::Random { .. } => "random",
    }
}

pub fn run_study(cfg: &SynthStudyConfig) -> Result<StudyReport> {
    if cfg.seeds.is_empty() || cfg.mu_grid.is_empty() {
        return Err(TkmError::arg(
            "the study needs at least one seed and one mu",
        ));
    }
    let lo_mu = cfg.mu_grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_mu = cfg
        .mu_grid
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    let mut rows = Vec::new();
    let mut diags = Vec::new();
    for &seed in &cfg.seeds {
        let run = run_seed(seed, cfg)?;
        log::info!(
            "seed {seed}: F1 source {:.3}, target-only {:.3}",
            run.f1_source,
            run.f1_target_only
        );
        rows.push(F1Row {
            seed,
            model: "source".into(),
            mu: None,
            init: None,
            f1: run.f1_source,
        });
        rows.push(F1Row {
            seed,
            model: "target_only".into(),
            mu: None,
            init: None,
            f1: run.f1_target_only,
        });
        for a in &run.adapt {
            rows.push(F1Row {
                seed,
                model: "adapted".into(),
                mu: Some(a.mu),
                init: Some(init_name(a.init).into()),
                f1: a.f1,
            });
        }
        let hi = run.adapted(hi_mu, true).expect("grid entry");
        let lo = run.adapted(lo_mu, true).expect("grid entry");
        let conv_s = run
            .adapted(cfg.convergence_mu, true)
            .expect("convergence entry");
        let conv_r = run
            .adapted(cfg.convergence_mu, false)
            .expect("convergence entry");
        diags.push(SeedDiagnostics {
            seed,
            agree_high_mu_source: lattice_agreement(&hi.model, &run.source, cfg.lattice)?,
            agree_low_mu_target_only: lattice_agreement(&lo.model, &run.target_only, cfg.lattice)?,
            agree_low_mu_source: lattice_agreement(&lo.model, &run.source, cfg.lattice)?,
            updates_source_init: updates_to_within(&conv_s.losses, 0.01),
            updates_random_init: updates_to_within(&conv_r.losses, 0.01),
        });
        runs.push(run);
    }
    let col = |f: &dyn Fn(&SeedRun) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
    let median_f1_adapted = cfg
        .mu_grid
        .iter()
        .map(|&mu| MedianF1 {
            mu,
            source_init: col(&|r| r.adapted(mu, true).map_or(f64::NAN, |a| a.f1)),
            random_init: col(&|r| r.adapted(mu, false).map_or(f64::NAN, |a| a.f1)),
        })
        .collect();
    let dcol =
        |f: &dyn Fn(&SeedDiagnostics) -> f64| median(&diags.iter().map(f).collect::<Vec<_>>());
    let as_f = |v: Option<usize>| v.map_or(f64::NAN, |k| k as f64);
    let summary = StudySummary {
        config: cfg.clone(),
        median_f1_source: col(&|r| r.f1_source),
        median_f1_target_only: col(&|r| r.f1_target_only),
        median_f1_adapted,
        median_agree_high_mu_source: dcol(&|d| d.agree_high_mu_source),
        median_agree_low_mu_target_only: dcol(&|d| d.agree_low_mu_target_only),
        median_agree_low_mu_source: dcol(&|d| d.agree_low_mu_source),
        median_updates_source_init: dcol(&|d| as_f(d.updates_source_init)),
        median_updates_random_init: dcol(&|d| as_f(d.updates_random_init)),
        seeds: diags,
    };
    Ok(StudyReport {
        summary,
        f1_rows: rows,
        runs,
    })
}

impl StudyReport {
    pub fn median_adapted_f1(&self, mu: f64, source_init: bool) -> Option<f64> {
        self.summary
            .median_f1_adapted
            .iter()
            .find(|m| m.mu == mu)
            .map(|m| {
                if source_init {
                    m.source_init
                } else {
                    m.random_init
                }
            })
    }

    pub fn f1_csv(&self) -> String {
        let mut out = String::from("seed,model,mu,init,f1\n");
        for r in &self.f1_rows {
            let mu = r.mu.map(|m| m.to_string()).unwrap_or_default();
            let init = r.init.clone().unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", r.seed, r.model, mu, init, r.f1);
        }
        out
    }

    /// Writes the F1 table, summary, per-seed lattices and loss traces.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_text_file(&dir.join("f1.csv"), &self.f1_csv())?;
        write_json_file(&dir.join("summary.json"), &self.summary)?;
        let n = self.summary.config.lattice;
        let conv_mu = self.summary.config.convergence_mu;
        for run in &self.runs {
            let sd = dir.join(format!("seed_{}", run.seed));
            std::fs::create_dir_all(&sd)?;
            write_text_file(
                &sd.join("lattice_source.csv"),
                &lattice_csv(&run.source, n)?,
            )?;
            write_text_file(
                &sd.join("lattice_target_only.csv"),
                &lattice_csv(&run.target_only, n)?,
            )?;
            for a in run.adapt.iter().filter(|a| matches!(a.init, Init::Source)) {
                if self.summary.config.mu_grid.contains(&a.mu) {
                    let name = format!("lattice_adapted_mu_{:e}.csv", a.mu);
                    write_text_file(&sd.join(name), &lattice_csv(&a.model, n)?)?;
                }
            }
            for source_init in [true, false] {
                if let Some(a) = run.adapted(conv_mu, source_init) {
                    let name = format!(
                        "trace_{}_init.csv",
                        if source_init { "source" } else { "random" }
                    );
                    write_trace_file(&sd.join(name), &a.losses)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_layout() {
        let p = lattice_points(3);
        assert_eq!(p.nrows(), 9);
        assert_eq!((p[(0, 0)], p[(0, 1)]), (-1.0, -1.0));
        assert_eq!((p[(1, 0)], p[(1, 1)]), (0.0, -1.0));
        assert_eq!((p[(8, 0)], p[(8, 1)]), (1.0, 1.0));
    }

    #[test]
    fn updates_metric() {
        assert_eq!(updates_to_within(&[10.0, 2.0, 1.005, 1.0], 0.01), Some(2));
        assert_eq!(updates_to_within(&[1.0], 0.01), Some(0));
        assert_eq!(updates_to_within(&[], 0.01), None);
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn seed_data_is_deterministic_and_stratified() {
        let cfg = SynthStudyConfig::default();
        let a = seed_data(3, &cfg).unwrap();
        let b = seed_data(3, &cfg).unwrap();
        assert_eq!(a.subset, b.subset);
        assert_eq!(a.subset.n_positive(), 3);
        assert_eq!(a.subset.n_negative(), 17);
        assert_eq!(a.source.len(), 600);
    }
}
