//! Data generation, class balancing, scaling and evaluation.
//!
//! Segment-level evaluation covers ROC/AUROC and thresholded F1. Event-level
//! evaluation turns per-segment labels into events with a k-of-n sliding
//! window and scores them with the any-overlap rule.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TkmError};

/// Timing of one segment, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_s: f64,
    pub dur_s: f64,
}

impl Segment {
    pub fn end_s(&self) -> f64 {
        self.start_s + self.dur_s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub x: DMatrix<f64>,
    /// Labels in {−1, +1}.
    pub y: Vec<f64>,
    pub timing: Option<Vec<Segment>>,
}

impl LabeledDataset {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>, timing: Option<Vec<Segment>>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(TkmError::arg(format!(
                "{} rows but {} labels",
                x.nrows(),
                y.len()
            )));
        }
        if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(TkmError::arg(format!("non-finite feature value {bad}")));
        }
        check_labels(&y)?;
        if let Some(t) = &timing {
            if t.len() != y.len() {
                return Err(TkmError::arg("timing length differs from label count"));
            }
            for (i, w) in t.windows(2).enumerate() {
                if w[1].start_s < w[0].end_s() {
                    return Err(TkmError::arg(format!(
                        "segments {i} and {} overlap or are unsorted",
                        i + 1
                    )));
                }
            }
            if t.iter()
                .any(|s| !(s.dur_s >= 0.0) || !s.start_s.is_finite())
            {
                return Err(TkmError::arg("segment durations must be nonnegative"));
            }
        }
        Ok(Self { x, y, timing })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_positive(&self) -> usize {
        self.y.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn n_negative(&self) -> usize {
        self.len() - self.n_positive()
    }

    pub fn positive_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.y[i] > 0.0).collect()
    }

    pub fn negative_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.y[i] < 0.0).collect()
    }

    /// Rows in the given order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let x = DMatrix::from_fn(rows.len(), self.n_features(), |i, j| self.x[(rows[i], j)]);
        Self {
            x,
            y: rows.iter().map(|&i| self.y[i]).collect(),
            timing: self
                .timing
                .as_ref()
                .map(|t| rows.iter().map(|&i| t[i]).collect()),
        }
    }

    /// Stratified random subset of `n_pos` positives and `n_neg` negatives,
    /// positives first.
    pub fn stratified_subset(&self, n_pos: usize, n_neg: usize, seed: u64) -> Result<Self> {
        let pos = self.positive_indices();
        let neg = self.negative_indices();
        if pos.len() < n_pos || neg.len() < n_neg {
            return Err(TkmError::arg(format!(
                "requested {n_pos}/{n_neg} positives/negatives, have {}/{}",
                pos.len(),
                neg.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<usize> = index::sample(&mut rng, pos.len(), n_pos)
            .into_iter()
            .map(|i| pos[i])
            .collect();
        rows.extend(
            index::sample(&mut rng, neg.len(), n_neg)
                .into_iter()
                .map(|i| neg[i]),
        );
        Ok(self.subset(&rows))
    }
}

pub(crate) fn check_labels(y: &[f64]) -> Result<()> {
    match y.iter().position(|&v| v != 1.0 && v != -1.0) {
        Some(i) => Err(TkmError::arg(format!(
            "label {} at index {i} is not -1 or +1",
            y[i]
        ))),
        None => Ok(()),
    }
}

/// Positives from an isotropic Gaussian mixture with equal component
/// weights, truncated to the open box `(lo, hi)²`; negatives uniform on the
/// box, rejected when within `exclusion_radius · std_dev` of any component
/// mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub means: Vec<[f64; 2]>,
    pub std_dev: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// In units of `std_dev`.
    pub exclusion_radius: f64,
    /// Every sample lies in the open box `(lo, hi)²`.
    pub bounds: (f64, f64),
    pub seed: u64,
}

pub const SOURCE_MEANS: [[f64; 2]; 3] = [[-0.4, 0.5], [0.5, 0.7], [-0.1, -0.6]];
pub const TARGET_MEANS: [[f64; 2]; 3] = [[-0.4, 0.3], [0.5, 0.3], [0.0, -0.65]];
pub const PRESET_STD_DEV: f64 = 0.15;
pub const PRESET_EXCLUSION_RADIUS: f64 = 2.5;

const MAX_REJECTIONS: usize = 100_000;

impl MixtureSpec {
    fn preset(means: [[f64; 2]; 3], seed: u64) -> Self {
        Self {
            means: means.to_vec(),
            std_dev: PRESET_STD_DEV,
            n_pos: 100,
            n_neg: 500,
            exclusion_radius: PRESET_EXCLUSION_RADIUS,
            bounds: (-1.0, 1.0),
            seed,
        }
    }

    pub fn source(seed: u64) -> Self {
        Self::preset(SOURCE_MEANS, seed)
    }

    pub fn target(seed: u64) -> Self {
        Self::preset(TARGET_MEANS, seed)
    }

    /// True when `p` lies inside the region negatives must avoid.
    pub fn excludes(&self, p: [f64; 2]) -> bool {
        let r = self.exclusion_radius * self.std_dev;
        self.means.iter().any(|m| {
            let dx = p[0] - m[0];
            let dy = p[1] - m[1];
            dx * dx + dy * dy <= r * r
        })
    }
}

pub fn gen_synthetic(spec: &MixtureSpec) -> Result<LabeledDataset> {
    if spec.n_pos > 0 && spec.means.is_empty() {
        return Err(TkmError::arg(
            "positives requested but no mixture components",
        ));
    }
    if !(spec.std_dev >= 0.0) || !(spec.bounds.0 < spec.bounds.1) {
        return Err(TkmError::arg("invalid std_dev or bounds"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_pos + spec.n_neg;
    let mut x = DMatrix::zeros(n, 2);
    let (lo, hi) = spec.bounds;
    let inside = |p: [f64; 2]| p.iter().all(|&v| v > lo && v < hi);
    for i in 0..spec.n_pos {
        let mut attempts = 0;
        // redrawn until inside the open box, so the data never touches ±U
        let p = loop {
            let c = spec.means[rng.random_range(0..spec.means.len())];
            let z: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let p = [c[0] + spec.std_dev * z[0], c[1] + spec.std_dev * z[1]];
            if inside(p) {
                break p;
            }
            attempts += 1;
            if attempts >= MAX_REJECTIONS {
                return Err(TkmError::Generation(format!(
                    "no positive inside the bounds after {MAX_REJECTIONS} draws"
                )));
            }
        };
        x[(i, 0)] = p[0];
        x[(i, 1)] = p[1];
    }
    for i in spec.n_pos..n {
        let mut attempts = 0;
        let p = loop {
            let p = [rng.random_range(lo..hi), rng.random_range(lo..hi)];
            if inside(p) && !spec.excludes(p) {
                break p;
            }
            attempts += 1;
            if attempts >= MAX_REJECTIONS {
                return Err(TkmError::Generation(format!(
                    "no admissible negative after {MAX_REJECTIONS} draws"
                )));
            }
        };
        x[(i, 0)] = p[0];
        x[(i, 1)] = p[1];
    }
    let mut y = vec![1.0; spec.n_pos];
    y.resize(n, -1.0);
    LabeledDataset::new(x, y, None)
}

/// `C⁺ = N / (2N⁺)`, `C⁻ = N / (2N⁻)`.
pub fn class_weights(y: &[f64]) -> Result<(f64, f64)> {
    check_labels(y)?;
    let n = y.len() as f64;
    let n_pos = y.iter().filter(|&&v| v > 0.0).count() as f64;
    let n_neg = n - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(TkmError::arg(
            "class weighting needs both positive and negative samples",
        ));
    }
    Ok((n / (2.0 * n_pos), n / (2.0 * n_neg)))
}

/// Per-sample costs: `C⁺`/`C⁻` when `weighted`, otherwise ones.
pub fn sample_weights(y: &[f64], weighted: bool) -> Result<Vec<f64>> {
    check_labels(y)?;
    if !weighted {
        return Ok(vec![1.0; y.len()]);
    }
    let (cp, cn) = class_weights(y)?;
    Ok(y.iter().map(|&v| if v > 0.0 { cp } else { cn }).collect())
}

#[derive(Debug, Clone)]
pub struct Undersampled {
    pub dataset: LabeledDataset,
    /// Set when there were fewer negatives than the ratio asks for.
    pub insufficient_negatives: bool,
}

/// Keeps every positive and a uniform subset of `round(neg_per_pos · N⁺)`
/// negatives. `None` disables undersampling. Retained rows keep their
/// original order.
pub fn undersample(
    ds: &LabeledDataset,
    neg_per_pos: Option<f64>,
    seed: u64,
) -> Result<Undersampled> {
    let Some(ratio) = neg_per_pos else {
        return Ok(Undersampled {
            dataset: ds.clone(),
            insufficient_negatives: false,
        });
    };
    if !(ratio > 0.0) {
        return Err(TkmError::arg(format!(
            "ratio must be positive, got {ratio}"
        )));
    }
    let neg = ds.negative_indices();
    let wanted = (ratio * ds.n_positive() as f64).round() as usize;
    if wanted >= neg.len() {
        if wanted > neg.len() {
            log::warn!(
                "undersampling wanted {wanted} negatives, only {} available",
                neg.len()
            );
        }
        return Ok(Undersampled {
            dataset: ds.clone(),
            insufficient_negatives: wanted > neg.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; ds.len()];
    for i in ds.positive_indices() {
        keep[i] = true;
    }
    for k in index::sample(&mut rng, neg.len(), wanted) {
        keep[neg[k]] = true;
    }
    let rows: Vec<usize> = (0..ds.len()).filter(|&i| keep[i]).collect();
    Ok(Undersampled {
        dataset: ds.subset(&rows),
        insufficient_negatives: false,
    })
}

/// Per-feature affine map from the observed `[min, max]` onto `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
}

pub fn scale_fit(x: &DMatrix<f64>, interval: (f64, f64)) -> Result<ScaleParams> {
    let (lo, hi) = interval;
    if !(lo < hi) {
        return Err(TkmError::arg(format!("empty interval [{lo}, {hi}]")));
    }
    if x.nrows() == 0 {
        return Err(TkmError::arg("cannot fit scaling on zero samples"));
    }
    let min = x.column_iter().map(|c| c.min()).collect();
    let max = x.column_iter().map(|c| c.max()).collect();
    Ok(ScaleParams { min, max, lo, hi })
}

#[derive(Debug, Clone)]
pub struct Scaled {
    pub x: DMatrix<f64>,
    /// Number of entries clamped to the interval boundary.
    pub clamped: usize,
}

/// Applies the map; values falling outside the interval are clamped and
/// counted. A constant training feature maps to the interval midpoint.
pub fn scale_apply(x: &DMatrix<f64>, params: &ScaleParams) -> Result<Scaled> {
    if x.ncols() != params.min.len() {
        return Err(TkmError::arg(format!(
            "scaling fitted on {} features, data has {}",
            params.min.len(),
            x.ncols()
        )));
    }
    let mid = 0.5 * (params.lo + params.hi);
    let mut clamped = 0;
    let mut out = x.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let (a, b) = (params.min[j], params.max[j]);
        for v in col.iter_mut() {
            let s = if b > a {
                params.lo + (*v - a) * (params.hi - params.lo) / (b - a)
            } else {
                mid
            };
            *v = if s < params.lo {
                clamped += 1;
                params.lo
            } else if s > params.hi {
                clamped += 1;
                params.hi
            } else {
                s
            };
        }
    }
    Ok(Scaled { x: out, clamped })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    /// From `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub points: Vec<RocPoint>,
    pub auroc: f64,
}

/// Threshold sweep over the distinct scores; tied scores move the curve
/// diagonally, which the trapezoidal rule credits as one half.
pub fn segment_roc(scores: &[f64], y: &[f64]) -> Result<Roc> {
    if scores.len() != y.len() {
        return Err(TkmError::arg("scores and labels differ in length"));
    }
    check_labels(y)?;
    let n_pos = y.iter().filter(|&&v| v > 0.0).count() as f64;
    let n_neg = y.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(TkmError::arg("ROC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut auroc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (prev_tpr, prev_fpr) = (tp / n_pos, fp / n_neg);
        while i < order.len() && scores[order[i]] == s {
            if y[order[i]] > 0.0 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let (tpr, fpr) = (tp / n_pos, fp / n_neg);
        auroc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        points.push(RocPoint {
            threshold: s,
            fpr,
            tpr,
        });
    }
    Ok(Roc { points, auroc })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub sensitivity: f64,
    pub precision: f64,
    pub f1: f64,
}

/// Sensitivity, precision and F1 of hard ±1 predictions.
pub fn segment_metrics(predicted: &[f64], y: &[f64]) -> Result<SegmentMetrics> {
    if predicted.len() != y.len() {
        return Err(TkmError::arg("predictions and labels differ in length"));
    }
    check_labels(y)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &t) in predicted.iter().zip(y) {
        match (p > 0.0, t > 0.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let sensitivity = ratio(tp, tp + fneg);
    let precision = ratio(tp, tp + fp);
    Ok(SegmentMetrics {
        sensitivity,
        precision,
        f1: f1(precision, sensitivity),
    })
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Largest threshold at which at least `target` of the positives score at
/// or above it.
pub fn threshold_for_sensitivity(scores: &[f64], y: &[f64], target: f64) -> Result<f64> {
    if scores.len() != y.len() {
        return Err(TkmError::arg("scores and labels differ in length"));
    }
    if !(0.0..=1.0).contains(&target) {
        return Err(TkmError::arg(format!(
            "target sensitivity {target} not in [0, 1]"
        )));
    }
    let mut pos: Vec<f64> = scores
        .iter()
        .zip(y)
        .filter(|(_, &t)| t > 0.0)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() {
        return Err(TkmError::arg("no positive samples to tune a threshold on"));
    }
    pos.sort_by(|a, b| b.total_cmp(a));
    let k = ((target * pos.len() as f64).ceil() as usize).clamp(1, pos.len());
    Ok(pos[k - 1])
}

/// Detected event over segment indices `start..end` (end exclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentEvent {
    pub start: usize,
    pub end: usize,
}

/// k-of-n post-processing.
///
/// Every window of `n` consecutive segments with at least `k` positives
/// fires. Overlapping or adjacent firing windows merge, and each merged run
/// is trimmed to its first and last positive segment. Sequences shorter than
/// `n` yield nothing.
pub fn postprocess_events(labels: &[f64], k: usize, n: usize) -> Result<Vec<SegmentEvent>> {
    if k == 0 || n < k {
        return Err(TkmError::arg(format!(
            "need n >= k >= 1, got k = {k}, n = {n}"
        )));
    }
    if labels.len() < n {
        return Ok(Vec::new());
    }
    let pos: Vec<bool> = labels.iter().map(|&v| v > 0.0).collect();
    let mut count = pos[..n].iter().filter(|&&p| p).count();
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for start in 0..=labels.len() - n {
        if start > 0 {
            count -= pos[start - 1] as usize;
            count += pos[start + n - 1] as usize;
        }
        if count >= k {
            match runs.last_mut() {
                Some(last) if start <= last.1 => last.1 = start + n,
                _ => runs.push((start, start + n)),
            }
        }
    }
    Ok(runs
        .into_iter()
        .map(|(a, b)| {
            let first = (a..b)
                .find(|&i| pos[i])
                .expect("a firing window holds positives");
            let last = (a..b)
                .rev()
                .find(|&i| pos[i])
                .expect("a firing window holds positives");
            SegmentEvent {
                start: first,
                end: last + 1,
            }
        })
        .collect())
}

/// Maximal runs of positive labels.
pub fn label_runs(labels: &[f64]) -> Vec<SegmentEvent> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &v) in labels.iter().enumerate() {
        match (v > 0.0, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(SegmentEvent { start: s, end: i });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(SegmentEvent {
            start: s,
            end: labels.len(),
        });
    }
    out
}

/// An event in seconds, `[start_s, end_s]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start_s: f64,
    pub end_s: f64,
}

impl Interval {
    pub fn new(start_s: f64, end_s: f64) -> Self {
        Self { start_s, end_s }
    }

    /// Positive-length intersection; touching endpoints do not count.
    pub fn overlaps(&self, other: &Interval) -> bool {
        self.start_s < other.end_s && other.start_s < self.end_s
    }
}

/// Converts segment-index events to time using per-segment timing.
pub fn events_to_intervals(events: &[SegmentEvent], timing: &[Segment]) -> Result<Vec<Interval>> {
    events
        .iter()
        .map(|e| {
            if e.end == 0 || e.end > timing.len() || e.start >= e.end {
                return Err(TkmError::arg(format!(
                    "event {e:?} outside the timing table"
                )));
            }
            Ok(Interval::new(
                timing[e.start].start_s,
                timing[e.end - 1].end_s(),
            ))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventMetrics {
    pub sensitivity: f64,
    pub precision: f64,
    pub f1: f64,
    pub fa_per_24h: f64,
}

fn check_disjoint(events: &[Interval], what: &str) -> Result<()> {
    for (i, e) in events.iter().enumerate() {
        if !(e.start_s <= e.end_s) {
            return Err(TkmError::arg(format!(
                "{what} event {i} ends before it starts"
            )));
        }
    }
    for (i, w) in events.windows(2).enumerate() {
        if w[1].start_s < w[0].end_s {
            return Err(TkmError::arg(format!(
                "{what} events {i} and {} overlap or are unsorted",
                i + 1
            )));
        }
    }
    Ok(())
}

/// Any-overlap event scoring.
///
/// A true event counts as detected when any prediction overlaps it; a
/// prediction is correct when it overlaps any true event. Sensitivity and
/// precision are 0 when their denominators are empty.
pub fn any_overlap_score(
    predicted: &[Interval],
    truth: &[Interval],
    total_duration_s: f64,
) -> Result<EventMetrics> {
    check_disjoint(predicted, "predicted")?;
    check_disjoint(truth, "true")?;
    if !(total_duration_s > 0.0) {
        return Err(TkmError::arg(format!(
            "total duration must be positive, got {total_duration_s}"
        )));
    }
    let hits = truth
        .iter()
        .filter(|t| predicted.iter().any(|p| p.overlaps(t)))
        .count();
    let matched = predicted
        .iter()
        .filter(|p| truth.iter().any(|t| t.overlaps(p)))
        .count();
    let sensitivity = ratio(hits, truth.len());
    let precision = ratio(matched, predicted.len());
    let false_alarms = predicted.len() - matched;
    Ok(EventMetrics {
        sensitivity,
        precision,
        f1: f1(precision, sensitivity),
        fa_per_24h: false_alarms as f64 * 86_400.0 / total_duration_s,
    })
}
