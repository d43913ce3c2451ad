//! Behavioral features and a class-weighted linear max-margin classifier
//! that assigns users to socio-economic segments.
//!
//! The classifier is one-vs-rest: six hinge-loss linear models trained
//! jointly by Pegasos-style stochastic subgradient descent over the same
//! seeded example order. Features are standardized with training
//! statistics stored in the model, and a constant bias feature is appended
//! (and regularized like the other weights).

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geo::DistanceMode;
use crate::model::{TowerRegistry, UserSegment, UserStream};
use crate::timewin::{is_weekend, local_day, local_hour};

pub const FEATURE_DIM: usize = 50;
const HOURS: usize = 24;
const DISTINCT_CELL_RATIO: usize = 48;
const WEEKEND_FRACTION: usize = 49;

/// 24 hourly call shares, 24 hourly mean displacements (km), the distinct
/// cell ratio and the weekend share of records.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub [f64; FEATURE_DIM]);

impl FeatureVector {
    pub fn hourly_call_freq(&self) -> &[f64] {
        &self.0[..HOURS]
    }

    pub fn hourly_distance(&self) -> &[f64] {
        &self.0[HOURS..2 * HOURS]
    }

    pub fn distinct_cell_ratio(&self) -> f64 {
        self.0[DISTINCT_CELL_RATIO]
    }

    pub fn weekend_fraction(&self) -> f64 {
        self.0[WEEKEND_FRACTION]
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn extract_features(
    stream: &UserStream,
    registry: &TowerRegistry,
    tz_offset_min: i32,
    mode: DistanceMode,
) -> Result<FeatureVector> {
    let records = &stream.records;
    if records.is_empty() {
        return Err(Error::EmptyStream);
    }
    let n = records.len() as f64;
    let mut v = [0.0; FEATURE_DIM];
    let mut weekend = 0usize;
    let mut cells = HashSet::new();
    for r in records {
        v[local_hour(r.timestamp, tz_offset_min)] += 1.0;
        if is_weekend(local_day(r.timestamp, tz_offset_min)) {
            weekend += 1;
        }
        cells.insert(r.cell);
    }
    for f in &mut v[..HOURS] {
        *f /= n;
    }

    let mut dist_sum = [0.0; HOURS];
    let mut dist_count = [0usize; HOURS];
    for pair in records.windows(2) {
        let h = local_hour(pair[0].timestamp, tz_offset_min);
        let d = if pair[0].cell == pair[1].cell {
            0.0
        } else {
            mode.distance_km(
                registry.position(pair[0].cell)?,
                registry.position(pair[1].cell)?,
            )
        };
        dist_sum[h] += d;
        dist_count[h] += 1;
    }
    for h in 0..HOURS {
        if dist_count[h] > 0 {
            v[HOURS + h] = dist_sum[h] / dist_count[h] as f64;
        }
    }
    v[DISTINCT_CELL_RATIO] = cells.len() as f64 / n;
    v[WEEKEND_FRACTION] = weekend as f64 / n;
    Ok(FeatureVector(v))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lambda: f64,
    pub seed: u64,
    /// Weight each example by `n_total / (6 * n_class)`.
    pub class_weighted: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lambda: 1e-4,
            seed: 0,
            class_weighted: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub lambda: f64,
    pub class_weights: [f64; UserSegment::COUNT],
    /// Regularized weighted hinge objective after each epoch.
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentClassifier {
    dim: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// One row per segment, `dim + 1` entries with the bias last.
    weights: Vec<Vec<f64>>,
    present: [bool; UserSegment::COUNT],
    pub meta: TrainingMeta,
}

fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

pub fn train_segment_classifier<X: AsRef<[f64]>>(
    xs: &[X],
    ys: &[UserSegment],
    config: &TrainConfig,
) -> Result<SegmentClassifier> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            found: ys.len(),
        });
    }
    let mut counts = [0usize; UserSegment::COUNT];
    for y in ys {
        counts[y.index()] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::SingleClassData);
    }
    let dim = xs[0].as_ref().len();
    if let Some(bad) = xs.iter().find(|x| x.as_ref().len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: bad.as_ref().len(),
        });
    }

    let n = xs.len();
    let mut mean = vec![0.0; dim];
    for x in xs {
        for (m, v) in mean.iter_mut().zip(x.as_ref()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut scale = vec![0.0; dim];
    for x in xs {
        for ((s, v), m) in scale.iter_mut().zip(x.as_ref()).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    for s in &mut scale {
        let sd = (*s / n as f64).sqrt();
        *s = if sd > 1e-12 { sd } else { 1.0 };
    }

    let standardized: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| {
            let mut z: Vec<f64> = x
                .as_ref()
                .iter()
                .zip(&mean)
                .zip(&scale)
                .map(|((v, m), s)| (v - m) / s)
                .collect();
            z.push(1.0);
            z
        })
        .collect();

    let mut class_weights = [0.0; UserSegment::COUNT];
    for (k, &c) in counts.iter().enumerate() {
        if c > 0 {
            class_weights[k] = if config.class_weighted {
                n as f64 / (UserSegment::COUNT as f64 * c as f64)
            } else {
                1.0
            };
        }
    }
    let present: [bool; UserSegment::COUNT] = std::array::from_fn(|k| counts[k] > 0);

    let lambda = config.lambda;
    let mut weights = vec![vec![0.0; dim + 1]; UserSegment::COUNT];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut loss_history = Vec::with_capacity(config.epochs);
    let mut t = 0u64;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let shrink = 1.0 - eta * lambda;
            let x = &standardized[i];
            let c = class_weights[ys[i].index()];
            for (k, w) in weights.iter_mut().enumerate() {
                if !present[k] {
                    continue;
                }
                let y = if ys[i].index() == k { 1.0 } else { -1.0 };
                let margin = y * dot(w, x);
                w.iter_mut().for_each(|v| *v *= shrink);
                if margin < 1.0 {
                    let step = eta * c * y;
                    w.iter_mut().zip(x).for_each(|(v, xv)| *v += step * xv);
                }
            }
        }
        loss_history.push(objective(
            &weights,
            &present,
            &standardized,
            ys,
            &class_weights,
            lambda,
        ));
    }

    Ok(SegmentClassifier {
        dim,
        mean,
        scale,
        weights,
        present,
        meta: TrainingMeta {
            seed: config.seed,
            epochs: config.epochs,
            lambda,
            class_weights,
            loss_history,
        },
    })
}

fn objective(
    weights: &[Vec<f64>],
    present: &[bool; UserSegment::COUNT],
    xs: &[Vec<f64>],
    ys: &[UserSegment],
    class_weights: &[f64; UserSegment::COUNT],
    lambda: f64,
) -> f64 {
    let n = xs.len() as f64;
    let mut total = 0.0;
    for (k, w) in weights.iter().enumerate() {
        if !present[k] {
            continue;
        }
        let reg = 0.5 * lambda * dot(w, w);
        let hinge: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| {
                let yk = if y.index() == k { 1.0 } else { -1.0 };
                class_weights[y.index()] * (1.0 - yk * dot(w, x)).max(0.0)
            })
            .sum();
        total += reg + hinge / n;
    }
    total
}

impl SegmentClassifier {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// A model whose every score is zero, useful as a baseline.
    pub fn zeroed(dim: usize) -> Self {
        SegmentClassifier {
            dim,
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
            weights: vec![vec![0.0; dim + 1]; UserSegment::COUNT],
            present: [true; UserSegment::COUNT],
            meta: TrainingMeta {
                seed: 0,
                epochs: 0,
                lambda: 0.0,
                class_weights: [1.0; UserSegment::COUNT],
                loss_history: Vec::new(),
            },
        }
    }

    pub fn scores(&self, x: &[f64]) -> Result<[f64; UserSegment::COUNT]> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        let mut z: Vec<f64> = x
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        z.push(1.0);
        Ok(std::array::from_fn(|k| {
            if self.present[k] {
                dot(&self.weights[k], &z)
            } else {
                f64::NEG_INFINITY
            }
        }))
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:e}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut out = String::new();
        let _ = writeln!(out, "dim {}", self.dim);
        let _ = writeln!(out, "seed {}", self.meta.seed);
        let _ = writeln!(out, "epochs {}", self.meta.epochs);
        let _ = writeln!(out, "lambda {:e}", self.meta.lambda);
        let _ = writeln!(out, "class_weights {}", join(&self.meta.class_weights));
        let _ = writeln!(out, "mean {}", join(&self.mean));
        let _ = writeln!(out, "scale {}", join(&self.scale));
        for seg in UserSegment::ALL {
            let k = seg.index();
            if self.present[k] {
                let _ = writeln!(out, "w {} {}", seg, join(&self.weights[k]));
            } else {
                let _ = writeln!(out, "w {} absent", seg);
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::InvalidConfig(format!("segment model: {what}"));
        let mut model = SegmentClassifier::zeroed(0);
        let mut rows_seen = 0;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            let nums = |parts: std::str::SplitWhitespace<'_>| -> Result<Vec<f64>> {
                parts
                    .map(|p| {
                        p.parse::<f64>()
                            .map_err(|_| bad(&format!("bad number `{p}`")))
                    })
                    .collect()
            };
            match key {
                "dim" => {
                    model.dim = parts
                        .next()
                        .and_then(|d| d.parse().ok())
                        .ok_or_else(|| bad("dim"))?;
                }
                "seed" => {
                    model.meta.seed = parts
                        .next()
                        .and_then(|d| d.parse().ok())
                        .ok_or_else(|| bad("seed"))?
                }
                "epochs" => {
                    model.meta.epochs = parts
                        .next()
                        .and_then(|d| d.parse().ok())
                        .ok_or_else(|| bad("epochs"))?
                }
                "lambda" => {
                    model.meta.lambda = parts
                        .next()
                        .and_then(|d| d.parse().ok())
                        .ok_or_else(|| bad("lambda"))?
                }
                "class_weights" => {
                    let v = nums(parts)?;
                    model.meta.class_weights = v.try_into().map_err(|_| bad("class_weights"))?;
                }
                "mean" => model.mean = nums(parts)?,
                "scale" => model.scale = nums(parts)?,
                "w" => {
                    let seg: UserSegment = parts
                        .next()
                        .ok_or_else(|| bad("segment"))?
                        .parse()
                        .map_err(|e: String| bad(&e))?;
                    let rest: Vec<&str> = parts.collect();
                    if rest == ["absent"] {
                        model.present[seg.index()] = false;
                        model.weights[seg.index()] = vec![0.0; model.dim + 1];
                    } else {
                        model.present[seg.index()] = true;
                        model.weights[seg.index()] = nums(rest.join(" ").split_whitespace())?;
                    }
                    rows_seen += 1;
                }
                other => return Err(bad(&format!("unknown key `{other}`"))),
            }
        }
        let ok = rows_seen == UserSegment::COUNT
            && model.mean.len() == model.dim
            && model.scale.len() == model.dim
            && model.weights.iter().all(|w| w.len() == model.dim + 1);
        if !ok {
            return Err(bad("inconsistent dimensions"));
        }
        Ok(model)
    }
}

/// Argmax of the per-segment scores; ties go to the earlier segment.
pub fn predict_segment(model: &SegmentClassifier, x: &[f64]) -> Result<UserSegment> {
    let scores = model.scores(x)?;
    let mut best = 0;
    for k in 1..scores.len() {
        if scores[k] > scores[best] {
            best = k;
        }
    }
    Ok(UserSegment::ALL[best])
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub per_class: [ClassMetrics; UserSegment::COUNT],
    /// Mean F1 over segments that occur in the truth or the predictions.
    pub macro_f1: f64,
    pub accuracy: f64,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Per-segment precision, recall and F1. Undefined ratios are reported as 0.
pub fn classification_report(pred: &[UserSegment], truth: &[UserSegment]) -> ClassificationReport {
    assert_eq!(
        pred.len(),
        truth.len(),
        "prediction and truth lengths differ"
    );
    let mut tp = [0usize; UserSegment::COUNT];
    let mut predicted = [0usize; UserSegment::COUNT];
    let mut support = [0usize; UserSegment::COUNT];
    for (p, t) in pred.iter().zip(truth) {
        predicted[p.index()] += 1;
        support[t.index()] += 1;
        if p == t {
            tp[p.index()] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: [ClassMetrics; UserSegment::COUNT] = std::array::from_fn(|k| {
        let precision = ratio(tp[k], predicted[k]);
        let recall = ratio(tp[k], support[k]);
        ClassMetrics {
            precision,
            recall,
            f1: f1_score(precision, recall),
            support: support[k],
            predicted: predicted[k],
        }
    });
    let active: Vec<&ClassMetrics> = per_class
        .iter()
        .filter(|m| m.support > 0 || m.predicted > 0)
        .collect();
    let macro_f1 = if active.is_empty() {
        0.0
    } else {
        active.iter().map(|m| m.f1).sum::<f64>() / active.len() as f64
    };
    ClassificationReport {
        per_class,
        macro_f1,
        accuracy: ratio(tp.iter().sum(), pred.len()),
    }
}

/// One wide row per model: `<segment>_p,<segment>_r,<segment>_f1` for each segment.
pub fn report_csv(rows: &[(&str, &ClassificationReport)]) -> String {
    let mut out = String::from("model");
    for seg in UserSegment::ALL {
        let _ = write!(out, ",{seg}_p,{seg}_r,{seg}_f1");
    }
    out.push_str(",macro_f1,accuracy\n");
    for (name, report) in rows {
        out.push_str(name);
        for m in &report.per_class {
            let _ = write!(out, ",{:.4},{:.4},{:.4}", m.precision, m.recall, m.f1);
        }
        let _ = writeln!(out, ",{:.4},{:.4}", report.macro_f1, report.accuracy);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LatLon;
    use crate::model::{CdrRecord, CellIdx, CellTower};
    use UserSegment::*;

    const TZ: i32 = 0;
    // 2024-01-01 00:00 UTC, a Monday.
    const MONDAY: i64 = 1_704_067_200;

    fn registry() -> TowerRegistry {
        let t = |id: &str, lon: f64| CellTower {
            cell_id: id.into(),
            position: LatLon::new(6.9271, lon),
            transmit_power_mw: 1000.0,
            region_id: "R".into(),
        };
        TowerRegistry::new(vec![t("a", 79.8612), t("b", 79.8712)]).unwrap()
    }

    fn rec(ts: i64, cell: u32) -> CdrRecord {
        CdrRecord {
            timestamp: ts,
            cell: CellIdx(cell),
            duration: 0,
        }
    }

    #[test]
    fn single_hour_single_cell() {
        let recs: Vec<_> = (0..5)
            .map(|d| rec(MONDAY + d * 86_400 + 9 * 3600 + 60 * d, 0))
            .collect();
        let f = extract_features(
            &UserStream::new("u", recs),
            &registry(),
            TZ,
            DistanceMode::Haversine,
        )
        .unwrap();
        assert_eq!(f.hourly_call_freq()[9], 1.0);
        assert!(f.hourly_distance().iter().all(|&d| d == 0.0));
        assert_eq!(f.distinct_cell_ratio(), 1.0 / 5.0);
        assert_eq!(f.weekend_fraction(), 0.0);
        let sum: f64 = f.hourly_call_freq().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn alternating_cells_hourly() {
        let recs: Vec<_> = (0..8)
            .map(|h| rec(MONDAY + 8 * 3600 + h * 3600, (h % 2) as u32))
            .collect();
        let f = extract_features(
            &UserStream::new("u", recs),
            &registry(),
            TZ,
            DistanceMode::Haversine,
        )
        .unwrap();
        let oracle =
            crate::geo::haversine_km(LatLon::new(6.9271, 79.8612), LatLon::new(6.9271, 79.8712));
        for h in 8..15 {
            assert!((f.hourly_distance()[h] - oracle).abs() < 1e-12);
            assert!((f.hourly_distance()[h] - 1.103_834).abs() < 1e-6);
        }
        assert_eq!(f.hourly_distance()[15], 0.0);
    }

    #[test]
    fn saturday_only() {
        let sat = MONDAY + 5 * 86_400;
        let recs: Vec<_> = (0..4).map(|i| rec(sat + i * 1000, 0)).collect();
        let f = extract_features(
            &UserStream::new("u", recs),
            &registry(),
            TZ,
            DistanceMode::Haversine,
        )
        .unwrap();
        assert_eq!(f.weekend_fraction(), 1.0);
        assert!(matches!(
            extract_features(
                &UserStream::new("u", vec![]),
                &registry(),
                TZ,
                DistanceMode::Haversine
            ),
            Err(Error::EmptyStream)
        ));
    }

    fn separable() -> (Vec<Vec<f64>>, Vec<UserSegment>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..20 {
            let j = f64::from(i) * 0.05;
            xs.push(vec![1.0 + j, 0.5 - j]);
            ys.push(Student);
            xs.push(vec![-1.0 - j, -0.5 + j]);
            ys.push(Retired);
        }
        (xs, ys)
    }

    #[test]
    fn separable_two_class() {
        let (xs, ys) = separable();
        let model = train_segment_classifier(&xs, &ys, &TrainConfig::default()).unwrap();
        let pred: Vec<_> = xs
            .iter()
            .map(|x| predict_segment(&model, x).unwrap())
            .collect();
        assert_eq!(pred, ys);
        let again = train_segment_classifier(&xs, &ys, &TrainConfig::default()).unwrap();
        assert_eq!(model, again);
        let bits = |m: &SegmentClassifier| {
            m.weights
                .iter()
                .flatten()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&model), bits(&again));
    }

    #[test]
    fn training_errors() {
        let (xs, _) = separable();
        let ys = vec![Student; xs.len()];
        assert!(matches!(
            train_segment_classifier(&xs, &ys, &TrainConfig::default()),
            Err(Error::SingleClassData)
        ));
        let model = SegmentClassifier::zeroed(2);
        assert!(matches!(
            predict_segment(&model, &[1.0, 2.0, 3.0]),
            Err(Error::DimensionMismatch {
                expected: 2,
                found: 3
            })
        ));
    }

    #[test]
    fn zero_scores_tie_to_first_segment() {
        let model = SegmentClassifier::zeroed(FEATURE_DIM);
        assert_eq!(
            predict_segment(&model, &[0.3; FEATURE_DIM]).unwrap(),
            FullTime
        );
    }

    #[test]
    fn scaled_point_prediction_is_deterministic() {
        let (xs, ys) = separable();
        let model = train_segment_classifier(&xs, &ys, &TrainConfig::default()).unwrap();
        let doubled: Vec<f64> = xs[0].iter().map(|v| v * 2.0).collect();
        let a = predict_segment(&model, &doubled).unwrap();
        assert_eq!(a, predict_segment(&model, &doubled).unwrap());
    }

    /// 1-D overlap set: 45 majority points spread over [0, 1), 5 minority
    /// points at 0.80..0.84, inside the majority's range.
    fn overlap_set() -> (Vec<Vec<f64>>, Vec<UserSegment>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..45 {
            xs.push(vec![f64::from(i) / 45.0]);
            ys.push(FullTime);
        }
        for i in 0..5 {
            xs.push(vec![0.80 + f64::from(i) * 0.01]);
            ys.push(Housewife);
        }
        (xs, ys)
    }

    fn minority_recall(weighted: bool) -> f64 {
        let (xs, ys) = overlap_set();
        let cfg = TrainConfig {
            class_weighted: weighted,
            ..TrainConfig::default()
        };
        let model = train_segment_classifier(&xs, &ys, &cfg).unwrap();
        let pred: Vec<_> = xs
            .iter()
            .map(|x| predict_segment(&model, x).unwrap())
            .collect();
        classification_report(&pred, &ys).per_class[Housewife.index()].recall
    }

    #[test]
    fn class_weighting_recovers_minority() {
        assert_eq!(minority_recall(true), 1.0);
        assert!(minority_recall(false) < 1.0);
    }

    #[test]
    fn imbalanced_separable_minority_recall() {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..90 {
            xs.push(vec![f64::from(i) / 90.0, 0.0]);
            ys.push(FullTime);
        }
        for i in 0..10 {
            xs.push(vec![2.0 + f64::from(i) / 10.0, 1.0]);
            ys.push(Retired);
        }
        let model = train_segment_classifier(&xs, &ys, &TrainConfig::default()).unwrap();
        let pred: Vec<_> = xs
            .iter()
            .map(|x| predict_segment(&model, x).unwrap())
            .collect();
        assert_eq!(
            classification_report(&pred, &ys).per_class[Retired.index()].recall,
            1.0
        );
    }

    #[test]
    fn report_examples() {
        let truth = vec![FullTime, Student, Student, Retired];
        let r = classification_report(&truth, &truth);
        for seg in [FullTime, Student, Retired] {
            let m = r.per_class[seg.index()];
            assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        }
        assert_eq!(r.macro_f1, 1.0);

        let truth = vec![FullTime, Student, FullTime, Student];
        let pred = vec![Student, FullTime, Student, FullTime];
        let r = classification_report(&pred, &truth);
        assert_eq!(r.macro_f1, 0.0);
        assert!(r
            .per_class
            .iter()
            .all(|m| m.precision == 0.0 && m.recall == 0.0 && m.f1 == 0.0));

        let f1 = f1_score(0.71, 0.66);
        assert!((f1 - 0.684).abs() < 5e-4);
        assert_eq!((f1 * 100.0).round() / 100.0, 0.68);
    }

    #[test]
    fn text_round_trip() {
        let (xs, ys) = separable();
        let model = train_segment_classifier(&xs, &ys, &TrainConfig::default()).unwrap();
        let back = SegmentClassifier::from_text(&model.to_text()).unwrap();
        for x in &xs {
            assert_eq!(model.scores(x).unwrap(), back.scores(x).unwrap());
        }
    }
}
