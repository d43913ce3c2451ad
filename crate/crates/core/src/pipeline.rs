//! End-to-end batch runs: configuration, stage orchestration and artifacts.
//!
//! Stages run in a fixed order and each writes its artifacts into the
//! output directory. Artifacts depend only on the inputs and the
//! configuration, never on timing or worker count.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use rayon::prelude::*;

use crate::entropy::{filter_by_entropy, user_entropies, EntropyKeep};
use crate::error::{Error, Result};
use crate::geo::{DistanceMode, LatLon};
use crate::ingest::{self, DatasetKind, Rejection, SpeedPrior, TruthAnchor};
use crate::loadshare::{
    self, calibrate_speed_table, calibration_report_csv, detect_fixed, detect_with_lookup,
    label_ground_truth, metrics_csv, CalibrationConfig, DetectionCounts, DetectionMetrics,
    LabeledStream, TruthLabel, BASELINE_THRESHOLD_KMPH,
};
use crate::localize::{
    anchors_csv, calldays_anchor, gps_anchor, infer_anchor, AnchorKind, AnchorMethod, AnchorRow,
    FitUser, LocalizeConfig, SegmentParamTable, DEFAULT_EPS_M, DEFAULT_MIN_PTS,
};
use crate::model::{sub_seed, Network, UserSegment, UserStream};
use crate::odmatrix::{
    build_od_matrix, compare_matrices, error_percentiles, DfMode, KvReport, OdMatrix,
    REPORT_PERCENTILES,
};
use crate::profiling::{
    classification_report, extract_features, predict_segment, report_csv, train_segment_classifier,
    ClassificationReport, TrainConfig,
};
use crate::region::RegionGrid;
use crate::synthgen::{self, WorldConfig};
use crate::timewin::Calendar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Generate,
    Ingest,
    Filter,
    Profile,
    Loadshare,
    Localize,
    Odmatrix,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Generate,
        Stage::Ingest,
        Stage::Filter,
        Stage::Profile,
        Stage::Loadshare,
        Stage::Localize,
        Stage::Odmatrix,
        Stage::Evaluate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Ingest => "ingest",
            Stage::Filter => "filter",
            Stage::Profile => "profile",
            Stage::Loadshare => "loadshare",
            Stage::Localize => "localize",
            Stage::Odmatrix => "odmatrix",
            Stage::Evaluate => "evaluate",
        }
    }

    fn stochastic(self) -> bool {
        matches!(
            self,
            Stage::Generate | Stage::Profile | Stage::Loadshare | Stage::Localize
        )
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s.trim())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown stage `{}`", s.trim())))
    }
}

/// Input files that can be overridden individually.
pub const INPUT_KEYS: [&str; 9] = [
    "cdr",
    "towers",
    "gps",
    "labels",
    "regions",
    "speeds",
    "districts",
    "truth_flags",
    "truth_anchors",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Explicit input paths; others resolve to `<data_dir>/<key>.csv`.
    pub inputs: BTreeMap<String, PathBuf>,
    pub seed: Option<u64>,
    pub stages: BTreeSet<Stage>,
    pub users: usize,
    pub days: u32,
    pub p_ls: f64,
    pub gps_fraction: f64,
    pub min_fraction: f64,
    pub keep_percentile: f64,
    pub default_threshold: f64,
    pub grid_step: f64,
    pub grid_max: f64,
    pub df_mode: DfMode,
    pub distance_mode: DistanceMode,
    pub tz_offset_min: i32,
    pub holidays: Vec<NaiveDate>,
    pub eps_m: f64,
    pub min_pts: u64,
    pub k: usize,
    /// Rayon pool size; results never depend on it.
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            inputs: BTreeMap::new(),
            seed: None,
            stages: Stage::ALL
                .into_iter()
                .filter(|s| *s != Stage::Generate)
                .collect(),
            users: 500,
            days: 14,
            p_ls: 0.3,
            gps_fraction: 1.0,
            min_fraction: 0.8,
            keep_percentile: 80.0,
            default_threshold: BASELINE_THRESHOLD_KMPH,
            grid_step: loadshare::DEFAULT_GRID_STEP,
            grid_max: loadshare::DEFAULT_GRID_MAX,
            df_mode: DfMode::Cells,
            distance_mode: DistanceMode::Haversine,
            tz_offset_min: 0,
            holidays: Vec::new(),
            eps_m: DEFAULT_EPS_M,
            min_pts: DEFAULT_MIN_PTS,
            k: 1,
            workers: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected `key = value`", n + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            k if INPUT_KEYS.contains(&k) => {
                self.inputs.insert(k.to_string(), PathBuf::from(value));
            }
            "seed" => self.seed = Some(parse_value(key, value)?),
            "stages" => {
                self.stages = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(Stage::from_str)
                    .collect::<Result<_>>()?;
            }
            "users" => self.users = parse_value(key, value)?,
            "days" => self.days = parse_value(key, value)?,
            "p_ls" => self.p_ls = parse_value(key, value)?,
            "gps_fraction" => self.gps_fraction = parse_value(key, value)?,
            "min_fraction" => self.min_fraction = parse_value(key, value)?,
            "keep_percentile" => self.keep_percentile = parse_value(key, value)?,
            "default_threshold" => self.default_threshold = parse_value(key, value)?,
            "grid_step" => self.grid_step = parse_value(key, value)?,
            "grid_max" => self.grid_max = parse_value(key, value)?,
            "df_mode" => self.df_mode = value.parse()?,
            "distance_mode" => self.distance_mode = value.parse()?,
            "tz_offset_min" => self.tz_offset_min = parse_value(key, value)?,
            "holidays" => {
                self.holidays = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|d| parse_value::<NaiveDate>(key, d))
                    .collect::<Result<_>>()?;
            }
            "eps_m" => self.eps_m = parse_value(key, value)?,
            "min_pts" => self.min_pts = parse_value(key, value)?,
            "k" => self.k = parse_value(key, value)?,
            "workers" => self.workers = Some(parse_value(key, value)?),
            other => return Err(Error::InvalidConfig(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Canonical `key = value` form; [`RunConfig::from_text`] reads it back.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("data_dir", self.data_dir.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        for (k, p) in &self.inputs {
            kv(k, p.display().to_string());
        }
        if let Some(s) = self.seed {
            kv("seed", s.to_string());
        }
        kv(
            "stages",
            self.stages
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("users", self.users.to_string());
        kv("days", self.days.to_string());
        kv("p_ls", self.p_ls.to_string());
        kv("gps_fraction", self.gps_fraction.to_string());
        kv("min_fraction", self.min_fraction.to_string());
        kv("keep_percentile", self.keep_percentile.to_string());
        kv("default_threshold", self.default_threshold.to_string());
        kv("grid_step", self.grid_step.to_string());
        kv("grid_max", self.grid_max.to_string());
        kv("df_mode", self.df_mode.as_str().to_string());
        kv("distance_mode", self.distance_mode.as_str().to_string());
        kv("tz_offset_min", self.tz_offset_min.to_string());
        kv(
            "holidays",
            self.holidays
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("eps_m", self.eps_m.to_string());
        kv("min_pts", self.min_pts.to_string());
        kv("k", self.k.to_string());
        if let Some(w) = self.workers {
            kv("workers", w.to_string());
        }
        out
    }

    pub fn input_path(&self, key: &str) -> PathBuf {
        self.inputs
            .get(key)
            .cloned()
            .unwrap_or_else(|| self.data_dir.join(format!("{key}.csv")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.stages.iter().any(|s| s.stochastic()) && self.seed.is_none() {
            return bad(
                "a seed is required for the generate, profile, loadshare and localize stages"
                    .into(),
            );
        }
        if !(0.0..=1.0).contains(&self.min_fraction) {
            return bad("min_fraction must lie in [0, 1]".into());
        }
        if !(self.keep_percentile > 0.0 && self.keep_percentile <= 100.0) {
            return bad("keep_percentile must lie in (0, 100]".into());
        }
        if !(self.eps_m > 0.0) || self.min_pts == 0 || self.k == 0 {
            return bad("eps_m, min_pts and k must be positive".into());
        }
        if !(self.default_threshold >= 0.0) {
            return bad("default_threshold must be non-negative".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        loadshare::theta_grid(self.grid_step, self.grid_max)?;
        Ok(())
    }

    fn calendar(&self) -> Calendar {
        Calendar::new(self.tz_offset_min).with_holidays(self.holidays.iter().copied())
    }

    fn localize_config(&self) -> LocalizeConfig {
        LocalizeConfig {
            eps_m: self.eps_m,
            min_pts: self.min_pts,
            k: self.k,
            seed: self.seed.unwrap_or(0),
            metric: self.distance_mode,
        }
    }

    /// Stages that actually run when the pipeline stops after `last`:
    /// enabled stages up to `last`, plus `last` itself, plus ingest and
    /// localize whenever a later stage needs them.
    pub fn plan(&self, last: Stage) -> Vec<Stage> {
        let mut run: BTreeSet<Stage> = self.stages.iter().copied().filter(|s| *s <= last).collect();
        run.insert(last);
        if run.iter().any(|s| *s > Stage::Ingest) {
            run.insert(Stage::Ingest);
        }
        if run.iter().any(|s| *s > Stage::Localize) {
            run.insert(Stage::Localize);
        }
        run.into_iter().collect()
    }
}

/// A stage failure, naming the stage.
#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl StageError {
    /// 1 for configuration problems, 2 for bad input data, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        exit_code(&self.source)
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) => 1,
        e if e.is_data_error() => 2,
        _ => 3,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub summary: KvReport,
    pub artifacts: Vec<PathBuf>,
}

/// Whether a user belongs to the calibration/training half of the
/// reference users. Derived from the user id so it is stable under
/// filtering.
pub fn in_training_split(seed: u64, user_id: &str) -> bool {
    sub_seed(seed, user_id) % 2 == 0
}

#[derive(Default)]
struct State {
    network: Option<Network>,
    streams: BTreeMap<String, UserStream>,
    /// Segment used for parameter lookup: the label, else the prediction.
    segments: BTreeMap<String, UserSegment>,
    flags: Option<BTreeMap<String, Vec<bool>>>,
    detection: Vec<(String, DetectionMetrics)>,
    classification: Option<(ClassificationReport, ClassificationReport)>,
    anchors: Vec<AnchorRow>,
    od: Vec<(AnchorMethod, OdMatrix)>,
}

impl State {
    fn network(&self) -> Result<&Network> {
        self.network
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("ingest must run before later stages".into()))
    }
}

struct Runner<'c> {
    cfg: &'c RunConfig,
    report: RunReport,
    state: State,
}

/// Runs every enabled stage.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunReport, StageError> {
    run_until(cfg, Stage::Evaluate)
}

/// Runs the stages of [`RunConfig::plan`] for `last`.
pub fn run_until(cfg: &RunConfig, last: Stage) -> Result<RunReport, StageError> {
    let plan = cfg.plan(last);
    let first = plan[0];
    let mut checked = cfg.clone();
    checked.stages = plan.iter().copied().collect();
    checked.validate().map_err(|source| StageError {
        stage: first,
        source,
    })?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| StageError {
            stage: first,
            source: Error::InvalidConfig(format!("cannot start worker pool: {e}")),
        })?;
    pool.install(|| {
        let mut runner = Runner {
            cfg,
            report: RunReport::default(),
            state: State::default(),
        };
        std::fs::create_dir_all(&cfg.out_dir).map_err(|e| StageError {
            stage: first,
            source: Error::io(&cfg.out_dir, e),
        })?;
        for stage in plan {
            log::info!("stage {stage} started");
            runner
                .run(stage)
                .map_err(|source| StageError { stage, source })?;
        }
        let path = cfg.out_dir.join("run_report.txt");
        runner
            .write(&path, &runner.report.summary.to_text())
            .map_err(|source| StageError {
                stage: last,
                source,
            })?;
        Ok(runner.report)
    })
}

fn rejections_text(name: &str, rejections: &[Rejection], out: &mut String) {
    for r in rejections {
        let msg = r.error.to_string().replace(['\n', ','], " ");
        let _ = writeln!(out, "{name},{},{msg}", r.line);
    }
}

impl Runner<'_> {
    fn write(&self, path: &Path, contents: &str) -> Result<()> {
        std::fs::write(path, contents).map_err(|e| Error::io(path, e))
    }

    fn artifact(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.cfg.out_dir.join(name);
        self.write(&path, contents)?;
        self.report.artifacts.push(path);
        Ok(())
    }

    fn note(&mut self, key: &str, value: impl ToString) {
        self.report.summary.push(key, value);
    }

    fn seed(&self) -> u64 {
        self.cfg.seed.unwrap_or(0)
    }

    fn run(&mut self, stage: Stage) -> Result<()> {
        let mut st = std::mem::take(&mut self.state);
        let result = match stage {
            Stage::Generate => self.generate(),
            Stage::Ingest => self.ingest(&mut st),
            Stage::Filter => self.filter(&mut st),
            Stage::Profile => self.profile(&mut st),
            Stage::Loadshare => self.loadshare(&mut st),
            Stage::Localize => self.localize(&mut st),
            Stage::Odmatrix => self.odmatrix(&mut st),
            Stage::Evaluate => self.evaluate(&mut st),
        };
        self.state = st;
        result
    }

    fn generate(&mut self) -> Result<()> {
        let world_cfg = WorldConfig {
            seed: self.seed(),
            users: self.cfg.users,
            p_ls: self.cfg.p_ls,
            gps_fraction: self.cfg.gps_fraction,
            tz_offset_min: self.cfg.tz_offset_min,
            ..WorldConfig::default()
        };
        let world = synthgen::generate_world(&world_cfg)?;
        let traces =
            synthgen::simulate_traces(&world, self.cfg.days, sub_seed(self.seed(), "traces"))?;
        let summary = synthgen::emit(&world, &traces, &self.cfg.data_dir)?;
        self.note("generate.towers", world.towers.len());
        self.note("generate.users", world.users.len());
        self.note("generate.cdr_rows", summary.cdr_rows);
        self.note("generate.gps_rows", summary.gps_rows);
        Ok(())
    }

    fn ingest(&mut self, st: &mut State) -> Result<()> {
        let cfg = self.cfg;
        let mut rejected = String::from("file,line,error\n");
        let regions = ingest::load_regions(&cfg.input_path("regions"))?;
        rejections_text("regions", &regions.rejections, &mut rejected);
        let grid = regions.value;
        let towers = ingest::load_towers(&cfg.input_path("towers"), Some(&grid))?;
        rejections_text("towers", &towers.rejections, &mut rejected);
        let cdr = ingest::load_cdr(&cfg.input_path("cdr"), &towers.value, None)?;
        rejections_text("cdr", &cdr.rejections, &mut rejected);
        let mut total_rejected =
            regions.rejections.len() + towers.rejections.len() + cdr.rejections.len();
        let cdr_rows = cdr.value.len();
        let canonical = ingest::canonicalize_streams(cdr.value);
        let mut streams = canonical.streams;

        let gps_path = cfg.input_path("gps");
        let mut gps_users = 0;
        if gps_path.exists() {
            let gps = ingest::load_gps(&gps_path)?;
            rejections_text("gps", &gps.rejections, &mut rejected);
            total_rejected += gps.rejections.len();
            gps_users = ingest::attach_gps(&mut streams, gps.value);
        }
        let labels_path = cfg.input_path("labels");
        let mut labeled = 0;
        if labels_path.exists() {
            let labels = ingest::load_labels(&labels_path)?;
            rejections_text("labels", &labels.rejections, &mut rejected);
            total_rejected += labels.rejections.len();
            labeled = ingest::attach_labels(&mut streams, &labels.value);
        }

        let network = Network::new(towers.value, grid);
        let outcome = ingest::study_area_filter(streams, &network, cfg.min_fraction);
        self.note("ingest.towers", network.registry.len());
        self.note("ingest.cdr_rows", cdr_rows);
        self.note("ingest.rejected_rows", total_rejected);
        self.note("ingest.duplicates_removed", canonical.duplicates_removed);
        self.note("ingest.gps_users", gps_users);
        self.note("ingest.labeled_users", labeled);
        self.note(
            "ingest.study_area_dropped_users",
            outcome.dropped_users.len(),
        );
        self.note("ingest.study_area_trimmed_records", outcome.trimmed_records);
        self.note("ingest.users", outcome.retained.len());
        self.artifact("ingest_rejections.csv", &rejected)?;
        st.streams = outcome.retained;
        st.network = Some(network);
        Ok(())
    }

    fn filter(&mut self, st: &mut State) -> Result<()> {
        let entropies = user_entropies(st.streams.values())?;
        let outcome = filter_by_entropy(entropies, self.cfg.keep_percentile, EntropyKeep::Lower);
        let mut rows: Vec<(&str, f64, bool)> = outcome
            .retained
            .iter()
            .map(|(u, h)| (u.as_str(), *h, true))
            .chain(outcome.dropped.iter().map(|(u, h)| (u.as_str(), *h, false)))
            .collect();
        rows.sort_by(|a, b| a.0.cmp(b.0));
        let mut csv = String::from("user_id,entropy_bits,retained\n");
        for (u, h, kept) in &rows {
            let _ = writeln!(csv, "{u},{h:.6},{}", u8::from(*kept));
        }
        for (u, _) in &outcome.dropped {
            st.streams.remove(u);
        }
        self.note("filter.threshold_bits", format!("{:.6}", outcome.threshold));
        self.note("filter.retained", outcome.retained.len());
        self.note("filter.dropped", outcome.dropped.len());
        self.artifact("entropy.csv", &csv)
    }

    fn profile(&mut self, st: &mut State) -> Result<()> {
        let cfg = self.cfg;
        let network = st.network()?;
        let features: Vec<_> = st
            .streams
            .par_iter()
            .map(|(u, s)| {
                Ok((
                    u.clone(),
                    extract_features(s, &network.registry, cfg.tz_offset_min, cfg.distance_mode)?,
                ))
            })
            .collect::<Result<_>>()?;
        let seed = self.seed();
        let (mut train_x, mut train_y, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for (u, x) in &features {
            if let Some(seg) = st.streams[u].segment {
                if in_training_split(seed, u) {
                    train_x.push(x.clone());
                    train_y.push(seg);
                } else {
                    test.push((x, seg));
                }
            }
        }
        if train_y.is_empty() {
            self.note("profile.status", "skipped: no labeled users");
            for (u, s) in &st.streams {
                if let Some(seg) = s.segment {
                    st.segments.insert(u.clone(), seg);
                }
            }
            return Ok(());
        }
        let model = train_segment_classifier(
            &train_x,
            &train_y,
            &TrainConfig {
                seed,
                ..TrainConfig::default()
            },
        )?;
        let mut segments_csv = String::from("user_id,predicted,label\n");
        let mut segments = BTreeMap::new();
        for (u, x) in &features {
            let predicted = predict_segment(&model, &x.0)?;
            let label = st.streams[u].segment;
            let _ = writeln!(
                segments_csv,
                "{u},{predicted},{}",
                label.map_or("", |l| l.as_str())
            );
            segments.insert(u.clone(), label.unwrap_or(predicted));
        }
        let (eval_x, eval_y): (Vec<_>, Vec<_>) = if test.is_empty() {
            (train_x.iter().collect(), train_y.clone())
        } else {
            test.into_iter().unzip()
        };
        let pred = eval_x
            .iter()
            .map(|x| predict_segment(&model, &x.0))
            .collect::<Result<Vec<_>>>()?;
        let report = classification_report(&pred, &eval_y);
        let majority = majority_class(&train_y);
        let baseline = classification_report(&vec![majority; eval_y.len()], &eval_y);
        self.note("profile.train_users", train_y.len());
        self.note("profile.eval_users", eval_y.len());
        self.note("profile.macro_f1", format!("{:.4}", report.macro_f1));
        self.note(
            "profile.majority_macro_f1",
            format!("{:.4}", baseline.macro_f1),
        );
        self.artifact("model.txt", &model.to_text())?;
        self.artifact("segments.csv", &segments_csv)?;
        self.artifact(
            "profile_report.csv",
            &report_csv(&[("classifier", &report), ("majority", &baseline)]),
        )?;
        st.segments = segments;
        st.classification = Some((report, baseline));
        Ok(())
    }

    fn loadshare(&mut self, st: &mut State) -> Result<()> {
        let cfg = self.cfg;
        let network = st.network()?;
        let seed = self.seed();
        let labeled: Vec<(&UserStream, Vec<TruthLabel>)> = st
            .streams
            .values()
            .filter(|s| s.gps.as_ref().is_some_and(|g| !g.is_empty()))
            .collect::<Vec<_>>()
            .par_iter()
            .map(|s| Ok((*s, label_ground_truth(s)?)))
            .collect::<Result<_>>()?;
        let (train, eval): (Vec<_>, Vec<_>) = labeled
            .iter()
            .partition(|(s, _)| in_training_split(seed, &s.user_id));
        let train_ls: Vec<LabeledStream> = train
            .iter()
            .map(|(s, l)| LabeledStream {
                stream: s,
                labels: l,
            })
            .collect();
        let speeds_path = cfg.input_path("speeds");
        let priors: Vec<SpeedPrior> = if speeds_path.exists() {
            ingest::load_speeds(&speeds_path)?.value
        } else {
            Vec::new()
        };
        let cal_cfg = CalibrationConfig {
            grid: loadshare::theta_grid(cfg.grid_step, cfg.grid_max)?,
            default_threshold: cfg.default_threshold,
            tz_offset_min: cfg.tz_offset_min,
        };
        let calibration = calibrate_speed_table(&train_ls, network, &cal_cfg, &priors)?;
        let dense = calibration.table.dense(&network.grid);
        let flags: BTreeMap<String, Vec<bool>> = st
            .streams
            .par_iter()
            .map(|(u, s)| {
                Ok((
                    u.clone(),
                    detect_with_lookup(
                        s,
                        network,
                        &dense,
                        calibration.table.default_threshold,
                        cfg.tz_offset_min,
                    )?,
                ))
            })
            .collect::<Result<_>>()?;

        let eval_set = if eval.is_empty() { &train } else { &eval };
        let mut fixed = DetectionCounts::default();
        let mut adaptive = DetectionCounts::default();
        for (s, labels) in eval_set {
            let f = detect_fixed(s, &network.registry, BASELINE_THRESHOLD_KMPH)?;
            fixed = fixed.merge(DetectionCounts::tally(&f, labels)?);
            adaptive = adaptive.merge(DetectionCounts::tally(&flags[&s.user_id], labels)?);
        }
        let detection = vec![
            ("fixed_120".to_string(), fixed.metrics()),
            ("adaptive".to_string(), adaptive.metrics()),
        ];
        let rows: Vec<(&str, &DetectionMetrics)> =
            detection.iter().map(|(n, m)| (n.as_str(), m)).collect();
        let flagged: usize = flags
            .values()
            .map(|f| f.iter().filter(|x| **x).count())
            .sum();
        self.note("loadshare.calibration_users", train.len());
        self.note("loadshare.eval_users", eval_set.len());
        self.note("loadshare.global_theta", calibration.global_theta);
        self.note("loadshare.flagged_records", flagged);
        for (name, m) in &detection {
            self.note(&format!("loadshare.{name}.f1"), format!("{:.4}", m.f1));
            self.note(
                &format!("loadshare.{name}.recall"),
                format!("{:.4}", m.recall),
            );
        }
        self.artifact("speed_table.csv", &calibration.table.to_csv())?;
        self.artifact("calibration.csv", &calibration_report_csv(&calibration))?;
        self.artifact("loadshare_metrics.csv", &metrics_csv(&rows))?;
        st.flags = Some(flags);
        st.detection = detection;
        Ok(())
    }

    fn localize(&mut self, st: &mut State) -> Result<()> {
        let cfg = self.cfg;
        let network = st.network()?;
        let calendar = cfg.calendar();
        let lcfg = cfg.localize_config();
        let seed = self.seed();
        let flags = st.flags.as_ref();
        let flags_of = |u: &str| flags.and_then(|f| f.get(u)).map(Vec::as_slice);

        let fit_users: Vec<(UserSegment, FitUser)> = st
            .streams
            .par_iter()
            .filter(|(u, _)| in_training_split(seed, u))
            .filter_map(|(u, s)| {
                let truth = gps_anchor(s.gps.as_deref()?, AnchorKind::Home, &calendar)?;
                let seg = st.segments.get(u).copied().or(s.segment)?;
                Some((u, s, seg, truth))
            })
            .map(|(u, s, seg, truth)| {
                let fit = FitUser::from_stream(
                    s,
                    flags_of(u),
                    truth,
                    &calendar,
                    &network.registry,
                    &lcfg,
                )?;
                Ok(fit.map(|f| (seg, f)))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let table = if fit_users.is_empty() {
            None
        } else {
            Some(SegmentParamTable::fit(&fit_users, &lcfg)?)
        };

        let segments = &st.segments;
        let rows: Vec<AnchorRow> = st
            .streams
            .par_iter()
            .map(|(u, s)| {
                let params = table.as_ref().map_or_else(Default::default, |t| {
                    t.get(segments.get(u).copied().or(s.segment))
                });
                let mut rows = Vec::with_capacity(4);
                for kind in [AnchorKind::Home, AnchorKind::Work] {
                    let weighted = infer_anchor(
                        s,
                        flags_of(u),
                        kind,
                        params,
                        &calendar,
                        &network.registry,
                        &lcfg,
                    )?;
                    let calldays = calldays_anchor(s, kind, &calendar, &network.registry)?;
                    for (method, anchor) in [
                        (AnchorMethod::Weighted, weighted),
                        (AnchorMethod::CallDays, calldays),
                    ] {
                        if let Some(anchor) = anchor {
                            rows.push(AnchorRow {
                                user_id: u.clone(),
                                kind,
                                method,
                                anchor,
                            });
                        }
                    }
                }
                Ok(rows)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();

        self.note("localize.fit_users", fit_users.len());
        self.note("localize.anchors", rows.len());
        match &table {
            Some(t) => {
                let p = t.global.params;
                self.note(
                    "localize.global_params",
                    format!("{:.1},{:.1},{:.1}", p.alpha, p.beta, p.gamma),
                );
                self.artifact("params.csv", &t.to_csv())?;
            }
            None => self.note("localize.global_params", "default"),
        }
        self.artifact("anchors.csv", &anchors_csv(&rows))?;
        st.anchors = rows;
        Ok(())
    }

    fn odmatrix(&mut self, st: &mut State) -> Result<()> {
        let districts = ingest::load_regions(&self.cfg.input_path("districts"))?.value;
        for method in [AnchorMethod::Weighted, AnchorMethod::CallDays] {
            let pairs = anchor_pairs(&st.anchors, method);
            let od = build_od_matrix(pairs.values().map(|p| (p[0], p[1])), &districts)?;
            let name = match method {
                AnchorMethod::Weighted => "od_matrix.csv".to_string(),
                AnchorMethod::CallDays => "od_matrix_calldays.csv".to_string(),
            };
            self.note(&format!("odmatrix.{}.users", method.as_str()), od.total());
            self.artifact(&name, &od.to_csv())?;
            st.od.push((method, od));
        }
        Ok(())
    }

    fn evaluate(&mut self, st: &mut State) -> Result<()> {
        let cfg = self.cfg;
        let truth = ingest::load_truth_anchors(&cfg.input_path("truth_anchors"))?.value;
        let mut eval = KvReport::default();

        for method in [AnchorMethod::Weighted, AnchorMethod::CallDays] {
            for kind in [AnchorKind::Home, AnchorKind::Work] {
                let errors = anchor_errors(&st.anchors, &truth, method, kind, cfg.distance_mode);
                let prefix = format!("{}.{}", kind.as_str(), method.as_str());
                eval.push(format!("{prefix}.users"), errors.len());
                if let Some(p) = error_percentiles(&errors, &REPORT_PERCENTILES) {
                    eval.push_percentiles(&prefix, &p);
                }
            }
        }

        let districts = ingest::load_regions(&cfg.input_path("districts"))?.value;
        let located: BTreeSet<&str> = st.anchors.iter().map(|r| r.user_id.as_str()).collect();
        let reference = build_od_matrix(
            truth
                .iter()
                .filter(|(u, _)| located.contains(u.as_str()))
                .map(|(_, t)| (t.home, t.work)),
            &districts,
        )?;
        self.artifact("od_matrix_truth.csv", &reference.to_csv())?;
        for (method, od) in &st.od {
            let prefix = format!("od.{}", method.as_str());
            match compare_matrices(od, &reference, cfg.df_mode) {
                Ok(r) => eval.push_chi(&prefix, &r),
                Err(e @ Error::ZeroExpectedCell { .. }) => eval.push(format!("{prefix}.status"), e),
                Err(e) => return Err(e),
            }
        }

        for (name, m) in &st.detection {
            eval.push(
                format!("loadshare.{name}.precision"),
                format!("{:.4}", m.precision),
            );
            eval.push(
                format!("loadshare.{name}.recall"),
                format!("{:.4}", m.recall),
            );
            eval.push(format!("loadshare.{name}.f1"), format!("{:.4}", m.f1));
        }
        if let Some((model, majority)) = &st.classification {
            eval.push("profile.macro_f1", format!("{:.4}", model.macro_f1));
            eval.push(
                "profile.majority_macro_f1",
                format!("{:.4}", majority.macro_f1),
            );
        }

        let flags_path = cfg.input_path("truth_flags");
        if flags_path.exists() {
            let network = st.network()?;
            let truth_flags = ingest::load_truth_flags(&flags_path, &network.registry)?.value;
            let (agree, total) = truth_agreement(st.streams.values(), &truth_flags)?;
            eval.push("truth_flags.compared", total);
            eval.push(
                "truth_flags.agreement",
                format!("{:.4}", agree as f64 / total.max(1) as f64),
            );
        }

        for (k, v) in eval.entries.clone() {
            self.report.summary.push(format!("evaluate.{k}"), v);
        }
        self.artifact("eval_report.txt", &eval.to_text())
    }
}

fn majority_class(ys: &[UserSegment]) -> UserSegment {
    let mut counts = [0usize; UserSegment::COUNT];
    for y in ys {
        counts[y.index()] += 1;
    }
    let best = (0..UserSegment::COUNT).fold(0, |b, k| if counts[k] > counts[b] { k } else { b });
    UserSegment::ALL[best]
}

/// `[home, work]` per user for one method.
pub fn anchor_pairs(
    rows: &[AnchorRow],
    method: AnchorMethod,
) -> BTreeMap<&str, [Option<LatLon>; 2]> {
    let mut pairs: BTreeMap<&str, [Option<LatLon>; 2]> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.method == method) {
        let slot = match r.kind {
            AnchorKind::Home => 0,
            AnchorKind::Work => 1,
        };
        pairs.entry(r.user_id.as_str()).or_default()[slot] = Some(r.anchor.position);
    }
    pairs
}

/// Distance in meters from each inferred anchor to its reference.
pub fn anchor_errors(
    rows: &[AnchorRow],
    truth: &BTreeMap<String, TruthAnchor>,
    method: AnchorMethod,
    kind: AnchorKind,
    mode: DistanceMode,
) -> Vec<f64> {
    rows.iter()
        .filter(|r| r.method == method && r.kind == kind)
        .filter_map(|r| {
            let t = truth.get(&r.user_id)?;
            let reference = match kind {
                AnchorKind::Home => t.home,
                AnchorKind::Work => t.work,
            }?;
            Some(mode.distance_km(r.anchor.position, reference) * 1000.0)
        })
        .collect()
}

/// Compares reference flags with GPS-derived labels on records whose label
/// is known; returns `(agreeing, compared)`.
pub fn truth_agreement<'a, I>(streams: I, truth: &ingest::TruthFlags) -> Result<(u64, u64)>
where
    I: IntoIterator<Item = &'a UserStream>,
{
    let (mut agree, mut total) = (0u64, 0u64);
    for s in streams {
        let (Some(flags), Some(gps)) = (truth.get(&s.user_id), s.gps.as_ref()) else {
            continue;
        };
        if gps.is_empty() {
            continue;
        }
        let labels = label_ground_truth(s)?;
        for (r, label) in s.records.iter().zip(labels) {
            let Some(known) = label.known() else { continue };
            let key = (r.timestamp, r.cell);
            if let Ok(i) = flags.binary_search_by(|f| (f.0, f.1).cmp(&key)) {
                total += 1;
                agree += u64::from(flags[i].2 == known);
            }
        }
    }
    Ok((agree, total))
}

/// Names of every file a full run writes into the output directory.
pub fn artifact_names() -> &'static [&'static str] {
    &[
        "ingest_rejections.csv",
        "entropy.csv",
        "model.txt",
        "segments.csv",
        "profile_report.csv",
        "speed_table.csv",
        "calibration.csv",
        "loadshare_metrics.csv",
        "params.csv",
        "anchors.csv",
        "od_matrix.csv",
        "od_matrix_calldays.csv",
        "od_matrix_truth.csv",
        "eval_report.txt",
        "run_report.txt",
    ]
}

/// File names the generate stage writes into the data directory.
pub fn generated_names() -> Vec<&'static str> {
    let mut v: Vec<&str> = [
        DatasetKind::Cdr,
        DatasetKind::Towers,
        DatasetKind::Gps,
        DatasetKind::Labels,
        DatasetKind::Regions,
        DatasetKind::Speeds,
        DatasetKind::TruthFlags,
        DatasetKind::TruthAnchors,
    ]
    .into_iter()
    .map(DatasetKind::file_name)
    .collect();
    v.push(synthgen::DISTRICTS_FILE);
    v
}

/// Convenience for callers holding only a region file.
pub fn load_grid(path: &Path) -> Result<RegionGrid> {
    Ok(ingest::load_regions(path)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_text() {
        let mut cfg = RunConfig::from_text(
            "# comment\nseed = 9\nstages = ingest, localize\nholidays = 2024-01-15,2024-02-04\ndf_mode = contingency\ncdr = /x/cdr.csv\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(9));
        assert_eq!(cfg.stages.len(), 2);
        assert_eq!(cfg.holidays.len(), 2);
        assert_eq!(cfg.input_path("cdr"), PathBuf::from("/x/cdr.csv"));
        assert_eq!(cfg.input_path("towers"), PathBuf::from("data/towers.csv"));
        cfg.workers = Some(3);
        let again = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn bad_config_lines_are_usage_errors() {
        for text in [
            "nonsense",
            "color = red",
            "seed = x",
            "stages = teleport",
            "df_mode = both",
        ] {
            let e = RunConfig::from_text(text).unwrap_err();
            assert_eq!(exit_code(&e), 1, "{text}");
        }
    }

    #[test]
    fn seed_required_for_stochastic_stages() {
        let cfg = RunConfig::default();
        assert!(cfg.validate().is_err());
        let cfg = RunConfig {
            stages: [Stage::Ingest, Stage::Filter].into_iter().collect(),
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn plan_adds_required_stages() {
        let cfg = RunConfig {
            stages: [Stage::Filter].into_iter().collect(),
            ..RunConfig::default()
        };
        assert_eq!(
            cfg.plan(Stage::Odmatrix),
            vec![
                Stage::Ingest,
                Stage::Filter,
                Stage::Localize,
                Stage::Odmatrix
            ]
        );
        assert_eq!(cfg.plan(Stage::Generate), vec![Stage::Generate]);
        let all = RunConfig::default();
        assert_eq!(
            all.plan(Stage::Profile),
            vec![Stage::Ingest, Stage::Filter, Stage::Profile]
        );
    }

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(exit_code(&Error::InvalidConfig("x".into())), 1);
        assert_eq!(exit_code(&Error::NoUsers), 2);
        assert_eq!(
            exit_code(&Error::DimensionMismatch {
                expected: 1,
                found: 2
            }),
            3
        );
    }

    #[test]
    fn split_is_stable_and_balanced() {
        let ids: Vec<String> = (0..2000).map(|i| format!("U{i:05}")).collect();
        let n = ids.iter().filter(|u| in_training_split(4, u)).count();
        assert!((900..1100).contains(&n), "{n}");
        assert!(ids
            .iter()
            .all(|u| in_training_split(4, u) == in_training_split(4, u)));
    }
}
