//! Hyperparameter grid runs, sharpness measurement and correlation reports.
//!
//! A study directory holds `records/<config-id>.json` (one per grid point,
//! written as soon as the point finishes), `summary.csv`, `report.json` and
//! a `timings.log` with wall-clock times, which are kept out of the records
//! so that reruns reproduce them byte for byte.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landscape::{eval_batches, NetworkObjective};
use crate::nn::{Arch, ModelSpec};
use crate::optim::{OptimConfig, OptimKind};
use crate::sharpness::{mean_std, pearson, sharpness_study, SharpnessConfig, SharpnessResult};
use crate::synth::{examples, generate_dataset, split_iid_ood, Dataset, SynthConfig};
use crate::train::{accuracy, train, TrainConfig};

/// Eval-mode train accuracy of the selected state at which a configuration counts as converged.
pub const CONVERGED_TRAIN_ACCURACY: f64 = 0.99;

/// Skips grid points matching every field that is set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub arch: Option<Arch>,
    pub optimiser: Option<OptimKind>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
}

impl Exclusion {
    pub fn matches(&self, p: &GridPoint) -> bool {
        self.arch.map_or(true, |v| v == p.arch)
            && self.optimiser.map_or(true, |v| v == p.optimiser)
            && self.lr.map_or(true, |v| v == p.lr)
            && self.batch_size.map_or(true, |v| v == p.batch_size)
            && self.seed.map_or(true, |v| v == p.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub archs: Vec<Arch>,
    pub optimisers: Vec<OptimKind>,
    pub lrs: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub exclusions: Vec<Exclusion>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            archs: vec![Arch::Mini10, Arch::Mini14],
            optimisers: vec![OptimKind::Sgd, OptimKind::Adam],
            lrs: vec![1e-3, 1e-4, 1e-5],
            batch_sizes: vec![16, 32],
            seeds: vec![42, 43],
            exclusions: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub arch: Arch,
    pub optimiser: OptimKind,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl GridPoint {
    pub fn config_id(&self) -> String {
        format!(
            "{}-{}-lr{:e}-bs{}-s{}",
            self.arch, self.optimiser, self.lr, self.batch_size, self.seed
        )
    }
}

impl GridSpec {
    /// Cartesian product minus exclusions, in a fixed order.
    pub fn points(&self) -> Result<Vec<GridPoint>> {
        if self.archs.contains(&Arch::Quadratic) {
            return Err(Error::invalid("the quadratic model cannot be trained"));
        }
        if self.lrs.iter().any(|&l| !(l > 0.0)) || self.batch_sizes.contains(&0) {
            return Err(Error::invalid("learning rates and batch sizes must be positive"));
        }
        let mut out = Vec::new();
        for &arch in &self.archs {
            for &optimiser in &self.optimisers {
                for &lr in &self.lrs {
                    for &batch_size in &self.batch_sizes {
                        for &seed in &self.seeds {
                            let p = GridPoint {
                                arch,
                                optimiser,
                                lr,
                                batch_size,
                                seed,
                            };
                            if !self.exclusions.iter().any(|e| e.matches(&p)) {
                                out.push(p);
                            }
                        }
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(Error::invalid("the grid is empty after exclusions"));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub data: SynthConfig,
    pub epochs: usize,
    pub sharpness: SharpnessConfig,
    /// Training samples the sharpness scans evaluate on (0 = all).
    pub eval_samples: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            data: SynthConfig::default(),
            epochs: 50,
            sharpness: SharpnessConfig::default(),
            eval_samples: DEFAULT_EVAL_SAMPLES,
        }
    }
}

/// Default cap on training samples used by sharpness scans.
pub const DEFAULT_EVAL_SAMPLES: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum RunStatus {
    Ok,
    Diverged { epoch: usize },
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub config_id: String,
    pub arch: Arch,
    pub optimiser: OptimKind,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub epochs: usize,
    pub status: RunStatus,
    pub best_epoch: Option<usize>,
    /// Running train accuracy of the last epoch.
    pub final_train_accuracy: Option<f64>,
    /// Accuracies below are of the best-epoch state, in eval mode.
    pub train_accuracy: Option<f64>,
    pub dev_accuracy: Option<f64>,
    pub iid_accuracy: Option<f64>,
    pub ood_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub sharpness: Option<SharpnessResult>,
}

impl StudyRecord {
    fn empty(p: &GridPoint, epochs: usize, status: RunStatus) -> Self {
        Self {
            config_id: p.config_id(),
            arch: p.arch,
            optimiser: p.optimiser,
            lr: p.lr,
            batch_size: p.batch_size,
            seed: p.seed,
            epochs,
            status,
            best_epoch: None,
            final_train_accuracy: None,
            train_accuracy: None,
            dev_accuracy: None,
            iid_accuracy: None,
            ood_accuracy: None,
            test_accuracy: None,
            sharpness: None,
        }
    }

    pub fn converged(&self) -> bool {
        self.status == RunStatus::Ok && self.train_accuracy.is_some_and(|a| a >= CONVERGED_TRAIN_ACCURACY)
    }

    /// Finite mean sharpness of a successful run.
    pub fn mean_sharpness(&self) -> Option<f64> {
        let s = self.sharpness.as_ref()?;
        (self.status == RunStatus::Ok && !s.is_divergent() && s.mean.is_finite()).then_some(s.mean)
    }
}

/// Trains, evaluates and measures one grid point. Failures end up in the
/// record's status.
pub fn run_point(data: &Dataset, p: &GridPoint, cfg: &StudyConfig) -> StudyRecord {
    match run_point_inner(data, p, cfg) {
        Ok(r) => r,
        Err(Error::Diverged { epoch, .. }) => StudyRecord::empty(p, cfg.epochs, RunStatus::Diverged { epoch }),
        Err(e) => StudyRecord::empty(p, cfg.epochs, RunStatus::Failed(e.to_string())),
    }
}

fn run_point_inner(data: &Dataset, p: &GridPoint, cfg: &StudyConfig) -> Result<StudyRecord> {
    let train_s = data.train();
    let test_s = data.test();
    let (iid_s, ood_s) = split_iid_ood(&test_s)?;
    let (tr, iid, ood, test) = (examples(&train_s), examples(&iid_s), examples(&ood_s), examples(&test_s));
    let spec = ModelSpec::for_arch(p.arch, data.config.classes, data.config.bins)?;
    let mut tc = TrainConfig::new(OptimConfig::new(p.optimiser, p.lr), p.batch_size, p.seed);
    tc.epochs = cfg.epochs;
    let out = train(&spec, &tr, &iid, &tc)?;
    let state = out.state;
    let n_eval = if cfg.eval_samples == 0 { tr.len() } else { cfg.eval_samples.min(tr.len()) };
    let batches = eval_batches(&tr[..n_eval])?;
    let objective = NetworkObjective::new(&state, &batches);
    let (sharp, _) = sharpness_study(&objective, &cfg.sharpness, "train", n_eval)?;
    let mut r = StudyRecord::empty(p, cfg.epochs, RunStatus::Ok);
    r.best_epoch = Some(out.best_epoch);
    r.final_train_accuracy = out.logs.last().map(|l| l.train_accuracy);
    r.train_accuracy = Some(accuracy(&state, &tr)?);
    r.dev_accuracy = Some(out.logs[out.best_epoch - 1].dev_accuracy);
    r.iid_accuracy = Some(accuracy(&state, &iid)?);
    r.ood_accuracy = if ood.is_empty() { None } else { Some(accuracy(&state, &ood)?) };
    r.test_accuracy = Some(accuracy(&state, &test)?);
    r.sharpness = Some(sharp);
    Ok(r)
}

fn record_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("records").join(format!("{id}.json"))
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_record(dir: &Path, r: &StudyRecord) -> Result<()> {
    let path = record_path(dir, &r.config_id);
    let mut text = serde_json::to_string_pretty(r)?;
    text.push('\n');
    write_atomic(&path, &text)
}

/// Records found in `dir/records`, sorted by config id.
pub fn load_records(dir: &Path) -> Result<Vec<StudyRecord>> {
    let rdir = dir.join("records");
    let mut out = Vec::new();
    let entries = fs::read_dir(&rdir).map_err(|e| Error::io(&rdir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&rdir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            out.push(serde_json::from_str::<StudyRecord>(&text)?);
        }
    }
    out.sort_by(|a, b| a.config_id.cmp(&b.config_id));
    Ok(out)
}

/// Runs every grid point not already recorded in `dir` and returns all
/// records in grid order.
pub fn run_study(
    grid: &GridSpec,
    cfg: &StudyConfig,
    dir: &Path,
    mut progress: impl FnMut(&StudyRecord, bool),
) -> Result<Vec<StudyRecord>> {
    let points = grid.points()?;
    let rdir = dir.join("records");
    fs::create_dir_all(&rdir).map_err(|e| Error::io(&rdir, e))?;
    let mut data: Option<Dataset> = None;
    let mut records = Vec::with_capacity(points.len());
    for p in &points {
        let path = record_path(dir, &p.config_id());
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(r) = serde_json::from_str::<StudyRecord>(&text) {
                progress(&r, true);
                records.push(r);
                continue;
            }
        }
        let data = match &mut data {
            Some(d) => d,
            slot => slot.insert(generate_dataset(&cfg.data)?),
        };
        let start = Instant::now();
        let r = run_point(data, p, cfg);
        write_record(dir, &r)?;
        let log = dir.join("timings.log");
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log)
            .map_err(|e| Error::io(&log, e))?;
        writeln!(f, "{} {:.3}", r.config_id, start.elapsed().as_secs_f64()).map_err(|e| Error::io(&log, e))?;
        progress(&r, false);
        records.push(r);
    }
    Ok(records)
}

/// One row per record.
pub fn write_summary(path: &Path, records: &[StudyRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "config_id",
        "arch",
        "optimiser",
        "lr",
        "batch_size",
        "seed",
        "status",
        "best_epoch",
        "final_train_accuracy",
        "train_accuracy",
        "dev_accuracy",
        "iid_accuracy",
        "ood_accuracy",
        "test_accuracy",
        "sharpness_mean",
        "sharpness_std",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        let status = match &r.status {
            RunStatus::Ok => "ok".to_string(),
            RunStatus::Diverged { epoch } => format!("diverged@{epoch}"),
            RunStatus::Failed(_) => "failed".to_string(),
        };
        let (sm, ss) = match &r.sharpness {
            Some(s) if s.mean.is_finite() => (s.mean.to_string(), s.std.to_string()),
            Some(_) => ("inf".to_string(), String::new()),
            None => (String::new(), String::new()),
        };
        w.write_record([
            r.config_id.clone(),
            r.arch.to_string(),
            r.optimiser.to_string(),
            r.lr.to_string(),
            r.batch_size.to_string(),
            r.seed.to_string(),
            status,
            r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
            opt(r.final_train_accuracy),
            opt(r.train_accuracy),
            opt(r.dev_accuracy),
            opt(r.iid_accuracy),
            opt(r.ood_accuracy),
            opt(r.test_accuracy),
            sm,
            ss,
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Least-squares `y = slope·x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub config_id: String,
    pub sharpness: f64,
    pub iid_accuracy: f64,
    pub ood_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCorrelation {
    /// `None` when either side has zero variance.
    pub r: Option<f64>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub iid: MetricCorrelation,
    pub ood: MetricCorrelation,
    pub test: MetricCorrelation,
    pub degenerate: bool,
    pub rows: Vec<ScatterRow>,
}

/// Pearson correlations of mean sharpness against IID, OOD and combined
/// test accuracy over non-divergent records.
pub fn correlation_report(records: &[StudyRecord]) -> Result<CorrelationReport> {
    let mut rows: Vec<ScatterRow> = records
        .iter()
        .filter_map(|r| {
            Some(ScatterRow {
                config_id: r.config_id.clone(),
                sharpness: r.mean_sharpness()?,
                iid_accuracy: r.iid_accuracy?,
                ood_accuracy: r.ood_accuracy?,
                test_accuracy: r.test_accuracy?,
            })
        })
        .collect();
    if rows.len() < 3 {
        return Err(Error::invalid(format!(
            "correlation needs at least 3 non-divergent records, got {}",
            rows.len()
        )));
    }
    rows.sort_by(|a, b| a.config_id.cmp(&b.config_id));
    let xs: Vec<f64> = rows.iter().map(|r| r.sharpness).collect();
    let metric = |f: fn(&ScatterRow) -> f64| -> Result<MetricCorrelation> {
        let ys: Vec<f64> = rows.iter().map(f).collect();
        let r = match pearson(&xs, &ys) {
            Ok(r) => Some(r),
            Err(Error::ZeroVariance) => None,
            Err(e) => return Err(e),
        };
        let fit = linear_fit(&xs, &ys);
        Ok(MetricCorrelation {
            r,
            slope: fit.map(|f| f.0),
            intercept: fit.map(|f| f.1),
        })
    };
    let iid = metric(|r| r.iid_accuracy)?;
    let ood = metric(|r| r.ood_accuracy)?;
    let test = metric(|r| r.test_accuracy)?;
    let degenerate = iid.r.is_none() || ood.r.is_none() || test.r.is_none();
    Ok(CorrelationReport {
        iid,
        ood,
        test,
        degenerate,
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupKey {
    Architecture,
    Optimiser,
    LearningRate,
    BatchSize,
    Seed,
}

impl GroupKey {
    pub const ALL: [GroupKey; 5] = [
        GroupKey::Architecture,
        GroupKey::Optimiser,
        GroupKey::LearningRate,
        GroupKey::BatchSize,
        GroupKey::Seed,
    ];
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupKey::Architecture => "architecture",
            GroupKey::Optimiser => "optimiser",
            GroupKey::LearningRate => "learning-rate",
            GroupKey::BatchSize => "batch-size",
            GroupKey::Seed => "seed",
        })
    }
}

impl FromStr for GroupKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "architecture" | "arch" => Ok(GroupKey::Architecture),
            "optimiser" | "optimizer" => Ok(GroupKey::Optimiser),
            "learning-rate" | "lr" => Ok(GroupKey::LearningRate),
            "batch-size" => Ok(GroupKey::BatchSize),
            "seed" => Ok(GroupKey::Seed),
            other => Err(Error::invalid(format!("unknown group key `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub value: String,
    pub count: usize,
    pub mean_sharpness: f64,
    pub std_sharpness: f64,
    pub mean_iid_accuracy: f64,
    pub mean_ood_accuracy: f64,
    pub mean_test_accuracy: f64,
}

/// Sort key for group values: numeric where the key is numeric.
#[derive(PartialEq, PartialOrd)]
enum Order {
    Num(f64),
    Text(String),
}

/// Per-group means of mean sharpness and accuracies over non-divergent
/// records.
pub fn disaggregate(records: &[StudyRecord], key: GroupKey) -> Result<Vec<GroupSummary>> {
    let usable: Vec<(&StudyRecord, f64)> = records
        .iter()
        .filter_map(|r| {
            let s = r.mean_sharpness()?;
            (r.iid_accuracy.is_some() && r.test_accuracy.is_some()).then_some((r, s))
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::invalid("no non-divergent records to group"));
    }
    let mut groups: BTreeMap<String, Vec<(&StudyRecord, f64)>> = BTreeMap::new();
    for &(r, s) in &usable {
        let v = match key {
            GroupKey::Architecture => r.arch.to_string(),
            GroupKey::Optimiser => r.optimiser.to_string(),
            GroupKey::LearningRate => format!("{:e}", r.lr),
            GroupKey::BatchSize => r.batch_size.to_string(),
            GroupKey::Seed => r.seed.to_string(),
        };
        groups.entry(v).or_default().push((r, s));
    }
    let mut out: Vec<GroupSummary> = groups
        .into_iter()
        .map(|(value, members)| {
            let n = members.len() as f64;
            let sharp: Vec<f64> = members.iter().map(|m| m.1).collect();
            let (mean_sharpness, std_sharpness) = mean_std(&sharp).expect("nonempty group");
            let mean = |f: &dyn Fn(&StudyRecord) -> f64| members.iter().map(|m| f(m.0)).sum::<f64>() / n;
            GroupSummary {
                mean_iid_accuracy: mean(&|r| r.iid_accuracy.unwrap_or(0.0)),
                mean_ood_accuracy: mean(&|r| r.ood_accuracy.unwrap_or(0.0)),
                mean_test_accuracy: mean(&|r| r.test_accuracy.unwrap_or(0.0)),
                value,
                count: members.len(),
                mean_sharpness,
                std_sharpness,
            }
        })
        .collect();
    let order = |v: &str| match v.parse::<f64>() {
        Ok(x) => Order::Num(x),
        Err(_) => Order::Text(v.to_string()),
    };
    out.sort_by(|a, b| order(&a.value).partial_cmp(&order(&b.value)).unwrap_or(std::cmp::Ordering::Equal));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub records: usize,
    pub converged: usize,
    pub ood_below_iid: usize,
    pub correlation: Option<CorrelationReport>,
    pub correlation_error: Option<String>,
    pub groups: BTreeMap<String, Vec<GroupSummary>>,
}

/// Correlations and every disaggregation, tolerant of too-small studies.
pub fn study_report(records: &[StudyRecord]) -> StudyReport {
    let (correlation, correlation_error) = match correlation_report(records) {
        Ok(c) => (Some(c), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let groups = GroupKey::ALL
        .iter()
        .filter_map(|&k| disaggregate(records, k).ok().map(|g| (k.to_string(), g)))
        .collect();
    let converged: Vec<&StudyRecord> = records.iter().filter(|r| r.converged()).collect();
    StudyReport {
        records: records.len(),
        converged: converged.len(),
        ood_below_iid: converged
            .iter()
            .filter(|r| matches!((r.ood_accuracy, r.iid_accuracy), (Some(o), Some(i)) if o < i))
            .count(),
        correlation,
        correlation_error,
        groups,
    }
}
