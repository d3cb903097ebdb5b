//! Seeded experiment harness: builds one session stream from a master
//! seed, runs a method over it, and writes `report.json` + `curves.csv`.
//! Also compares finished reports and materializes blob datasets.
//!
//! Every random component draws from its own stream,
//! `derive_seed(master, ROLE_TAG)`, so methods never perturb each other.
//! All methods use the same training-stream tag: with one session and
//! matched widths/schedules the frozen-head method and experience replay
//! consume identical random numbers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{er_train_session, gdumb_train_session, width_for_budget, SingleHeadModel};
use crate::classifier_bank::ClassifierBank;
use crate::datasets::{
    gen_gaussian_blobs, load_feature_file, save_feature_file, split_into_groups, BlobSpec, Dataset, SessionStream,
};
use crate::error::{Error, Result};
use crate::eval::{confusion_matrix, forgetting, last_group_bias, AccuracyMatrix};
use crate::memory_buffer::ReplayBuffer;
use crate::numerics::{derive_seed, Rng};
use crate::parallel::Exec;
use crate::trainer::{train_session_with, BiasCorrection, SessionConfig, SessionReport};

pub const DATA_TAG: u64 = 0x6461_7461; // "data"
pub const SPLIT_TAG: u64 = 0x7370_6c69; // "spli"
pub const TRAIN_TAG: u64 = 0x7472_6169; // "trai"

pub const REPORT_FILE: &str = "report.json";
pub const CURVES_FILE: &str = "curves.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gdumb,
    Er,
    OursNoFreeze,
    OursNoBic,
    Ours,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::OursNoBic => "ours_no_bic",
            Method::OursNoFreeze => "ours_no_freeze",
            Method::Er => "er",
            Method::Gdumb => "gdumb",
        }
    }

    pub fn is_bank(self) -> bool {
        matches!(self, Method::Ours | Method::OursNoBic | Method::OursNoFreeze)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Blobs(BlobSpec),
    Files { train: PathBuf, test: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub dataset: DatasetSource,
    pub num_splits: usize,
    pub memory_capacity: usize,
    pub seed: u64,
    #[serde(default)]
    pub session: SessionConfig,
    /// When set, each session's head width is this total split evenly over
    /// the sessions (`session.hidden_width` is then ignored).
    #[serde(default)]
    pub total_hidden_width: Option<usize>,
    /// Hidden width of the single-head baselines. When absent it is the
    /// smallest width whose parameter count reaches the frozen-head
    /// method's final total.
    #[serde(default)]
    pub baseline_hidden_width: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Reads a JSON config; relative dataset paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let DatasetSource::Files { train, test } = &mut cfg.dataset {
            for p in [train, test] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        if let Some(out) = &mut cfg.output_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_splits == 0 {
            return Err(Error::InvalidArgument("num_splits must be >= 1".into()));
        }
        if self.memory_capacity == 0 {
            return Err(Error::InvalidArgument("memory_capacity must be >= 1".into()));
        }
        if self.total_hidden_width == Some(0) {
            return Err(Error::InvalidArgument("total_hidden_width must be >= 1".into()));
        }
        if self.baseline_hidden_width == Some(0) {
            return Err(Error::InvalidArgument("baseline_hidden_width must be >= 1".into()));
        }
        self.session.validate()
    }

    /// Session config with the effective per-head width applied.
    pub fn effective_session(&self) -> SessionConfig {
        let mut s = self.session.clone();
        if let Some(total) = self.total_hidden_width {
            s.hidden_width = per_session_width(total, self.num_splits);
        }
        s
    }
}

/// `max(1, round(total / splits))`.
pub fn per_session_width(total: usize, splits: usize) -> usize {
    ((total as f64 / splits.max(1) as f64).round() as usize).max(1)
}

/// Loads or generates `(train, test)` for a dataset source.
pub fn load_dataset(source: &DatasetSource, seed: u64) -> Result<(Dataset, Dataset)> {
    match source {
        DatasetSource::Blobs(spec) => gen_gaussian_blobs(spec, &mut Rng::new(derive_seed(seed, DATA_TAG))),
        DatasetSource::Files { train, test } => Ok((load_feature_file(train)?, load_feature_file(test)?)),
    }
}

/// The session stream every method of one experiment shares.
pub fn build_stream(cfg: &ExperimentConfig) -> Result<SessionStream> {
    let (train, test) = load_dataset(&cfg.dataset, cfg.seed)?;
    let classes = train.class_set().len();
    if cfg.memory_capacity <= classes {
        return Err(Error::InvalidArgument(format!(
            "memory_capacity ({}) must exceed the number of classes ({classes})",
            cfg.memory_capacity
        )));
    }
    split_into_groups(
        &train,
        &test,
        cfg.num_splits,
        cfg.session.val_fraction,
        &mut Rng::new(derive_seed(cfg.seed, SPLIT_TAG)),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub session: usize,
    pub classes: Vec<usize>,
    pub seen_classes: usize,
    pub seen_accuracy: f64,
    pub accuracy_row: Vec<f64>,
    /// Share of old-class test examples predicted into this session's classes.
    pub last_group_bias: Option<f64>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub training: SessionReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: Method,
    pub dataset: DatasetSource,
    pub num_splits: usize,
    pub memory_capacity: usize,
    pub seed: u64,
    pub session_config: SessionConfig,
    pub hidden_width: usize,
    pub stream_fingerprint: String,
    pub class_order: Vec<usize>,
    pub sessions: Vec<SessionResult>,
    pub final_accuracy: f64,
    pub forgetting: Vec<f64>,
}

impl ExperimentReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn curves_csv(&self) -> String {
        let mut out = String::from("session,seen_classes,method,accuracy\n");
        for s in &self.sessions {
            let _ = writeln!(out, "{},{},{},{:?}", s.session, s.seen_classes, self.method, s.seen_accuracy);
        }
        out
    }
}

/// Parameter count of one frozen-head bank head.
fn head_params(in_dim: usize, hidden: usize, outputs: usize) -> usize {
    in_dim * hidden + hidden + hidden * outputs + outputs
}

enum Model {
    Bank(ClassifierBank),
    Single(SingleHeadModel),
}

impl Model {
    fn predict(&self, e: &crate::datasets::LabeledExample) -> Result<usize> {
        match self {
            Model::Bank(b) => b.predict(&e.features, true),
            Model::Single(m) => m.predict(&e.features, true),
        }
    }
}

/// Runs the experiment in memory without touching the output directory.
pub fn execute(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let stream = build_stream(cfg)?;
    let in_dim = stream.feature_shape().d;
    let session_cfg = &cfg.effective_session();
    let group = stream.sessions[0].classes.len();
    let total_classes = stream.class_order.len();

    let hidden_width = if cfg.method.is_bank() {
        session_cfg.hidden_width
    } else {
        cfg.baseline_hidden_width.unwrap_or_else(|| {
            let ours_total = cfg.num_splits * head_params(in_dim, session_cfg.hidden_width, group);
            width_for_budget(in_dim, total_classes, ours_total)
        })
    };

    let mut rng = Rng::new(derive_seed(cfg.seed, TRAIN_TAG));
    let mut buffer = ReplayBuffer::new(cfg.memory_capacity);
    let mut model = match cfg.method {
        Method::OursNoFreeze => Model::Bank(ClassifierBank::without_freezing(in_dim)),
        m if m.is_bank() => Model::Bank(ClassifierBank::new(in_dim)),
        _ => Model::Single(SingleHeadModel::new(in_dim, hidden_width, session_cfg.use_activation)),
    };
    let bias = if cfg.method == Method::OursNoBic { BiasCorrection::Skip } else { BiasCorrection::Fit };

    let mut matrix = AccuracyMatrix::new();
    let mut sessions = Vec::with_capacity(stream.sessions.len());
    for (i, session) in stream.sessions.iter().enumerate() {
        let report = match (&mut model, cfg.method) {
            (Model::Bank(bank), _) => train_session_with(bank, session, &mut buffer, session_cfg, bias, &mut rng)?,
            (Model::Single(m), Method::Er) => er_train_session(m, session, i, &mut buffer, session_cfg, &mut rng)?,
            (Model::Single(m), _) => gdumb_train_session(m, session, &mut buffer, session_cfg, &mut rng)?,
        };
        let tests: Vec<&Dataset> = stream.sessions[..=i].iter().map(|s| &s.test).collect();
        matrix.record(|e| model.predict(e), &tests)?;

        let last_group_bias = if i > 0 {
            let seen = Dataset::concat(stream.feature_shape(), tests.iter().copied())?;
            let cm = confusion_matrix(|e| model.predict(e), &seen)?;
            let last: BTreeSet<usize> = session.classes.iter().copied().collect();
            Some(last_group_bias(&cm, &last)?)
        } else {
            None
        };
        let (trainable_params, total_params) = match &model {
            Model::Bank(b) => (
                b.heads().iter().skip(if b.freezes_previous() { i } else { 0 }).map(|h| h.param_count()).sum(),
                b.count_total_params(),
            ),
            Model::Single(m) => (m.param_count(), m.param_count()),
        };
        sessions.push(SessionResult {
            session: i + 1,
            classes: session.classes.clone(),
            seen_classes: stream.sessions[..=i].iter().map(|s| s.classes.len()).sum(),
            seen_accuracy: matrix.seen_accuracy[i],
            accuracy_row: matrix.acc[i].clone(),
            last_group_bias,
            trainable_params,
            total_params,
            training: report,
        });
    }

    Ok(ExperimentReport {
        method: cfg.method,
        dataset: cfg.dataset.clone(),
        num_splits: cfg.num_splits,
        memory_capacity: cfg.memory_capacity,
        seed: cfg.seed,
        session_config: session_cfg.clone(),
        hidden_width,
        stream_fingerprint: stream.fingerprint(),
        class_order: stream.class_order.clone(),
        final_accuracy: matrix.final_accuracy().unwrap_or(0.0),
        forgetting: forgetting(&matrix),
        sessions,
    })
}

/// Writes files atomically-ish: each goes to a temporary name first, and
/// everything written so far is removed if any step fails.
fn write_all(dir: &Path, files: &[(&str, String)]) -> Result<Vec<PathBuf>> {
    let created_dir = !dir.exists();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| -> Result<()> {
        for (name, body) in files {
            let tmp = dir.join(format!(".{name}.tmp"));
            let dest = dir.join(name);
            written.push(tmp.clone());
            fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
            fs::rename(&tmp, &dest).map_err(|e| Error::io(&dest, e))?;
            written.pop();
            written.push(dest);
        }
        Ok(())
    })();
    match result {
        Ok(()) => Ok(written),
        Err(e) => {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            if created_dir {
                let _ = fs::remove_dir(dir);
            }
            Err(e)
        }
    }
}

/// Runs the experiment and writes `report.json` and `curves.csv` into the
/// configured output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let dir = cfg
        .output_dir
        .clone()
        .ok_or_else(|| Error::InvalidArgument("output_dir is required to write reports".into()))?;
    let report = execute(cfg)?;
    write_all(&dir, &[(REPORT_FILE, report.to_json()?), (CURVES_FILE, report.curves_csv())])?;
    Ok(report)
}

/// Runs independent experiments side by side; results keep input order.
pub fn run_grid(configs: &[ExperimentConfig], exec: Exec) -> Vec<Result<ExperimentReport>> {
    exec.map(configs, execute)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// `(num_splits, memory_capacity)` columns in ascending order.
    pub cells: Vec<(usize, usize)>,
    /// Rows in method order; `None` where a method has no report for a cell.
    pub rows: Vec<(Method, Vec<Option<f64>>)>,
    /// Number of reports (seeds) behind each cell value.
    pub counts: Vec<(Method, Vec<usize>)>,
    /// Per-session curves of every report.
    pub curves: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: Method,
    pub num_splits: usize,
    pub memory_capacity: usize,
    pub seed: u64,
    pub session: usize,
    pub seen_classes: usize,
    pub accuracy: f64,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Tabulates median final accuracy per method and `(splits, memory)` cell.
pub fn compare(reports: &[ExperimentReport]) -> Result<Comparison> {
    let first = reports.first().ok_or(Error::Empty("report list"))?;
    for r in reports {
        if r.dataset != first.dataset {
            return Err(Error::Incompatible(format!(
                "dataset {:?} differs from {:?}",
                r.dataset, first.dataset
            )));
        }
    }
    let mut grouped: BTreeMap<(Method, usize, usize), Vec<f64>> = BTreeMap::new();
    for r in reports {
        grouped
            .entry((r.method, r.num_splits, r.memory_capacity))
            .or_default()
            .push(r.final_accuracy);
    }
    let cells: Vec<(usize, usize)> = grouped
        .keys()
        .map(|&(_, s, m)| (s, m))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let methods: BTreeSet<Method> = grouped.keys().map(|k| k.0).collect();
    let mut rows = Vec::new();
    let mut counts = Vec::new();
    for &method in &methods {
        let mut row = Vec::new();
        let mut count = Vec::new();
        for &(s, m) in &cells {
            let mut vals = grouped.get(&(method, s, m)).cloned().unwrap_or_default();
            count.push(vals.len());
            row.push(median(&mut vals));
        }
        rows.push((method, row));
        counts.push((method, count));
    }
    let curves = reports
        .iter()
        .flat_map(|r| {
            r.sessions.iter().map(move |s| CurvePoint {
                method: r.method,
                num_splits: r.num_splits,
                memory_capacity: r.memory_capacity,
                seed: r.seed,
                session: s.session,
                seen_classes: s.seen_classes,
                accuracy: s.seen_accuracy,
            })
        })
        .collect();
    Ok(Comparison {
        cells,
        rows,
        counts,
        curves,
    })
}

impl Comparison {
    fn cell_name(&(s, m): &(usize, usize)) -> String {
        format!("splits{s}_mem{m}")
    }

    pub fn table_csv(&self) -> String {
        let mut out = String::from("method");
        for c in &self.cells {
            let _ = write!(out, ",{}", Self::cell_name(c));
        }
        out.push('\n');
        for (method, row) in &self.rows {
            out.push_str(method.name());
            for v in row {
                match v {
                    Some(x) => {
                        let _ = write!(out, ",{x:?}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn curves_csv(&self) -> String {
        let mut out = String::from("session,seen_classes,method,splits,memory,seed,accuracy\n");
        for p in &self.curves {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:?}",
                p.session, p.seen_classes, p.method, p.num_splits, p.memory_capacity, p.seed, p.accuracy
            );
        }
        out
    }

    /// Fixed-width console rendering, accuracies in percent.
    pub fn render(&self) -> String {
        let names: Vec<String> = self.cells.iter().map(Self::cell_name).collect();
        let width = names.iter().map(|n| n.len()).max().unwrap_or(8).max(8);
        let mut out = format!("{:<16}", "method");
        for n in &names {
            let _ = write!(out, " {n:>width$}");
        }
        out.push('\n');
        for (method, row) in &self.rows {
            let _ = write!(out, "{:<16}", method.name());
            for v in row {
                match v {
                    Some(x) => {
                        let _ = write!(out, " {:>width$.2}", 100.0 * x);
                    }
                    None => {
                        let _ = write!(out, " {:>width$}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    /// Writes `comparison.csv` and `merged_curves.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        write_all(
            dir,
            &[("comparison.csv", self.table_csv()), ("merged_curves.csv", self.curves_csv())],
        )
    }
}

/// Blob-dataset generation request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub blobs: BlobSpec,
    pub seed: u64,
}

impl DataSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Materializes `train.csv` and `test.csv` in `out`. A run over these
/// files with the same seed sees exactly the data an in-memory blob run does.
pub fn generate_data(spec: &DataSpec, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let (train, test) = load_dataset(&DatasetSource::Blobs(spec.blobs.clone()), spec.seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (train_path, test_path) = (out.join("train.csv"), out.join("test.csv"));
    save_feature_file(&train, &train_path)?;
    if let Err(e) = save_feature_file(&test, &test_path) {
        let _ = fs::remove_file(&train_path);
        return Err(e);
    }
    Ok((train_path, test_path))
}
