//! Grid search over segmentation parameters.
//!
//! Every combination of the grid is run through crop, filter, local Otsu
//! and SUBSURF on a set of cases with reference masks. Object cases score
//! the time-averaged IoU against the reference; background cases score the
//! time-averaged fraction of the image left unsegmented. A combination is
//! excluded when any case has a run of low per-slice scores. The best
//! remaining combinations vote for each parameter value.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;

use crate::config::{ConfigError, PipelineConfig};
use crate::error::{Error, Result};
use crate::grid::{ImageStack, Mask};
use crate::metrics::iou;
use crate::pipeline::{crop_stage, filter_stage, segment_stage};

/// The parameters searched by default, in grid order.
pub const DEFAULT_AXES: [&str; 8] = [
    "filter.tau_f",
    "filter.k",
    "filter.sigma",
    "otsu.window",
    "otsu.delta",
    "subsurf.tau_s",
    "subsurf.k",
    "subsurf.sigma",
];

/// One searched parameter: a config key and the values it takes.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

/// The Cartesian product of per-parameter value lists.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrid {
    axes: Vec<Axis>,
}

fn grid_error(key: &str, reason: impl Into<String>) -> Error {
    Error::Config(ConfigError::InvalidValue {
        key: key.to_string(),
        reason: reason.into(),
    })
}

impl ParamGrid {
    /// Checks that every axis has values, that keys are distinct and that
    /// every value is accepted by the config parser.
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        let mut probe = PipelineConfig::default();
        for (n, axis) in axes.iter().enumerate() {
            if axis.values.is_empty() {
                return Err(grid_error(&axis.key, "empty value list"));
            }
            if axes[..n].iter().any(|a| a.key == axis.key) {
                return Err(grid_error(&axis.key, "listed twice"));
            }
            if axis.key.starts_with("io.") || axis.key.starts_with("sweep.") {
                return Err(grid_error(&axis.key, "not a processing parameter"));
            }
            for v in &axis.values {
                probe.set(&axis.key, v)?;
            }
        }
        Ok(ParamGrid { axes })
    }

    /// The default axes, each holding only its value in `base`.
    pub fn around(base: &PipelineConfig) -> Self {
        let entries: BTreeMap<&str, String> = base.entries().into_iter().collect();
        let axes = DEFAULT_AXES
            .iter()
            .map(|&key| Axis {
                key: key.to_string(),
                values: vec![entries[key].clone()],
            })
            .collect();
        ParamGrid { axes }
    }

    /// Reads `key=v1,v2,...` lines on top of [`ParamGrid::around`]. A line
    /// for a default axis replaces its values; any other key adds an axis.
    pub fn parse(text: &str, base: &PipelineConfig) -> Result<Self> {
        let mut axes = ParamGrid::around(base).axes;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, values) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line: n + 1,
                text: raw.to_string(),
            })?;
            let key = key.trim();
            let values: Vec<String> = values
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(str::to_string)
                .collect();
            match axes.iter_mut().find(|a| a.key == key) {
                Some(axis) => axis.values = values,
                None => axes.push(Axis {
                    key: key.to_string(),
                    values,
                }),
            }
        }
        ParamGrid::new(axes)
    }

    pub fn load(path: &Path, base: &PipelineConfig) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ParamGrid::parse(&text, base)
    }

    /// One `key=v1,v2,...` line per axis.
    pub fn to_text(&self) -> String {
        self.axes
            .iter()
            .map(|a| format!("{}={}\n", a.key, a.values.join(",")))
            .collect()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    /// Number of combinations.
    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-axis value positions of combination `index`; the last axis
    /// varies fastest.
    pub fn positions(&self, index: usize) -> Vec<usize> {
        let mut rest = index;
        let mut out = vec![0; self.axes.len()];
        for (slot, axis) in out.iter_mut().zip(&self.axes).rev() {
            *slot = rest % axis.values.len();
            rest /= axis.values.len();
        }
        out
    }

    /// Parameter values of combination `index`, in axis order.
    pub fn values(&self, index: usize) -> Vec<String> {
        self.positions(index)
            .iter()
            .zip(&self.axes)
            .map(|(&p, a)| a.values[p].clone())
            .collect()
    }

    /// `base` with combination `index` applied.
    pub fn config(&self, index: usize, base: &PipelineConfig) -> Result<PipelineConfig> {
        let mut cfg = base.clone();
        for (axis, value) in self.axes.iter().zip(self.values(index)) {
            cfg.set(&axis.key, &value)?;
        }
        Ok(cfg)
    }
}

/// What a case's reference masks describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseKind {
    /// Objects to be found; scored by IoU.
    Object,
    /// Background only; scored by the unsegmented fraction.
    Background,
}

impl CaseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CaseKind::Object => "object",
            CaseKind::Background => "background",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "object" => Some(CaseKind::Object),
            "background" => Some(CaseKind::Background),
            _ => None,
        }
    }
}

/// An input stack with its reference masks.
#[derive(Debug, Clone)]
pub struct SweepCase {
    pub name: String,
    pub input: ImageStack,
    pub gold: Vec<Mask>,
    pub kind: CaseKind,
}

impl SweepCase {
    /// Checks that the masks match the stack and that a background case has
    /// no reference pixels.
    pub fn new(name: impl Into<String>, input: ImageStack, gold: Vec<Mask>, kind: CaseKind) -> Result<Self> {
        if gold.len() != input.len() {
            return Err(Error::param(
                "sweep.case",
                format!("{} reference masks for {} slices", gold.len(), input.len()),
            ));
        }
        if let Some(m) = gold.iter().find(|m| m.dims() != (input.width(), input.height())) {
            return Err(Error::DimensionMismatch {
                expected: (input.width(), input.height()),
                found: m.dims(),
            });
        }
        if kind == CaseKind::Background && gold.iter().any(|m| !m.is_blank()) {
            return Err(Error::param("sweep.case", "background case with non-empty reference masks"));
        }
        Ok(SweepCase {
            name: name.into(),
            input,
            gold,
            kind,
        })
    }

    /// A background case: every reference mask is empty.
    pub fn background(name: impl Into<String>, input: ImageStack) -> Result<Self> {
        let gold = vec![Mask::new(input.width(), input.height()); input.len()];
        SweepCase::new(name, input, gold, CaseKind::Background)
    }
}

/// Per-slice scores: IoU for object cases, `1 − segmented/total` for
/// background cases.
pub fn slice_scores(gold: &[Mask], segmented: &[Mask], kind: CaseKind) -> Result<Vec<f64>> {
    if gold.len() != segmented.len() {
        return Err(Error::param(
            "sweep.case",
            format!("{} reference masks against {} segmented", gold.len(), segmented.len()),
        ));
    }
    gold.iter()
        .zip(segmented)
        .map(|(g, s)| match kind {
            CaseKind::Object => iou(g, s),
            CaseKind::Background => {
                if g.dims() != s.dims() {
                    return Err(Error::DimensionMismatch {
                        expected: g.dims(),
                        found: s.dims(),
                    });
                }
                Ok(1.0 - s.count() as f64 / (s.width() * s.height()) as f64)
            }
        })
        .collect()
}

/// Time average of [`slice_scores`].
pub fn score_case(gold: &[Mask], segmented: &[Mask], kind: CaseKind) -> Result<f64> {
    let scores = slice_scores(gold, segmented, kind)?;
    if scores.is_empty() {
        return Err(Error::Empty("case without slices"));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mean of the case scores. The scores are summed in ascending order, so
/// the result does not depend on the order of the cases.
pub fn mean_accuracy_combo(scores: &[f64]) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum::<f64>() / sorted.len() as f64
}

/// True when `series` stays below `threshold` on at least `run_length`
/// consecutive slices.
pub fn exclusion_rule(series: &[f64], threshold: f64, run_length: usize) -> bool {
    let mut run = 0;
    for &s in series {
        run = if s < threshold { run + 1 } else { 0 };
        if run >= run_length {
            return true;
        }
    }
    false
}

/// Segmentation of a case: crop, filter, local Otsu, SUBSURF.
pub fn segment_case(case: &SweepCase, cfg: &PipelineConfig) -> Result<Vec<Mask>> {
    let cropped = crop_stage(&case.input, cfg)?;
    let (filtered, _) = filter_stage(&cropped, cfg)?;
    let (masks, _) = segment_stage(&filtered, &cropped, cfg)?;
    Ok(masks)
}

/// Scores of one combination.
#[derive(Debug, Clone, PartialEq)]
pub struct ComboResult {
    pub index: usize,
    pub values: Vec<String>,
    /// One score per case, in case order. NaN when the combination failed.
    pub scores: Vec<f64>,
    pub mean: f64,
    pub excluded: bool,
    /// The solver did not converge for some case.
    pub failed: bool,
}

/// Runs combination `index` on every case.
pub fn evaluate_combo(grid: &ParamGrid, index: usize, cases: &[SweepCase], base: &PipelineConfig) -> Result<ComboResult> {
    let cfg = grid.config(index, base)?;
    cfg.validate()?;
    let mut scores = Vec::with_capacity(cases.len());
    let mut excluded = false;
    for case in cases {
        let masks = match segment_case(case, &cfg) {
            Ok(m) => m,
            Err(Error::NotConverged { .. }) => {
                return Ok(ComboResult {
                    index,
                    values: grid.values(index),
                    scores: vec![f64::NAN; cases.len()],
                    mean: f64::NAN,
                    excluded: true,
                    failed: true,
                })
            }
            Err(e) => return Err(e),
        };
        let series = slice_scores(&case.gold, &masks, case.kind)?;
        excluded |= exclusion_rule(&series, cfg.sweep.exclusion_threshold, cfg.sweep.run_length);
        scores.push(series.iter().sum::<f64>() / series.len() as f64);
    }
    Ok(ComboResult {
        index,
        values: grid.values(index),
        mean: mean_accuracy_combo(&scores),
        scores,
        excluded,
        failed: false,
    })
}

/// Indices (into `results`) of the kept combinations, best first; equal
/// means keep grid order.
pub fn rank(results: &[ComboResult]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..results.len()).filter(|&i| !results[i].excluded).collect();
    order.sort_by(|&a, &b| {
        results[b]
            .mean
            .total_cmp(&results[a].mean)
            .then(results[a].index.cmp(&results[b].index))
    });
    order
}

/// How often each value of one parameter occurs among the best combinations.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyColumn {
    pub key: String,
    pub values: Vec<String>,
    pub counts: Vec<usize>,
}

impl FrequencyColumn {
    /// Most frequent value; ties go to the value listed first.
    pub fn mode(&self) -> &str {
        let mut best = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = i;
            }
        }
        &self.values[best]
    }
}

/// Tallies the parameter values of the first `top_n` ranked combinations.
/// Each column sums to `min(top_n, kept combinations)`.
pub fn frequency_table(grid: &ParamGrid, results: &[ComboResult], ranking: &[usize], top_n: usize) -> Vec<FrequencyColumn> {
    let mut columns: Vec<FrequencyColumn> = grid
        .axes()
        .iter()
        .map(|a| FrequencyColumn {
            key: a.key.clone(),
            values: a.values.clone(),
            counts: vec![0; a.values.len()],
        })
        .collect();
    for &r in ranking.iter().take(top_n) {
        for (col, pos) in columns.iter_mut().zip(grid.positions(results[r].index)) {
            col.counts[pos] += 1;
        }
    }
    columns
}

/// Outcome of a grid search.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub grid: ParamGrid,
    pub case_names: Vec<String>,
    /// Every combination, by grid index.
    pub results: Vec<ComboResult>,
    /// Kept combinations, best first (indices into `results`).
    pub ranking: Vec<usize>,
    pub frequency: Vec<FrequencyColumn>,
    pub top_n: usize,
    /// Combinations read back from a checkpoint rather than computed.
    pub resumed: usize,
}

impl SweepResult {
    pub fn best(&self) -> Option<&ComboResult> {
        self.ranking.first().map(|&r| &self.results[r])
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "stage=sweep").unwrap();
        writeln!(s, "combinations={}", self.results.len()).unwrap();
        writeln!(s, "resumed={}", self.resumed).unwrap();
        writeln!(s, "cases={}", self.case_names.join(",")).unwrap();
        writeln!(s, "excluded={}", self.results.iter().filter(|r| r.excluded).count()).unwrap();
        writeln!(s, "failed={}", self.results.iter().filter(|r| r.failed).count()).unwrap();
        writeln!(s, "top_n={}", self.top_n).unwrap();
        if let Some(best) = self.best() {
            writeln!(s, "best_index={}", best.index).unwrap();
            writeln!(s, "best_mean={}", best.mean).unwrap();
        }
        for col in &self.frequency {
            writeln!(s, "mode.{}={}", col.key, col.mode()).unwrap();
        }
        s
    }

    /// `rank,index,<parameters>,<case scores>,mean` for kept combinations.
    pub fn write_ranking_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["rank".to_string(), "index".to_string()];
        header.extend(self.grid.axes().iter().map(|a| a.key.clone()));
        header.extend(self.case_names.iter().map(|n| format!("score.{n}")));
        header.push("mean".to_string());
        w.write_record(&header)?;
        for (rank, &r) in self.ranking.iter().enumerate() {
            let res = &self.results[r];
            let mut row = vec![(rank + 1).to_string(), res.index.to_string()];
            row.extend(res.values.iter().cloned());
            row.extend(res.scores.iter().map(|s| s.to_string()));
            row.push(res.mean.to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// `key,value,count` rows; the counts of each key sum to the number of
    /// combinations tallied.
    pub fn write_frequency_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["key", "value", "count"])?;
        for col in &self.frequency {
            for (v, c) in col.values.iter().zip(&col.counts) {
                w.write_record([col.key.as_str(), v.as_str(), &c.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn checkpoint_header(grid: &ParamGrid, n_cases: usize) -> Vec<String> {
    let mut header = vec!["index".to_string()];
    header.extend(grid.axes().iter().map(|a| a.key.clone()));
    header.extend((1..=n_cases).map(|k| format!("score{k}")));
    header.extend(["mean", "excluded", "failed"].map(String::from));
    header
}

fn checkpoint_row(r: &ComboResult) -> Vec<String> {
    let mut row = vec![r.index.to_string()];
    row.extend(r.values.iter().cloned());
    row.extend(r.scores.iter().map(|s| s.to_string()));
    row.push(r.mean.to_string());
    row.push((r.excluded as u8).to_string());
    row.push((r.failed as u8).to_string());
    row
}

/// Reads the combinations already stored in a checkpoint written for the
/// same grid and number of cases.
pub fn read_checkpoint(path: &Path, grid: &ParamGrid, n_cases: usize) -> Result<BTreeMap<usize, ComboResult>> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != checkpoint_header(grid, n_cases) {
        return Err(bad("checkpoint was written for a different grid or case list".into()));
    }
    let n_axes = grid.axes().len();
    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        // a row cut short by an interrupted run is skipped and recomputed
        if record.len() != header.len() {
            continue;
        }
        let num = |i: usize| -> Result<f64> {
            record[i]
                .parse::<f64>()
                .map_err(|_| bad(format!("bad number {:?}", &record[i])))
        };
        let flag = |i: usize| -> Result<bool> {
            match &record[i] {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(bad(format!("bad flag {other:?}"))),
            }
        };
        let index: usize = record[0].parse().map_err(|_| bad(format!("bad index {:?}", &record[0])))?;
        if index >= grid.len() {
            return Err(bad(format!("index {index} outside the grid")));
        }
        let values: Vec<String> = record.iter().skip(1).take(n_axes).map(str::to_string).collect();
        if values != grid.values(index) {
            return Err(bad(format!("row {index} does not match the grid values")));
        }
        let scores = (0..n_cases).map(|k| num(1 + n_axes + k)).collect::<Result<Vec<_>>>()?;
        let base = 1 + n_axes + n_cases;
        out.insert(
            index,
            ComboResult {
                index,
                values,
                scores,
                mean: num(base)?,
                excluded: flag(base + 1)?,
                failed: flag(base + 2)?,
            },
        );
    }
    Ok(out)
}

fn write_checkpoint(path: &Path, grid: &ParamGrid, n_cases: usize, results: &[ComboResult]) -> Result<()> {
    let tmp = PathBuf::from(format!("{}.tmp", path.display()));
    {
        let mut w = csv::Writer::from_path(&tmp)?;
        w.write_record(checkpoint_header(grid, n_cases))?;
        for r in results {
            w.write_record(checkpoint_row(r))?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Evaluates every combination (in parallel), applies the exclusion rule,
/// ranks and tallies the best `base.sweep.top_n`.
///
/// With a checkpoint path, finished combinations are appended to that CSV
/// as they complete and a later call with the same grid and cases skips
/// them. The file is rewritten in grid order at the end. The result does
/// not depend on the thread count or on how often the search was resumed.
pub fn grid_search(grid: &ParamGrid, cases: &[SweepCase], base: &PipelineConfig, checkpoint: Option<&Path>) -> Result<SweepResult> {
    if cases.is_empty() {
        return Err(Error::Empty("sweep without cases"));
    }
    if base.sweep.run_length == 0 {
        return Err(Error::param("sweep.run_length", "must be at least 1"));
    }
    let n_cases = cases.len();
    let mut done = match checkpoint {
        Some(path) if path.exists() => read_checkpoint(path, grid, n_cases)?,
        _ => BTreeMap::new(),
    };
    let resumed = done.len();
    let todo: Vec<usize> = (0..grid.len()).filter(|i| !done.contains_key(i)).collect();

    let writer = match checkpoint {
        Some(path) => {
            // start from a clean copy so a torn last line cannot swallow
            // the first appended row
            let kept: Vec<ComboResult> = done.values().cloned().collect();
            write_checkpoint(path, grid, n_cases, &kept)?;
            let file = fs::OpenOptions::new()
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            Some(Mutex::new(csv::Writer::from_writer(file)))
        }
        None => None,
    };
    let computed: Vec<Result<ComboResult>> = todo
        .par_iter()
        .map(|&index| {
            let result = evaluate_combo(grid, index, cases, base)?;
            if let Some(w) = &writer {
                let mut w = w.lock().expect("checkpoint writer poisoned");
                w.write_record(checkpoint_row(&result))?;
                w.flush().map_err(|e| Error::io(checkpoint.unwrap(), e))?;
            }
            Ok(result)
        })
        .collect();
    drop(writer);
    for r in computed {
        let r = r?;
        done.insert(r.index, r);
    }
    let results: Vec<ComboResult> = done.into_values().collect();
    if let Some(path) = checkpoint {
        write_checkpoint(path, grid, n_cases, &results)?;
    }
    let ranking = rank(&results);
    let frequency = frequency_table(grid, &results, &ranking, base.sweep.top_n);
    Ok(SweepResult {
        grid: grid.clone(),
        case_names: cases.iter().map(|c| c.name.clone()).collect(),
        results,
        ranking,
        frequency,
        top_n: base.sweep.top_n,
        resumed,
    })
}
