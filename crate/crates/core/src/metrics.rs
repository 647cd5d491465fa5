//! Evaluation: ROC curves, AUC, EER, per-dataset result tables and the
//! detection-overlap matrix between models.
//!
//! Fake (label 1) is the positive class throughout. A record is classified
//! fake when `score >= threshold`, so records with equal scores always cross
//! a threshold together.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Label;
use crate::fsutil;

pub const SCORE_HEADER: &str = "id,score,label,dataset";
pub const ROC_HEADER: &str = "threshold,fpr,tpr";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need both bona fide and fake records (got {real} real, {fake} fake)")]
    SingleClass { real: usize, fake: usize },
    #[error("non-finite score for '{0}'")]
    NonFiniteScore(String),
    #[error("a report needs at least one dataset")]
    NoDatasets,
    #[error("dataset '{dataset}': {source}")]
    Dataset {
        dataset: String,
        #[source]
        source: Box<MetricsError>,
    },
    #[error("utterance sets differ between '{model_a}' and '{model_b}': only in {model_a}: {only_a:?}; only in {model_b}: {only_b:?}")]
    UtteranceSetMismatch {
        model_a: String,
        model_b: String,
        only_a: Vec<String>,
        only_b: Vec<String>,
    },
    #[error("model '{model}' lists utterance '{id}' twice")]
    DuplicateId { model: String, id: String },
    #[error("utterance '{id}' has different labels in '{model_a}' and '{model_b}'")]
    LabelMismatch {
        id: String,
        model_a: String,
        model_b: String,
    },
    #[error("{count} thresholds for {models} models")]
    ThresholdCount { count: usize, models: usize },
    #[error("need at least two models to compare")]
    TooFewModels,
    #[error("{path}: row {row}: {reason}")]
    Parse {
        path: String,
        row: usize,
        reason: String,
    },
    #[error("invalid threshold rule '{0}' (use 'eer' or 'fixed:<value>')")]
    BadThresholdRule(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One scored utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub id: String,
    /// Likelihood that the utterance is fake.
    pub score: f64,
    pub label: Label,
    pub dataset: String,
}

impl ScoreRecord {
    pub fn new(id: impl Into<String>, score: f64, label: Label, dataset: impl Into<String>) -> Self {
        ScoreRecord {
            id: id.into(),
            score,
            label,
            dataset: dataset.into(),
        }
    }

    /// Correctly classified at `threshold`.
    pub fn is_detected(&self, threshold: f64) -> bool {
        (self.score >= threshold) == self.label.is_fake()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
    /// Bona fide records at or above the threshold.
    pub false_pos: usize,
    /// Fake records at or above the threshold.
    pub true_pos: usize,
}

/// Operating points ordered by descending threshold, from (0, 0) at
/// threshold +inf to (1, 1) at the lowest score.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub n_real: usize,
    pub n_fake: usize,
}

fn class_counts(records: &[ScoreRecord]) -> Result<(usize, usize), MetricsError> {
    let mut real = 0;
    let mut fake = 0;
    for r in records {
        if !r.score.is_finite() {
            return Err(MetricsError::NonFiniteScore(r.id.clone()));
        }
        match r.label {
            Label::Bonafide => real += 1,
            Label::Fake => fake += 1,
        }
    }
    if real == 0 || fake == 0 {
        return Err(MetricsError::SingleClass { real, fake });
    }
    Ok((real, fake))
}

pub fn roc(records: &[ScoreRecord]) -> Result<RocCurve, MetricsError> {
    let (n_real, n_fake) = class_counts(records)?;
    let mut sorted: Vec<&ScoreRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut points = Vec::with_capacity(sorted.len() + 1);
    points.push(RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
        false_pos: 0,
        true_pos: 0,
    });
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].score;
        while i < sorted.len() && sorted[i].score == threshold {
            match sorted[i].label {
                Label::Fake => tp += 1,
                Label::Bonafide => fp += 1,
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / n_real as f64,
            tpr: tp as f64 / n_fake as f64,
            false_pos: fp,
            true_pos: tp,
        });
    }
    Ok(RocCurve {
        points,
        n_real,
        n_fake,
    })
}

/// Trapezoidal area under the curve, in percent.
pub fn auc(curve: &RocCurve) -> f64 {
    let area: f64 = curve
        .points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    area * 100.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eer {
    /// Equal error rate in percent.
    pub percent: f64,
    /// Decision threshold of the operating point closest to the crossing.
    pub threshold: f64,
}

/// Equal error rate from an already computed curve.
///
/// Walks the operating points until FPR − FNR turns non-negative and
/// linearly interpolates the crossing between the last two points.
pub fn eer_from_curve(curve: &RocCurve) -> Eer {
    let pts = &curve.points;
    // (FPR − FNR) · n_real · n_fake, exact in integers.
    let (n_real, n_fake) = (curve.n_real as i128, curve.n_fake as i128);
    let diff = |p: &RocPoint| {
        (p.false_pos as i128 * n_fake - (n_fake - p.true_pos as i128) * n_real) as f64
    };
    // The last point has FPR = 1 and FNR = 0, so a crossing always exists.
    let k = pts
        .iter()
        .position(|p| diff(p) >= 0.0)
        .unwrap_or(pts.len() - 1);
    let hi = pts[k];
    let d_hi = diff(&hi);
    if d_hi == 0.0 || k == 0 {
        return Eer {
            percent: hi.fpr * 100.0,
            threshold: hi.threshold,
        };
    }
    let lo = pts[k - 1];
    let d_lo = diff(&lo);
    let alpha = -d_lo / (d_hi - d_lo);
    let rate = lo.fpr + alpha * (hi.fpr - lo.fpr);
    let threshold = if -d_lo < d_hi { lo.threshold } else { hi.threshold };
    Eer {
        percent: rate * 100.0,
        threshold,
    }
}

pub fn eer(records: &[ScoreRecord]) -> Result<Eer, MetricsError> {
    Ok(eer_from_curve(&roc(records)?))
}

/// Metrics of one model on one dataset (percentages, unrounded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetResult {
    pub dataset: String,
    pub eer: f64,
    pub auc: f64,
    /// `None` when the row was built from published numbers.
    pub eer_threshold: Option<f64>,
}

impl DatasetResult {
    pub fn from_records(
        dataset: impl Into<String>,
        records: &[ScoreRecord],
    ) -> Result<Self, MetricsError> {
        let dataset = dataset.into();
        let wrap = |source| MetricsError::Dataset {
            dataset: dataset.clone(),
            source: Box::new(source),
        };
        let curve = roc(records).map_err(wrap)?;
        let e = eer_from_curve(&curve);
        Ok(DatasetResult {
            eer: e.percent,
            auc: auc(&curve),
            eer_threshold: Some(e.threshold),
            dataset,
        })
    }
}

/// Per-dataset EER/AUC of one model plus the unweighted average row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub rows: Vec<DatasetResult>,
    pub average_eer: f64,
    pub average_auc: f64,
}

/// Two-decimal display rounding.
pub fn display2(v: f64) -> String {
    format!("{v:.2}")
}

impl MetricsReport {
    pub fn from_results(
        model: impl Into<String>,
        rows: Vec<DatasetResult>,
    ) -> Result<Self, MetricsError> {
        if rows.is_empty() {
            return Err(MetricsError::NoDatasets);
        }
        let n = rows.len() as f64;
        let average_eer = rows.iter().map(|r| r.eer).sum::<f64>() / n;
        let average_auc = rows.iter().map(|r| r.auc).sum::<f64>() / n;
        Ok(MetricsReport {
            model: model.into(),
            rows,
            average_eer,
            average_auc,
        })
    }

    /// Builds the table from raw scores, one entry per dataset.
    pub fn from_records(
        model: impl Into<String>,
        datasets: &[(String, Vec<ScoreRecord>)],
    ) -> Result<Self, MetricsError> {
        let rows = datasets
            .iter()
            .map(|(name, records)| DatasetResult::from_records(name.clone(), records))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_results(model, rows)
    }

    /// Long layout: `model,dataset,eer,auc`, one row per dataset then `Average`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,dataset,eer,auc\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                self.model,
                r.dataset,
                display2(r.eer),
                display2(r.auc)
            );
        }
        let _ = writeln!(
            out,
            "{},Average,{},{}",
            self.model,
            display2(self.average_eer),
            display2(self.average_auc)
        );
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Wide layout with one row per model: `model,<ds>_eer,<ds>_auc,…,average_eer,average_auc`.
/// Dataset columns follow the first report.
pub fn wide_table_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("model");
    let columns: Vec<&str> = reports
        .first()
        .map(|r| r.rows.iter().map(|d| d.dataset.as_str()).collect())
        .unwrap_or_default();
    for c in &columns {
        let _ = write!(out, ",{c}_eer,{c}_auc");
    }
    out.push_str(",average_eer,average_auc\n");
    for rep in reports {
        out.push_str(&rep.model);
        for c in &columns {
            match rep.rows.iter().find(|d| d.dataset == *c) {
                Some(d) => {
                    let _ = write!(out, ",{},{}", display2(d.eer), display2(d.auc));
                }
                None => out.push_str(",,"),
            }
        }
        let _ = writeln!(
            out,
            ",{},{}",
            display2(rep.average_eer),
            display2(rep.average_auc)
        );
    }
    out
}

/// How each model's decision threshold is chosen for the overlap matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdRule {
    /// Each model's own EER threshold on the compared records.
    Eer,
    Fixed(f64),
}

impl FromStr for ThresholdRule {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "eer" {
            return Ok(ThresholdRule::Eer);
        }
        s.strip_prefix("fixed:")
            .and_then(|v| v.parse::<f64>().ok())
            .filter(|v| v.is_finite())
            .map(ThresholdRule::Fixed)
            .ok_or_else(|| MetricsError::BadThresholdRule(s.to_string()))
    }
}

impl std::fmt::Display for ThresholdRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThresholdRule::Eer => f.write_str("eer"),
            ThresholdRule::Fixed(v) => write!(f, "fixed:{v}"),
        }
    }
}

/// Scores of one model over a shared utterance set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRun {
    pub model: String,
    pub records: Vec<ScoreRecord>,
}

pub fn thresholds_for(runs: &[ModelRun], rule: ThresholdRule) -> Result<Vec<f64>, MetricsError> {
    runs.iter()
        .map(|r| match rule {
            ThresholdRule::Fixed(v) => Ok(v),
            ThresholdRule::Eer => eer(&r.records)
                .map(|e| e.threshold)
                .map_err(|source| MetricsError::Dataset {
                    dataset: r.model.clone(),
                    source: Box::new(source),
                }),
        })
        .collect()
}

/// `entries[a][b]`: percentage of utterances missed by model `a` that model
/// `b` classifies correctly. `None` when `a` misses nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapMatrix {
    pub models: Vec<String>,
    pub thresholds: Vec<f64>,
    pub missed: Vec<usize>,
    pub entries: Vec<Vec<Option<f64>>>,
}

impl OverlapMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.models.iter().position(|m| m == a)?;
        let j = self.models.iter().position(|m| m == b)?;
        self.entries[i][j]
    }

    /// Square CSV with model tags as header row and first column; undefined
    /// entries are written as `NA`. Thresholds go in a leading `#` line.
    pub fn to_csv(&self, rule: ThresholdRule) -> String {
        let mut out = format!("# threshold_rule={rule}");
        for (m, t) in self.models.iter().zip(&self.thresholds) {
            let _ = write!(out, "; {m}={t}");
        }
        out.push('\n');
        out.push_str("model");
        for m in &self.models {
            let _ = write!(out, ",{m}");
        }
        out.push('\n');
        for (m, row) in self.models.iter().zip(&self.entries) {
            out.push_str(m);
            for e in row {
                match e {
                    Some(v) => {
                        let _ = write!(out, ",{}", display2(*v));
                    }
                    None => out.push_str(",NA"),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn index_run(run: &ModelRun) -> Result<HashMap<&str, &ScoreRecord>, MetricsError> {
    let mut map = HashMap::with_capacity(run.records.len());
    for r in &run.records {
        if map.insert(r.id.as_str(), r).is_some() {
            return Err(MetricsError::DuplicateId {
                model: run.model.clone(),
                id: r.id.clone(),
            });
        }
    }
    Ok(map)
}

pub fn overlap(runs: &[ModelRun], thresholds: &[f64]) -> Result<OverlapMatrix, MetricsError> {
    if thresholds.len() != runs.len() {
        return Err(MetricsError::ThresholdCount {
            count: thresholds.len(),
            models: runs.len(),
        });
    }
    let indexed = runs.iter().map(index_run).collect::<Result<Vec<_>, _>>()?;

    if let Some(first) = indexed.first() {
        let ids_a: BTreeSet<&str> = first.keys().copied().collect();
        for (run, idx) in runs.iter().zip(&indexed).skip(1) {
            let ids_b: BTreeSet<&str> = idx.keys().copied().collect();
            if ids_a != ids_b {
                return Err(MetricsError::UtteranceSetMismatch {
                    model_a: runs[0].model.clone(),
                    model_b: run.model.clone(),
                    only_a: ids_a.difference(&ids_b).map(|s| s.to_string()).collect(),
                    only_b: ids_b.difference(&ids_a).map(|s| s.to_string()).collect(),
                });
            }
            for (id, rec) in idx {
                if first[id].label != rec.label {
                    return Err(MetricsError::LabelMismatch {
                        id: id.to_string(),
                        model_a: runs[0].model.clone(),
                        model_b: run.model.clone(),
                    });
                }
            }
        }
    }

    let detected: Vec<HashMap<&str, bool>> = indexed
        .iter()
        .zip(thresholds)
        .map(|(idx, &t)| idx.iter().map(|(id, r)| (*id, r.is_detected(t))).collect())
        .collect();

    let n = runs.len();
    let mut entries = vec![vec![None; n]; n];
    let mut missed = vec![0; n];
    for a in 0..n {
        let missed_a: Vec<&str> = detected[a]
            .iter()
            .filter(|(_, &ok)| !ok)
            .map(|(id, _)| *id)
            .collect();
        missed[a] = missed_a.len();
        for b in 0..n {
            entries[a][b] = if a == b {
                Some(0.0)
            } else if missed_a.is_empty() {
                None
            } else {
                let rescued = missed_a.iter().filter(|id| detected[b][*id]).count();
                Some(100.0 * rescued as f64 / missed_a.len() as f64)
            };
        }
    }
    Ok(OverlapMatrix {
        models: runs.iter().map(|r| r.model.clone()).collect(),
        thresholds: thresholds.to_vec(),
        missed,
        entries,
    })
}

pub fn scores_to_csv(records: &[ScoreRecord]) -> String {
    let mut out = String::from(SCORE_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{},{},{},{}", r.id, r.score, r.label.as_u8(), r.dataset);
    }
    out
}

pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<(), MetricsError> {
    fsutil::write_bytes_atomic(path, scores_to_csv(records).as_bytes()).map_err(io_err(path))
}

pub fn parse_scores(text: &str, source: &str) -> Result<Vec<ScoreRecord>, MetricsError> {
    let parse_err = |row: usize, reason: String| MetricsError::Parse {
        path: source.to_string(),
        row,
        reason,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == SCORE_HEADER => {}
        other => {
            return Err(parse_err(
                1,
                format!(
                    "expected header '{SCORE_HEADER}', found '{}'",
                    other.map(|(_, h)| h).unwrap_or("")
                ),
            ))
        }
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let row = idx + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(parse_err(row, format!("expected 4 columns, found {}", f.len())));
        }
        let score: f64 = f[1]
            .parse()
            .map_err(|_| parse_err(row, format!("bad score '{}'", f[1])))?;
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(parse_err(row, format!("score {score} outside [0, 1]")));
        }
        let label = f[2]
            .parse::<u8>()
            .ok()
            .and_then(Label::from_u8)
            .ok_or_else(|| parse_err(row, format!("label '{}' is not 0 or 1", f[2])))?;
        out.push(ScoreRecord::new(f[0], score, label, f[3]));
    }
    Ok(out)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>, MetricsError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_scores(&text, &path.display().to_string())
}

/// Groups records by dataset tag, keeping first-appearance order.
pub fn group_by_dataset(records: Vec<ScoreRecord>) -> Vec<(String, Vec<ScoreRecord>)> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<ScoreRecord>> = BTreeMap::new();
    for r in records {
        if !groups.contains_key(&r.dataset) {
            order.push(r.dataset.clone());
        }
        groups.entry(r.dataset.clone()).or_default().push(r);
    }
    order
        .into_iter()
        .map(|d| {
            let g = groups.remove(&d).unwrap_or_default();
            (d, g)
        })
        .collect()
}

pub fn roc_to_csv(curve: &RocCurve) -> String {
    let mut out = String::from(ROC_HEADER);
    out.push('\n');
    for p in &curve.points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
    }
    out
}
