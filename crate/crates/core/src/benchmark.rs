//! The scan–CAD similarity benchmark: annotation records, retrieval tasks
//! with off-category distractors, and the retrieval, ranking and category
//! scores with per-class and per-instance aggregation.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use chrono::DateTime;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedspace::{confusion_score, Domain, EmbeddingIndex, Neighbor, PROPOSALS};
use crate::{Error, Result};

/// Off-category CAD models added to every task's candidate set.
pub const DISTRACTORS: usize = 100;
/// Most models an annotator may select.
pub const MAX_SELECTION: usize = 3;
/// Categories with fewer tasks are pooled into `other` in printed tables.
pub const DEFAULT_MIN_SUPPORT: usize = 15;
pub const OTHER: &str = "other";

/// One annotator judgment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub scan_id: String,
    pub proposed: Vec<String>,
    pub ranked_selection: Vec<String>,
    pub annotator: String,
    pub category: String,
    /// ISO-8601 / RFC 3339 timestamp.
    pub timestamp: String,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidRecord(format!("scan `{}`: {m}", self.scan_id)));
        if self.proposed.len() != PROPOSALS {
            return bad(format!("{} proposals, expected {PROPOSALS}", self.proposed.len()));
        }
        let proposed: HashSet<&String> = self.proposed.iter().collect();
        if proposed.len() != PROPOSALS {
            return bad("duplicate proposals".into());
        }
        let n = self.ranked_selection.len();
        if n == 0 || n > MAX_SELECTION {
            return bad(format!("{n} selections, expected 1 to {MAX_SELECTION}"));
        }
        let selected: HashSet<&String> = self.ranked_selection.iter().collect();
        if selected.len() != n {
            return bad("duplicate selections".into());
        }
        if let Some(s) = self.ranked_selection.iter().find(|s| !proposed.contains(s)) {
            return bad(format!("selection `{s}` was not proposed"));
        }
        if DateTime::parse_from_rfc3339(&self.timestamp).is_err() {
            return bad(format!("timestamp `{}` is not ISO-8601", self.timestamp));
        }
        Ok(())
    }
}

/// Parses JSONL, one validated record per non-blank line.
pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(line)
            .map_err(|e| Error::InvalidRecord(format!("line {}: {e}", n + 1)))?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    parse_annotations(&fs::read_to_string(path)?)
}

/// Appends one record as a single write of a complete line, then syncs.
pub fn append_annotation(path: impl AsRef<Path>, rec: &AnnotationRecord) -> Result<()> {
    rec.validate()?;
    let mut line = serde_json::to_vec(rec)?;
    line.push(b'\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(&line)?;
    f.sync_data()?;
    Ok(())
}

/// A CAD model the distractors are drawn from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogCad {
    pub cad_id: String,
    pub category: String,
}

impl From<&crate::datagen::CatalogEntry> for CatalogCad {
    fn from(e: &crate::datagen::CatalogEntry) -> Self {
        CatalogCad {
            cad_id: e.cad_id.clone(),
            category: e.category.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalTask {
    pub record: AnnotationRecord,
    pub distractors: Vec<String>,
}

impl RetrievalTask {
    /// The proposals followed by the distractors.
    pub fn candidates(&self) -> impl Iterator<Item = &String> {
        self.record.proposed.iter().chain(&self.distractors)
    }
}

/// One task per record, each adding 100 CAD models of other categories that
/// were not proposed. Record `i` draws from stream `i` of `seed`.
pub fn build_tasks(records: &[AnnotationRecord], catalog: &[CatalogCad], seed: u64) -> Result<Vec<RetrievalTask>> {
    let mut sorted: Vec<&CatalogCad> = catalog.iter().collect();
    sorted.sort_by(|a, b| a.cad_id.cmp(&b.cad_id));
    sorted.dedup_by(|a, b| a.cad_id == b.cad_id);
    records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            rec.validate()?;
            let proposed: HashSet<&str> = rec.proposed.iter().map(String::as_str).collect();
            let pool: Vec<&str> = sorted
                .iter()
                .filter(|c| c.category != rec.category && !proposed.contains(c.cad_id.as_str()))
                .map(|c| c.cad_id.as_str())
                .collect();
            if pool.len() < DISTRACTORS {
                return Err(Error::NotEnoughCandidates(format!(
                    "record {i} (scan `{}`): {} off-category CAD models, need {DISTRACTORS}",
                    rec.scan_id,
                    pool.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let distractors = rand::seq::index::sample(&mut rng, pool.len(), DISTRACTORS)
                .into_iter()
                .map(|j| pool[j].to_string())
                .collect();
            Ok(RetrievalTask {
                record: rec.clone(),
                distractors,
            })
        })
        .collect()
}

/// The task's candidates ordered by distance to `scan_embedding` (closest
/// rotation copy per model, ties by id).
pub fn rank_candidates(task: &RetrievalTask, index: &EmbeddingIndex, scan_embedding: &[f32]) -> Result<Vec<Neighbor>> {
    let wanted: HashSet<&str> = task.candidates().map(String::as_str).collect();
    let ranked = index.ranked(scan_embedding, |v| v.domain == Domain::Cad && wanted.contains(v.id.as_str()));
    if ranked.len() != wanted.len() {
        let found: HashSet<&str> = ranked.iter().map(|n| n.id.as_str()).collect();
        let missing = wanted.iter().find(|id| !found.contains(*id)).expect("a candidate is missing");
        return Err(Error::UnknownId(format!("candidate CAD `{missing}` has no embedding")));
    }
    Ok(ranked)
}

/// 1 when the closest candidate is among the annotated models, else 0.
pub fn retrieval_accuracy(task: &RetrievalTask, index: &EmbeddingIndex, scan_embedding: &[f32]) -> Result<f64> {
    let ranked = rank_candidates(task, index, scan_embedding)?;
    Ok(if task.record.ranked_selection.contains(&ranked[0].id) {
        1.0
    } else {
        0.0
    })
}

/// Share of the `n` annotated ranks matched position by position by the
/// `n` closest candidates.
pub fn ranking_quality(task: &RetrievalTask, index: &EmbeddingIndex, scan_embedding: &[f32]) -> Result<f64> {
    let ranked = rank_candidates(task, index, scan_embedding)?;
    let sel = &task.record.ranked_selection;
    let hits = sel.iter().zip(&ranked).filter(|(a, p)| **a == p.id).count();
    Ok(hits as f64 / sel.len() as f64)
}

/// Share of the `k` closest candidates sharing the task's category.
pub fn category_precision(task: &RetrievalTask, index: &EmbeddingIndex, scan_embedding: &[f32], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let ranked = rank_candidates(task, index, scan_embedding)?;
    if k > ranked.len() {
        return Err(Error::NotEnoughCandidates(format!("k = {k} exceeds {} candidates", ranked.len())));
    }
    let same = ranked[..k].iter().filter(|n| n.category == task.record.category).count();
    Ok(same as f64 / k as f64)
}

fn scan_embedding<'a>(scans: &'a EmbeddingIndex, task: &RetrievalTask) -> Result<&'a [f32]> {
    scans
        .get(&task.record.scan_id, Domain::Scan)
        .map(|v| v.values.as_slice())
        .ok_or_else(|| Error::UnknownId(format!("scan `{}` has no embedding", task.record.scan_id)))
}

/// Mean category precision at `k` over tasks (top-1 and top-5 accuracy).
pub fn category_accuracy(tasks: &[RetrievalTask], index: &EmbeddingIndex, scans: &EmbeddingIndex, k: usize) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks".into()));
    }
    let mut sum = 0.0;
    for t in tasks {
        sum += category_precision(t, index, scan_embedding(scans, t)?, k)?;
    }
    Ok(sum / tasks.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub mean: f64,
    pub count: usize,
}

/// Per-category means plus their mean (`class_avg`) and the mean over all
/// tasks (`inst_avg`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub class_avg: f64,
    pub inst_avg: f64,
    pub per_class: BTreeMap<String, ClassScore>,
}

pub fn aggregate(scores: &[(String, f64)]) -> Result<Aggregate> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("nothing to aggregate".into()));
    }
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (c, s) in scores {
        let e = sums.entry(c.clone()).or_insert((0.0, 0));
        e.0 += s;
        e.1 += 1;
    }
    let per_class: BTreeMap<String, ClassScore> = sums
        .into_iter()
        .map(|(c, (s, n))| (c, ClassScore { mean: s / n as f64, count: n }))
        .collect();
    let class_avg = per_class.values().map(|c| c.mean).sum::<f64>() / per_class.len() as f64;
    let inst_avg = scores.iter().map(|(_, s)| s).sum::<f64>() / scores.len() as f64;
    Ok(Aggregate {
        class_avg,
        inst_avg,
        per_class,
    })
}

impl Aggregate {
    /// Per-class rows with categories under `min_support` tasks pooled into
    /// `other` (a task-weighted mean). The averages are unchanged.
    pub fn display_rows(&self, min_support: usize) -> Vec<(String, ClassScore)> {
        let mut rows = Vec::new();
        let (mut sum, mut n) = (0.0, 0);
        for (c, s) in &self.per_class {
            if s.count >= min_support && c != OTHER {
                rows.push((c.clone(), s.clone()));
            } else {
                sum += s.mean * s.count as f64;
                n += s.count;
            }
        }
        if n > 0 {
            rows.push((OTHER.to_string(), ClassScore { mean: sum / n as f64, count: n }));
        }
        rows
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub tasks: usize,
    /// Confusion at k = 10 and k = 50, absent when the set is too small.
    pub confusion_k10: Option<f64>,
    pub confusion_k50: Option<f64>,
    pub retrieval_accuracy: Aggregate,
    pub ranking_quality: Aggregate,
    pub category_top1: Aggregate,
    pub category_top5: Aggregate,
}

/// Scores every task. `cads` holds CAD embeddings (optionally one per
/// rotation step), `scans` the scan embeddings keyed by `scan_id`, and
/// `confusion_set`, when given, a 1-to-1 scan/CAD set for the confusion score.
pub fn evaluate(
    tasks: &[RetrievalTask],
    cads: &EmbeddingIndex,
    scans: &EmbeddingIndex,
    confusion_set: Option<&EmbeddingIndex>,
) -> Result<BenchmarkReport> {
    let mut retrieval = Vec::with_capacity(tasks.len());
    let mut ranking = Vec::with_capacity(tasks.len());
    let mut top1 = Vec::with_capacity(tasks.len());
    let mut top5 = Vec::with_capacity(tasks.len());
    for t in tasks {
        let q = scan_embedding(scans, t)?;
        let c = t.record.category.clone();
        retrieval.push((c.clone(), retrieval_accuracy(t, cads, q)?));
        ranking.push((c.clone(), ranking_quality(t, cads, q)?));
        top1.push((c.clone(), category_precision(t, cads, q, 1)?));
        top5.push((c, category_precision(t, cads, q, 5)?));
    }
    let confusion = |k| match confusion_set {
        Some(set) => confusion_score(set, k).ok(),
        None => None,
    };
    Ok(BenchmarkReport {
        tasks: tasks.len(),
        confusion_k10: confusion(10),
        confusion_k50: confusion(50),
        retrieval_accuracy: aggregate(&retrieval)?,
        ranking_quality: aggregate(&ranking)?,
        category_top1: aggregate(&top1)?,
        category_top5: aggregate(&top5)?,
    })
}

/// Unrotated scans `{pair}_scan` together with their CAD models
/// `{pair}_cad`, the one-to-one set the confusion score is defined on.
pub fn paired_confusion_set(index: &EmbeddingIndex) -> Result<EmbeddingIndex> {
    let mut out = EmbeddingIndex::new(index.dimension());
    for v in index.vectors().iter().filter(|v| v.domain == Domain::Scan && v.rotation_step == 0) {
        let Some(pair) = v.id.strip_suffix("_scan") else { continue };
        if let Some(cad) = index.get(&format!("{pair}_cad"), Domain::Cad) {
            out.push(v.clone())?;
            out.push(cad.clone())?;
        }
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"))
}

/// Aligned text table: one row per score, one column per category (small
/// categories pooled into `other`), then class and instance averages.
pub fn render_table(report: &BenchmarkReport, min_support: usize) -> String {
    let metrics = [
        ("retrieval", &report.retrieval_accuracy),
        ("ranking", &report.ranking_quality),
        ("cat top-1", &report.category_top1),
        ("cat top-5", &report.category_top5),
    ];
    let columns: Vec<String> = report
        .retrieval_accuracy
        .display_rows(min_support)
        .into_iter()
        .map(|(c, _)| c)
        .collect();
    let mut header = vec!["".to_string()];
    header.extend(columns.iter().cloned());
    header.push("class avg".into());
    header.push("inst avg".into());
    let mut rows = vec![header];
    for (name, agg) in metrics {
        let by: BTreeMap<String, ClassScore> = agg.display_rows(min_support).into_iter().collect();
        let mut row = vec![name.to_string()];
        row.extend(columns.iter().map(|c| by.get(c).map_or("-".into(), |s| format!("{:.2}", s.mean))));
        row.push(format!("{:.2}", agg.class_avg));
        row.push(format!("{:.2}", agg.inst_avg));
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &rows {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(j, (c, w))| if j == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    let _ = writeln!(
        out,
        "tasks {}  confusion k=10 {}  k=50 {}",
        report.tasks,
        fmt_opt(report.confusion_k10),
        fmt_opt(report.confusion_k50)
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedspace::EmbeddingVector;

    fn record(scan: &str, cat: &str, sel: &[&str]) -> AnnotationRecord {
        AnnotationRecord {
            scan_id: scan.into(),
            proposed: (0..6).map(|i| format!("p{i}")).collect(),
            ranked_selection: sel.iter().map(|s| s.to_string()).collect(),
            annotator: "ann".into(),
            category: cat.into(),
            timestamp: "2024-05-01T12:00:00Z".into(),
        }
    }

    #[test]
    fn record_validation() {
        assert!(record("s", "chair", &["p0", "p2"]).validate().is_ok());
        assert!(record("s", "chair", &[]).validate().is_err());
        assert!(record("s", "chair", &["p0", "p1", "p2", "p3"]).validate().is_err());
        assert!(record("s", "chair", &["p0", "p0"]).validate().is_err());
        assert!(record("s", "chair", &["zz"]).validate().is_err());
        let mut r = record("s", "chair", &["p1"]);
        r.proposed.pop();
        assert!(r.validate().is_err());
        let mut r = record("s", "chair", &["p1"]);
        r.timestamp = "yesterday".into();
        assert!(r.validate().is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let a = record("s1", "chair", &["p0"]);
        let b = record("s2", "table", &["p3", "p1"]);
        append_annotation(&path, &a).unwrap();
        append_annotation(&path, &b).unwrap();
        assert_eq!(read_annotations(&path).unwrap(), vec![a, b]);
        assert!(parse_annotations("{\"scan_id\": 1}\n").is_err());
    }

    fn catalog(off: usize) -> Vec<CatalogCad> {
        let mut c: Vec<CatalogCad> = (0..off)
            .map(|i| CatalogCad { cad_id: format!("d{i:03}"), category: "table".into() })
            .collect();
        c.extend((0..6).map(|i| CatalogCad { cad_id: format!("p{i}"), category: "chair".into() }));
        c
    }

    #[test]
    fn tasks_need_a_hundred_distractors() {
        let recs = vec![record("s1", "chair", &["p0"])];
        let err = build_tasks(&recs, &catalog(99), 0).unwrap_err();
        assert!(err.to_string().contains("s1"));
        let t = build_tasks(&recs, &catalog(150), 4).unwrap();
        assert_eq!(t[0].distractors.len(), 100);
        assert_eq!(t, build_tasks(&recs, &catalog(150), 4).unwrap());
        assert_ne!(t, build_tasks(&recs, &catalog(150), 5).unwrap());
    }

    #[test]
    fn ranking_is_positional() {
        let task = RetrievalTask { record: record("s", "chair", &["p0", "p1", "p2"]), distractors: vec![] };
        let place = |order: [&str; 3]| {
            let mut idx = EmbeddingIndex::new(1);
            for (i, id) in order.iter().enumerate() {
                idx.push(EmbeddingVector::new(*id, Domain::Cad, "chair", vec![i as f32])).unwrap();
            }
            for i in 3..6 {
                idx.push(EmbeddingVector::new(format!("p{i}"), Domain::Cad, "chair", vec![10.0 + i as f32])).unwrap();
            }
            idx
        };
        let exact = place(["p0", "p1", "p2"]);
        assert_eq!(ranking_quality(&task, &exact, &[0.0]).unwrap(), 1.0);
        assert_eq!(retrieval_accuracy(&task, &exact, &[0.0]).unwrap(), 1.0);
        let swapped = place(["p1", "p0", "p2"]);
        assert!((ranking_quality(&task, &swapped, &[0.0]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let missing = RetrievalTask { record: record("s", "chair", &["p0"]), distractors: vec!["zz".into()] };
        assert!(retrieval_accuracy(&missing, &exact, &[0.0]).is_err());
    }

    #[test]
    fn aggregate_arithmetic() {
        let mut scores = Vec::new();
        scores.extend((0..10).map(|_| ("a".to_string(), 0.2)));
        scores.extend((0..30).map(|_| ("b".to_string(), 0.8)));
        let a = aggregate(&scores).unwrap();
        assert!((a.class_avg - 0.5).abs() < 1e-12);
        assert!((a.inst_avg - 0.65).abs() < 1e-12);
        let rows = a.display_rows(15);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].0, "b");
        assert_eq!(rows[1].0, OTHER);
        let one = aggregate(&[("x".to_string(), 0.3), ("x".to_string(), 0.5)]).unwrap();
        assert_eq!(one.class_avg, one.inst_avg);
    }
}
