//! Binary classification metrics, the domain-word proportion score and the
//! embedding export used for geometry comparisons.

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::textprep::{classify_words, Lexicon, LocalScript, Script};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} scores and {} labels; need equal nonzero lengths",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid(format!("label {l} is not 0 or 1")));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("score {s} is not finite")));
    }
    Ok(())
}

/// Rank-sum AUROC with tied scores sharing their average rank. `None` when
/// only one class is present.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok(Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n)))
}

/// Step-wise area under the precision-recall curve: the sum over distinct
/// score thresholds (descending) of recall gain times precision. `None`
/// when only one class is present.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == labels.len() {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(Some(area))
}

/// Threshold and ranking metrics of one evaluation. Label 1 is the
/// positive class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub accuracy: f64,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    /// Mean of the six metrics; `None` when a ranking metric is undefined.
    pub average: Option<f64>,
}

/// Predictions are positive when `score >= threshold`. Precision is 0 when
/// nothing is predicted positive.
pub fn binary_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<MetricReport> {
    check_inputs(scores, labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let accuracy = ratio(tp + tn, scores.len());
    let recall = ratio(tp, tp + fn_);
    let precision = ratio(tp, tp + fp);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let auroc = auroc(scores, labels)?;
    let auprc = auprc(scores, labels)?;
    let average = match (auroc, auprc) {
        (Some(r), Some(p)) => Some((accuracy + r + p + recall + precision + f1) / 6.0),
        _ => None,
    };
    Ok(MetricReport {
        accuracy,
        auroc,
        auprc,
        recall,
        precision,
        f1,
        average,
    })
}

pub const UNDEFINED: &str = "NA";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| format!("{x}"))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| format!("{:.1}", 100.0 * x))
}

impl MetricReport {
    pub fn fields(&self) -> [(&'static str, Option<f64>); 7] {
        [
            ("accuracy", Some(self.accuracy)),
            ("auroc", self.auroc),
            ("auprc", self.auprc),
            ("recall", Some(self.recall)),
            ("precision", Some(self.precision)),
            ("f1", Some(self.f1)),
            ("average", self.average),
        ]
    }

    /// `key = value` lines at full precision; undefined values print as `NA`.
    pub fn to_key_values(&self) -> String {
        self.fields()
            .iter()
            .map(|(k, v)| format!("{k} = {}\n", opt(*v)))
            .collect()
    }

    pub fn parse_key_values(pairs: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<Option<f64>> {
            let v = pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::invalid(format!("metric {key} missing")))?;
            if v == UNDEFINED {
                return Ok(None);
            }
            v.parse()
                .map(Some)
                .map_err(|_| Error::invalid(format!("metric {key}: cannot parse {v:?}")))
        };
        let req = |key: &str| -> Result<f64> {
            get(key)?.ok_or_else(|| Error::invalid(format!("metric {key} must be defined")))
        };
        Ok(MetricReport {
            accuracy: req("accuracy")?,
            auroc: get("auroc")?,
            auprc: get("auprc")?,
            recall: req("recall")?,
            precision: req("precision")?,
            f1: req("f1")?,
            average: get("average")?,
        })
    }

    pub fn table_header() -> String {
        format!(
            "{:<24} {:>8} {:>8} {:>8} {:>8} {:>9} {:>8} {:>8}",
            "model", "Acc", "AUROC", "AUPRC", "Recall", "Precision", "F1", "Avg"
        )
    }

    /// One table row with every metric as a percentage to one decimal.
    pub fn table_row(&self, name: &str) -> String {
        format!(
            "{:<24} {:>8} {:>8} {:>8} {:>8} {:>9} {:>8} {:>8}",
            name,
            pct(Some(self.accuracy)),
            pct(self.auroc),
            pct(self.auprc),
            pct(Some(self.recall)),
            pct(Some(self.precision)),
            pct(Some(self.f1)),
            pct(self.average)
        )
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_key_values())
    }
}

// ----------------------------------------------------------------------
// domain-word proportion score

/// `m`: lexicon terms among Latin words, `e`: Latin words, `a`: all words.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MwpsReport {
    pub m: usize,
    pub e: usize,
    pub a: usize,
    /// `m * a / e^2`, or `None` when `e == 0`.
    pub mwps: Option<f64>,
}

impl MwpsReport {
    pub fn from_counts(m: usize, e: usize, a: usize) -> Self {
        let mwps = (e > 0).then(|| (m as f64 * a as f64) / (e as f64 * e as f64));
        MwpsReport { m, e, a, mwps }
    }
}

/// Counts of one document.
pub fn mwps_counts(text: &str, lexicon: &Lexicon, local: &LocalScript) -> MwpsReport {
    let mut m = 0;
    let mut e = 0;
    let mut a = 0;
    for w in classify_words(text, lexicon, local) {
        a += 1;
        if w.script == Script::DomainLatin {
            e += 1;
            m += usize::from(w.is_lexicon_term);
        }
    }
    MwpsReport::from_counts(m, e, a)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MwpsAggregation {
    /// Sum the counts over all documents, then take one ratio.
    #[default]
    Pooled,
    /// Mean of per-document scores over documents with at least one Latin
    /// word; the report's counts are still the pooled sums.
    PerDocument,
}

pub fn mwps<'a, I>(texts: I, lexicon: &Lexicon, local: &LocalScript, how: MwpsAggregation) -> MwpsReport
where
    I: IntoIterator<Item = &'a str>,
{
    let (mut m, mut e, mut a) = (0, 0, 0);
    let mut per_doc = Vec::new();
    for t in texts {
        let r = mwps_counts(t, lexicon, local);
        m += r.m;
        e += r.e;
        a += r.a;
        per_doc.extend(r.mwps);
    }
    let mut report = MwpsReport::from_counts(m, e, a);
    if how == MwpsAggregation::PerDocument {
        report.mwps = (!per_doc.is_empty()).then(|| per_doc.iter().sum::<f64>() / per_doc.len() as f64);
    }
    report
}

// ----------------------------------------------------------------------
// embedding export

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EmbeddingSource {
    StudentAlone,
    StudentKd,
    Teacher,
}

impl EmbeddingSource {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingSource::StudentAlone => "student_alone",
            EmbeddingSource::StudentKd => "student_kd",
            EmbeddingSource::Teacher => "teacher",
        }
    }
}

impl std::str::FromStr for EmbeddingSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student_alone" => Ok(EmbeddingSource::StudentAlone),
            "student_kd" => Ok(EmbeddingSource::StudentKd),
            "teacher" => Ok(EmbeddingSource::Teacher),
            other => Err(Error::invalid(format!("unknown embedding source {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub vector: Vec<f64>,
    pub source: EmbeddingSource,
    /// True for pooled knowledge-word vectors, false for the pooled
    /// remaining tokens.
    pub domain: bool,
}

/// Projects rows onto the two leading principal axes of their covariance.
pub fn principal_axes(rows: &[EmbeddingRow]) -> Result<Vec<[f64; 2]>> {
    let d = rows.first().map_or(0, |r| r.vector.len());
    if rows.is_empty() || d == 0 {
        return Ok(vec![[0.0, 0.0]; rows.len()]);
    }
    let n = rows.len();
    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(&r.vector).for_each(|(m, v)| *m += v / n as f64);
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i].vector[j] - mean[j]);
    let cov = x.transpose() * &x / n.max(2) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| -> Vec<f64> {
        let Some(&c) = idx.get(k) else {
            return vec![0.0; d];
        };
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        // Fix the sign so the largest-magnitude component is positive.
        let big = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    let (a1, a2) = (axis(0), axis(1));
    Ok((0..n)
        .map(|i| {
            let row = x.row(i);
            let p = |a: &[f64]| row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
            [p(&a1), p(&a2)]
        })
        .collect())
}

/// TSV with a header line: components `v0..`, `source`, `knowledge` and,
/// when requested, `pc1` and `pc2`.
pub fn export_embeddings(rows: &[EmbeddingRow], with_projection: bool) -> Result<String> {
    let d = rows.first().map_or(0, |r| r.vector.len());
    if let Some(r) = rows.iter().find(|r| r.vector.len() != d) {
        return Err(Error::dim(format!(
            "embedding width {} differs from {d} ({} row)",
            r.vector.len(),
            r.source.as_str()
        )));
    }
    let proj = if with_projection { Some(principal_axes(rows)?) } else { None };
    let mut header: Vec<String> = (0..d).map(|i| format!("v{i}")).collect();
    header.extend(["source".into(), "knowledge".into()]);
    if with_projection {
        header.extend(["pc1".into(), "pc2".into()]);
    }
    let mut out = header.join("\t") + "\n";
    for (i, r) in rows.iter().enumerate() {
        let mut cols: Vec<String> = r.vector.iter().map(|v| format!("{v}")).collect();
        cols.push(r.source.as_str().into());
        cols.push(if r.domain { "domain" } else { "non_domain" }.into());
        if let Some(p) = &proj {
            cols.push(format!("{}", p[i][0]));
            cols.push(format!("{}", p[i][1]));
        }
        out += &cols.join("\t");
        out.push('\n');
    }
    Ok(out)
}

/// Parses the output of [`export_embeddings`], ignoring projection columns.
pub fn parse_embeddings(text: &str) -> Result<Vec<EmbeddingRow>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split('\t').collect();
    let src_col = header
        .iter()
        .position(|h| *h == "source")
        .ok_or_else(|| Error::invalid("embedding file lacks a source column"))?;
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let err = |msg: String| Error::Parse {
            path: "embeddings".into(),
            line: n + 2,
            msg,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != header.len() {
            return Err(err(format!("{} columns, header has {}", cols.len(), header.len())));
        }
        let vector = cols[..src_col]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| err(format!("bad number {c:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let source = cols[src_col].parse().map_err(|e: Error| err(e.to_string()))?;
        let domain = match cols[src_col + 1] {
            "domain" => true,
            "non_domain" => false,
            other => return Err(err(format!("bad knowledge flag {other:?}"))),
        };
        rows.push(EmbeddingRow { vector, source, domain });
    }
    Ok(rows)
}

/// Euclidean distance between the centroids of two sources' rows with the
/// given knowledge flag; `None` if either set is empty.
pub fn centroid_distance(rows: &[EmbeddingRow], a: EmbeddingSource, b: EmbeddingSource, domain: bool) -> Option<f64> {
    let centroid = |s: EmbeddingSource| -> Option<Vec<f64>> {
        let sel: Vec<&EmbeddingRow> = rows.iter().filter(|r| r.source == s && r.domain == domain).collect();
        let first = sel.first()?;
        let mut c = vec![0.0; first.vector.len()];
        for r in &sel {
            c.iter_mut().zip(&r.vector).for_each(|(c, v)| *c += v);
        }
        c.iter_mut().for_each(|x| *x /= sel.len() as f64);
        Some(c)
    };
    let (ca, cb) = (centroid(a)?, centroid(b)?);
    Some(ca.iter().zip(&cb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1], &[1, 0, 0]).unwrap(), Some(1.0));
        assert_eq!(auroc(&[0.7, 0.7], &[1, 0]).unwrap(), Some(0.5));
        assert_eq!(auroc(&[0.1, 0.9], &[1, 0]).unwrap(), Some(0.0));
        assert_eq!(auroc(&[0.1, 0.9], &[1, 1]).unwrap(), None);
        assert!(auroc(&[0.1], &[2]).is_err());
        assert!(auroc(&[], &[]).is_err());
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.9, 0.8, 0.1], &[1, 0, 0]).unwrap(), Some(1.0));
        // ranked: 1, 0, 1 -> 0.5 * 1 + 0.5 * 2/3
        let v = auprc(&[0.9, 0.8, 0.7], &[1, 0, 1]).unwrap().unwrap();
        assert!((v - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
        assert_eq!(auprc(&[0.7, 0.7], &[1, 0]).unwrap(), Some(0.5));
    }

    #[test]
    fn perfect_predictions() {
        let r = binary_metrics(&[0.9, 0.6, 0.2, 0.1], &[1, 1, 0, 0], DEFAULT_THRESHOLD).unwrap();
        for (k, v) in r.fields() {
            assert_eq!(v, Some(1.0), "{k}");
        }
    }

    #[test]
    fn single_class_marks_undefined() {
        let r = binary_metrics(&[0.9, 0.2], &[0, 0], 0.5).unwrap();
        assert_eq!((r.auroc, r.auprc, r.average), (None, None, None));
        assert!(r.to_key_values().contains("auroc = NA"));
        assert!(r.table_row("x").contains("NA"));
    }

    #[test]
    fn key_value_round_trip() {
        let r = binary_metrics(&[0.91, 0.62, 0.55, 0.12, 0.4], &[1, 0, 1, 0, 1], 0.5).unwrap();
        let kv = crate::io::parse_key_values(&r.to_key_values(), "m").unwrap();
        assert_eq!(MetricReport::parse_key_values(&kv).unwrap(), r);
    }

    #[test]
    fn mwps_examples() {
        let r = MwpsReport::from_counts(2, 4, 10);
        assert_eq!(r.mwps, Some(1.25));
        assert_eq!(MwpsReport::from_counts(0, 3, 9).mwps, Some(0.0));
        assert_eq!(MwpsReport::from_counts(0, 0, 9).mwps, None);
        let lex = Lexicon::new(["fever", "sepsis"]).unwrap();
        let local = LocalScript::default();
        let r = mwps(["fever sepsis"], &lex, &local, MwpsAggregation::Pooled);
        assert_eq!(r.mwps, Some(1.0));
        let docs = ["fever 열 38", "cough sepsis 기침 기침"];
        let pooled = mwps(docs, &lex, &local, MwpsAggregation::Pooled);
        assert_eq!((pooled.m, pooled.e, pooled.a), (2, 3, 7));
        let per = mwps(docs, &lex, &local, MwpsAggregation::PerDocument);
        assert_eq!(per.mwps, Some((3.0 + 1.0) / 2.0));
    }

    #[test]
    fn export_shapes() {
        let sources = [EmbeddingSource::StudentAlone, EmbeddingSource::StudentKd, EmbeddingSource::Teacher];
        let rows: Vec<EmbeddingRow> = sources
            .iter()
            .flat_map(|&s| {
                (0..10).map(move |i| EmbeddingRow {
                    vector: vec![i as f64, (i * i) as f64 * 0.1, 1.0],
                    source: s,
                    domain: i % 2 == 0,
                })
            })
            .collect();
        let tsv = export_embeddings(&rows, true).unwrap();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 31);
        assert!(lines.iter().all(|l| l.split('\t').count() == 7));
        let back = parse_embeddings(&tsv).unwrap();
        assert_eq!(back, rows);
        assert_eq!(
            centroid_distance(&rows, EmbeddingSource::StudentKd, EmbeddingSource::Teacher, true),
            Some(0.0)
        );
        let mut bad = rows.clone();
        bad[4].vector.push(0.0);
        assert!(matches!(export_embeddings(&bad, false), Err(Error::Dimension(_))));
    }

    #[test]
    fn principal_axes_follow_spread() {
        let rows: Vec<EmbeddingRow> = (0..20)
            .map(|i| EmbeddingRow {
                vector: vec![i as f64, 0.01 * ((i * 7) % 3) as f64],
                source: EmbeddingSource::Teacher,
                domain: true,
            })
            .collect();
        let p = principal_axes(&rows).unwrap();
        assert!((p[19][0] - p[0][0] - 19.0).abs() < 1e-6);
    }
}
