//! Count-level evaluation: MAE, RMSE, MAPE, miss-count accounting, and
//! comparison tables.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimateMode {
    Frontside,
    Backside,
    Bothside,
}

impl EstimateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimateMode::Frontside => "frontside",
            EstimateMode::Backside => "backside",
            EstimateMode::Bothside => "bothside",
        }
    }
}

impl fmt::Display for EstimateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EstimateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frontside" => Ok(EstimateMode::Frontside),
            "backside" => Ok(EstimateMode::Backside),
            "bothside" => Ok(EstimateMode::Bothside),
            other => Err(Error::arg(format!(
                "unknown mode `{other}` (expected frontside, backside or bothside)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountRecord {
    pub ear_id: String,
    pub ground_truth: f64,
    pub predicted: f64,
    pub mode: EstimateMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    /// Percent; `NaN` when every record has zero ground truth.
    pub mape: f64,
    /// Records left out of MAPE because their ground truth is zero.
    pub mape_excluded: usize,
    pub miss_counted: f64,
    pub correctly_counted: f64,
    pub total_gt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub overall: Metrics,
    pub per_mode: BTreeMap<EstimateMode, Metrics>,
}

fn metrics(records: &[&CountRecord]) -> Metrics {
    let n = records.len();
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut pct = 0.0;
    let mut pct_n = 0usize;
    let mut total_gt = 0.0;
    for r in records {
        let e = r.ground_truth - r.predicted;
        abs += e.abs();
        sq += e * e;
        total_gt += r.ground_truth;
        if r.ground_truth > 0.0 {
            pct += (e / r.ground_truth).abs();
            pct_n += 1;
        }
    }
    Metrics {
        n,
        mae: abs / n as f64,
        rmse: (sq / n as f64).sqrt(),
        mape: if pct_n == 0 { f64::NAN } else { 100.0 * pct / pct_n as f64 },
        mape_excluded: n - pct_n,
        miss_counted: abs,
        correctly_counted: total_gt - abs,
        total_gt,
    }
}

pub fn compute_metrics(records: &[CountRecord]) -> Result<EvaluationReport> {
    if records.is_empty() {
        return Err(Error::arg("no count records to evaluate"));
    }
    for r in records {
        if !(r.ground_truth.is_finite() && r.predicted.is_finite()) || r.ground_truth < 0.0 {
            return Err(Error::Validation {
                image_id: r.ear_id.clone(),
                message: format!("invalid counts gt={} pred={}", r.ground_truth, r.predicted),
            });
        }
    }
    let all: Vec<&CountRecord> = records.iter().collect();
    let overall = metrics(&all);
    if overall.mape_excluded > 0 {
        log::warn!("{} record(s) with zero ground truth left out of MAPE", overall.mape_excluded);
    }
    let mut groups: BTreeMap<EstimateMode, Vec<&CountRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.mode).or_default().push(r);
    }
    let per_mode = groups.into_iter().map(|(m, rs)| (m, metrics(&rs))).collect();
    Ok(EvaluationReport { overall, per_mode })
}

impl EvaluationReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>6} {:>10} {:>10} {:>8} {:>12} {:>12}",
            "mode", "n", "MAE", "RMSE", "MAPE%", "miss", "correct"
        );
        let mut row = |name: &str, m: &Metrics| {
            let _ = writeln!(
                out,
                "{:<10} {:>6} {:>10.2} {:>10.2} {:>8.2} {:>12.1} {:>12.1}",
                name, m.n, m.mae, m.rmse, m.mape, m.miss_counted, m.correctly_counted
            );
        };
        for (mode, m) in &self.per_mode {
            row(mode.as_str(), m);
        }
        row("all", &self.overall);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,n,mae,rmse,mape,mape_excluded,miss_counted,correctly_counted,total_gt\n");
        let rows = self
            .per_mode
            .iter()
            .map(|(k, m)| (k.as_str(), m))
            .chain(std::iter::once(("all", &self.overall)));
        for (name, m) in rows {
            let _ = writeln!(
                out,
                "{name},{},{},{},{},{},{},{},{}",
                m.n, m.mae, m.rmse, m.mape, m.mape_excluded, m.miss_counted, m.correctly_counted, m.total_gt
            );
        }
        out
    }
}

/// Records as CSV: `ear_id,mode,ground_truth,predicted`.
pub fn records_to_csv(records: &[CountRecord]) -> String {
    let mut out = String::from("ear_id,mode,ground_truth,predicted\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{}", r.ear_id, r.mode, r.ground_truth, r.predicted);
    }
    out
}

pub fn records_from_csv(text: &str) -> Result<Vec<CountRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "ear_id,mode,ground_truth,predicted" => {}
        _ => {
            return Err(Error::Schema {
                locus: "records:1".into(),
                message: "expected header ear_id,mode,ground_truth,predicted".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| Error::Schema {
            locus: format!("records:{}", i + 1),
            message: m,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", f.len())));
        }
        out.push(CountRecord {
            ear_id: f[0].to_string(),
            mode: f[1].parse().map_err(|e: Error| bad(e.to_string()))?,
            ground_truth: f[2].parse().map_err(|_| bad(format!("bad ground_truth `{}`", f[2])))?,
            predicted: f[3].parse().map_err(|_| bad(format!("bad predicted `{}`", f[3])))?,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedReport {
    pub name: String,
    pub report: EvaluationReport,
    pub param_count: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<NamedReport>,
}

/// Rows sorted by MAE, then RMSE, then name.
pub fn compare_models(mut reports: Vec<NamedReport>) -> ComparisonTable {
    reports.sort_by(|a, b| {
        let (x, y) = (&a.report.overall, &b.report.overall);
        x.mae
            .total_cmp(&y.mae)
            .then(x.rmse.total_cmp(&y.rmse))
            .then_with(|| a.name.cmp(&b.name))
    });
    ComparisonTable { rows: reports }
}

impl ComparisonTable {
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
        let mut out = format!(
            "{:<width$} {:>10} {:>10} {:>8} {:>12}\n",
            "model", "MAE", "RMSE", "MAPE%", "params"
        );
        for r in &self.rows {
            let m = &r.report.overall;
            let params = r.param_count.map(|p| p.to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<width$} {:>10.2} {:>10.2} {:>8.2} {:>12}",
                r.name, m.mae, m.rmse, m.mape, params
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,mae,rmse,mape,params\n");
        for r in &self.rows {
            let m = &r.report.overall;
            let params = r.param_count.map(|p| p.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", r.name, m.mae, m.rmse, m.mape, params);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(gt: f64, pred: f64) -> CountRecord {
        CountRecord {
            ear_id: format!("e{gt}"),
            ground_truth: gt,
            predicted: pred,
            mode: EstimateMode::Frontside,
        }
    }

    #[test]
    fn single_record() {
        let r = compute_metrics(&[rec(100.0, 90.0)]).unwrap().overall;
        assert_eq!((r.mae, r.rmse, r.mape), (10.0, 10.0, 10.0));
    }

    #[test]
    fn two_records() {
        let r = compute_metrics(&[rec(100.0, 110.0), rec(200.0, 180.0)]).unwrap().overall;
        assert_eq!(r.mae, 15.0);
        assert!((r.rmse - 250f64.sqrt()).abs() < 1e-12);
        assert!((r.mape - 10.0).abs() < 1e-12);
        assert_eq!(r.miss_counted, 30.0);
        assert_eq!(r.correctly_counted, 270.0);
    }

    #[test]
    fn zero_gt_excluded_from_mape() {
        let r = compute_metrics(&[rec(0.0, 5.0), rec(100.0, 90.0)]).unwrap().overall;
        assert_eq!(r.mape_excluded, 1);
        assert!((r.mape - 10.0).abs() < 1e-12);
        assert_eq!(r.mae, 7.5);
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(compute_metrics(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn miss_count_consistency() {
        // 257 records whose absolute errors average 33.03
        let records: Vec<_> = (0..257).map(|i| rec(700.0, if i % 2 == 0 { 733.03 } else { 666.97 })).collect();
        let r = compute_metrics(&records).unwrap().overall;
        assert!((r.mae - 33.03).abs() < 1e-9);
        assert!((r.miss_counted - 8488.71).abs() < 1e-6);
        assert_eq!(r.miss_counted.round(), 8489.0);
    }

    #[test]
    fn per_mode_breakdown() {
        let mut b = rec(50.0, 40.0);
        b.mode = EstimateMode::Bothside;
        let r = compute_metrics(&[rec(100.0, 90.0), b]).unwrap();
        assert_eq!(r.per_mode.len(), 2);
        assert_eq!(r.per_mode[&EstimateMode::Bothside].mae, 10.0);
        assert!(r.to_text().contains("bothside"));
        assert_eq!(r.to_csv().lines().count(), 4);
    }

    #[test]
    fn comparison_ordering() {
        let mk = |name: &str, mae: f64, rmse: f64| {
            let mut rep = compute_metrics(&[rec(100.0, 90.0)]).unwrap();
            rep.overall.mae = mae;
            rep.overall.rmse = rmse;
            NamedReport { name: name.into(), report: rep, param_count: None }
        };
        let t = compare_models(vec![mk("teacher", 44.91, 60.0), mk("student", 41.36, 60.27)]);
        assert_eq!(t.rows[0].name, "student");
        let t = compare_models(vec![mk("b", 1.0, 2.0), mk("a", 1.0, 2.0), mk("c", 1.0, 1.5)]);
        let names: Vec<_> = t.rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["c", "a", "b"]);
        assert_eq!(compare_models(vec![mk("x", 1.0, 1.0)]).to_text().lines().count(), 2);
    }

    #[test]
    fn records_csv_roundtrip() {
        let rs = vec![rec(100.0, 90.5), rec(3.0, 0.0)];
        assert_eq!(records_from_csv(&records_to_csv(&rs)).unwrap(), rs);
    }
}
