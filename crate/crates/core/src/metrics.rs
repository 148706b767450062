//! RES / GRES / MRES evaluation: mIoU, oIoU (= cIoU), gIoU, N-acc and the no-target rule.
//!
//! gIoU scoring of no-target samples follows the gRefCOCO benchmark convention: a
//! no-target sample scores 1 when the prediction is also no-target and 0 otherwise.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rle_decode, BinaryMask, RleMask};
use crate::types::Granularity;

/// Predictions with fewer foreground pixels than this count as "no target".
pub const NO_TARGET_MIN_AREA: usize = 50;

pub const GIOU_CONVENTION: &str =
    "gIoU: no-target samples score 1 if predicted no-target else 0; targeted samples predicted no-target score 0 (gRefCOCO convention)";

pub fn no_target_decision(pred: &BinaryMask) -> bool {
    pred.area() < NO_TARGET_MIN_AREA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    /// `None` encodes an empty prediction.
    pub pred: Option<RleMask>,
    pub gt: Option<RleMask>,
    pub gt_no_target: bool,
    #[serde(default)]
    pub granularity: Granularity,
}

impl EvalRecord {
    pub fn from_masks(
        id: impl Into<String>,
        pred: &BinaryMask,
        gt: &BinaryMask,
        gt_no_target: bool,
        granularity: Granularity,
    ) -> Self {
        let enc = |m: &BinaryMask| (!m.is_empty()).then(|| crate::geometry::rle_encode(m));
        Self { id: id.into(), pred: enc(pred), gt: enc(gt), gt_no_target, granularity }
    }

    /// Intersection/union counts after applying the no-target rule to the prediction.
    pub fn score(&self) -> Result<SampleScore> {
        let gt = self.gt.as_ref().map(rle_decode).transpose()?;
        let pred = self.pred.as_ref().map(rle_decode).transpose()?;
        if self.gt_no_target && gt.as_ref().is_some_and(|m| !m.is_empty()) {
            return Err(Error::InvalidInput(format!("record `{}` is no-target but has a gt mask", self.id)));
        }
        let pred_no_target = pred.as_ref().map_or(true, no_target_decision);
        let (inter, union) = match (&pred, &gt) {
            (Some(p), Some(g)) => {
                let pa = if pred_no_target { 0 } else { p.area() };
                let inter = if pred_no_target { 0 } else { p.intersection_area(g)? };
                (inter as u64, (pa + g.area() - inter) as u64)
            }
            (Some(p), None) => (0, if pred_no_target { 0 } else { p.area() as u64 }),
            (None, Some(g)) => (0, g.area() as u64),
            (None, None) => (0, 0),
        };
        Ok(SampleScore {
            intersection: inter,
            union,
            gt_no_target: self.gt_no_target,
            pred_no_target,
            granularity: self.granularity,
        })
    }
}

/// Per-sample pixel counts feeding every metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleScore {
    pub intersection: u64,
    pub union: u64,
    pub gt_no_target: bool,
    pub pred_no_target: bool,
    pub granularity: Granularity,
}

impl SampleScore {
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }

    /// gIoU contribution under the benchmark convention.
    pub fn giou_score(&self) -> f64 {
        if self.gt_no_target {
            if self.pred_no_target {
                1.0
            } else {
                0.0
            }
        } else if self.pred_no_target {
            0.0
        } else {
            self.iou()
        }
    }
}

pub fn score_records(records: &[EvalRecord]) -> Result<Vec<SampleScore>> {
    records.iter().map(EvalRecord::score).collect()
}

/// Pairwise summation over a fixed binary tree, so the result does not depend on how
/// per-sample scores were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

fn targeted(scores: &[SampleScore]) -> impl Iterator<Item = &SampleScore> {
    scores.iter().filter(|s| !s.gt_no_target)
}

pub fn miou(scores: &[SampleScore]) -> Result<f64> {
    let ious: Vec<f64> = targeted(scores).map(SampleScore::iou).collect();
    if ious.is_empty() {
        return Err(Error::UndefinedMetric("mIoU needs at least one targeted sample".into()));
    }
    Ok(pairwise_sum(&ious) / ious.len() as f64)
}

pub fn oiou(scores: &[SampleScore]) -> Result<f64> {
    let (i, u) = targeted(scores).fold((0u64, 0u64), |(i, u), s| (i + s.intersection, u + s.union));
    if u == 0 {
        return Err(Error::UndefinedMetric("oIoU total union is zero".into()));
    }
    Ok(i as f64 / u as f64)
}

/// Cumulative IoU; the same quantity as [`oiou`].
pub fn ciou(scores: &[SampleScore]) -> Result<f64> {
    oiou(scores)
}

pub fn giou(scores: &[SampleScore]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("gIoU needs at least one sample".into()));
    }
    let v: Vec<f64> = scores.iter().map(SampleScore::giou_score).collect();
    Ok(pairwise_sum(&v) / v.len() as f64)
}

pub fn nacc(scores: &[SampleScore]) -> Result<f64> {
    let negatives: Vec<&SampleScore> = scores.iter().filter(|s| s.gt_no_target).collect();
    if negatives.is_empty() {
        return Err(Error::UndefinedMetric("N-acc needs at least one no-target sample".into()));
    }
    let correct = negatives.iter().filter(|s| s.pred_no_target).count();
    Ok(correct as f64 / negatives.len() as f64)
}

pub fn compute_miou(records: &[EvalRecord]) -> Result<f64> {
    miou(&score_records(records)?)
}

pub fn compute_oiou_ciou(records: &[EvalRecord]) -> Result<f64> {
    oiou(&score_records(records)?)
}

pub fn compute_giou(records: &[EvalRecord]) -> Result<f64> {
    giou(&score_records(records)?)
}

pub fn compute_nacc(records: &[EvalRecord]) -> Result<f64> {
    nacc(&score_records(records)?)
}

/// Metrics over one record subset. Undefined metrics are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub samples: usize,
    pub miou: Option<f64>,
    pub oiou: Option<f64>,
    pub ciou: Option<f64>,
    pub giou: Option<f64>,
    pub n_acc: Option<f64>,
}

impl SubsetMetrics {
    pub fn from_scores(scores: &[SampleScore]) -> Self {
        let oiou = oiou(scores).ok();
        Self {
            samples: scores.len(),
            miou: miou(scores).ok(),
            oiou,
            ciou: oiou,
            giou: giou(scores).ok(),
            n_acc: nacc(scores).ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub convention: String,
    /// Which proposal source produced the evaluated predictions.
    #[serde(default)]
    pub proposals: Option<String>,
    pub overall: SubsetMetrics,
    /// Keys: `object`, `part`, `object&part`.
    pub by_granularity: BTreeMap<String, SubsetMetrics>,
}

impl MetricReport {
    pub fn from_records(records: &[EvalRecord]) -> Result<Self> {
        Ok(Self::from_scores(&score_records(records)?))
    }

    pub fn from_scores(scores: &[SampleScore]) -> Self {
        let pick = |g: Granularity| scores.iter().copied().filter(|s| s.granularity == g).collect::<Vec<_>>();
        let mut by = BTreeMap::new();
        by.insert("object".to_string(), SubsetMetrics::from_scores(&pick(Granularity::Object)));
        by.insert("part".to_string(), SubsetMetrics::from_scores(&pick(Granularity::Part)));
        by.insert("object&part".to_string(), SubsetMetrics::from_scores(scores));
        Self {
            convention: GIOU_CONVENTION.to_string(),
            proposals: None,
            overall: SubsetMetrics::from_scores(scores),
            by_granularity: by,
        }
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

/// Plain-text table: one row per metric/granularity, one column per split.
pub fn render_table(splits: &[(String, MetricReport)]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<22}", "metric");
    for (name, _) in splits {
        let _ = write!(out, "{name:>10}");
    }
    out.push('\n');
    type Getter = fn(&SubsetMetrics) -> Option<f64>;
    let rows: [(&str, Getter); 5] = [
        ("mIoU", |m| m.miou),
        ("oIoU", |m| m.oiou),
        ("cIoU", |m| m.ciou),
        ("gIoU", |m| m.giou),
        ("N-acc", |m| m.n_acc),
    ];
    for subset in ["part", "object", "object&part"] {
        for (label, get) in rows {
            let _ = write!(out, "{:<22}", format!("{label} ({subset})"));
            for (_, rep) in splits {
                let v = rep.by_granularity.get(subset).and_then(get);
                let _ = write!(out, "{:>10}", pct(v));
            }
            out.push('\n');
        }
    }
    let _ = writeln!(out, "# {GIOU_CONVENTION}");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(i: u64, u: u64) -> SampleScore {
        SampleScore { intersection: i, union: u, gt_no_target: false, pred_no_target: false, granularity: Granularity::Object }
    }

    fn neg(pred_no_target: bool) -> SampleScore {
        SampleScore { intersection: 0, union: 0, gt_no_target: true, pred_no_target, granularity: Granularity::Object }
    }

    #[test]
    fn no_target_boundary() {
        let m = |a: usize| BinaryMask::from_fn(10, 10, move |r, c| r * 10 + c < a);
        assert!(no_target_decision(&m(49)));
        assert!(!no_target_decision(&m(50)));
        assert!(no_target_decision(&BinaryMask::empty(4, 4)));
    }

    #[test]
    fn miou_vs_oiou_diverge() {
        let sc = [s(1, 2), s(3, 4)];
        assert!((oiou(&sc).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((miou(&sc).unwrap() - 0.625).abs() < 1e-15);
        assert_eq!(ciou(&sc).unwrap(), oiou(&sc).unwrap());
        assert_eq!(miou(&[s(1, 2)]).unwrap(), 0.5);
        assert_eq!(miou(&[s(4, 4), s(0, 4)]).unwrap(), 0.5);
        assert_eq!(oiou(&[s(3, 4)]).unwrap(), 0.75);
    }

    #[test]
    fn undefined_metrics() {
        assert!(matches!(miou(&[neg(true)]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(nacc(&[s(1, 1)]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(oiou(&[s(0, 0)]), Err(Error::UndefinedMetric(_))));
        assert!(giou(&[]).is_err());
    }

    #[test]
    fn giou_and_nacc_conventions() {
        assert_eq!(giou(&[neg(true)]).unwrap(), 1.0);
        assert_eq!(giou(&[neg(false)]).unwrap(), 0.0);
        let mut missed = s(0, 10);
        missed.pred_no_target = true;
        assert_eq!(giou(&[missed]).unwrap(), 0.0);
        let sc = [neg(true), neg(true), neg(true), neg(false)];
        assert_eq!(nacc(&sc).unwrap(), 0.75);
        assert_eq!(nacc(&[neg(true)]).unwrap(), 1.0);
        assert_eq!(nacc(&[neg(false)]).unwrap(), 0.0);
    }

    #[test]
    fn record_scoring_applies_area_rule() {
        let gt = BinaryMask::from_fn(10, 10, |r, _| r < 6);
        let small = BinaryMask::from_fn(10, 10, |r, c| r < 4 && c < 10 && r * 10 + c < 40);
        let rec = EvalRecord::from_masks("a", &small, &gt, false, Granularity::Part);
        let sc = rec.score().unwrap();
        assert!(sc.pred_no_target);
        assert_eq!(sc.intersection, 0);
        assert_eq!(sc.union, 60);
        let rec = EvalRecord::from_masks("b", &gt, &gt, false, Granularity::Part);
        assert_eq!(rec.score().unwrap().iou(), 1.0);
        let rec = EvalRecord::from_masks("c", &BinaryMask::empty(10, 10), &BinaryMask::empty(10, 10), true, Granularity::Object);
        let sc = rec.score().unwrap();
        assert!(sc.gt_no_target && sc.pred_no_target);
    }

    #[test]
    fn report_table_has_all_rows() {
        let rep = MetricReport::from_scores(&[s(1, 2), neg(true)]);
        let t = render_table(&[("val".into(), rep.clone()), ("testA".into(), rep)]);
        assert!(t.contains("mIoU (object&part)"));
        assert!(t.contains("testA"));
        assert!(t.lines().count() >= 16);
    }

    #[test]
    fn pairwise_sum_matches_naive_for_small_ints() {
        let v: Vec<f64> = (0..37).map(f64::from).collect();
        assert_eq!(pairwise_sum(&v), 666.0);
    }
}
