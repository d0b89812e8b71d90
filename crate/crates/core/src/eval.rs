//! ROI-level pixel metrics. Cases get F1, recall and precision; controls get
//! specificity only, since one false-positive pixel zeroes F1 on an ROI
//! without positives.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morph::Mask;
use crate::wsi::{GroundTruth, SlideClass};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiConfusion {
    pub slide: String,
    pub roi: u16,
    pub class: SlideClass,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl RoiConfusion {
    pub fn pixels(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn check_aligned(pred: &Mask, gt: &GroundTruth) -> Result<()> {
    if (pred.width, pred.height) != (gt.width(), gt.height()) {
        return Err(Error::Validation(format!(
            "prediction is {}×{}, ground truth is {}×{}",
            pred.width,
            pred.height,
            gt.width(),
            gt.height()
        )));
    }
    Ok(())
}

/// Pixel counts inside one ROI.
pub fn confuse(pred: &Mask, gt: &GroundTruth, roi: u16, class: SlideClass, slide: &str) -> Result<RoiConfusion> {
    check_aligned(pred, gt)?;
    if roi == 0 || roi > gt.n_rois {
        return Err(Error::Validation(format!("unknown ROI {roi} (slide has {})", gt.n_rois)));
    }
    let mut c = RoiConfusion {
        slide: slide.to_string(),
        roi,
        class,
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    for ((&r, &p), &t) in gt.rois.iter().zip(&pred.data).zip(&gt.mask.data) {
        if r != roi {
            continue;
        }
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Confusions for every ROI of a slide in one pass. An ROI is a case when it
/// contains ground-truth positives and a control otherwise.
pub fn confuse_slide(pred: &Mask, gt: &GroundTruth, slide: &str) -> Result<Vec<RoiConfusion>> {
    check_aligned(pred, gt)?;
    let mut counts = vec![[0u64; 4]; gt.n_rois as usize + 1];
    for ((&r, &p), &t) in gt.rois.iter().zip(&pred.data).zip(&gt.mask.data) {
        counts[r as usize][(p as usize) << 1 | t as usize] += 1;
    }
    Ok(counts
        .iter()
        .enumerate()
        .skip(1)
        .map(|(roi, k)| {
            let (tn, fn_, fp, tp) = (k[0], k[1], k[2], k[3]);
            RoiConfusion {
                slide: slide.to_string(),
                roi: roi as u16,
                class: if tp + fn_ > 0 { SlideClass::Case } else { SlideClass::Control },
                tp,
                fp,
                fn_,
                tn,
            }
        })
        .collect())
}

/// Precision, recall and F1 with 0 for any empty denominator.
pub fn case_metrics(c: &RoiConfusion) -> CaseMetrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    CaseMetrics {
        f1,
        recall,
        precision,
    }
}

/// `TN / (TN + FP)`; an ROI without pixels counts as 1.
pub fn control_specificity(c: &RoiConfusion) -> Result<f64> {
    if c.tp + c.fn_ > 0 {
        return Err(Error::Validation(format!(
            "control ROI {} of {} has {} ground-truth positive pixels",
            c.roi,
            c.slide,
            c.tp + c.fn_
        )));
    }
    Ok(if c.tn + c.fp == 0 { 1.0 } else { ratio(c.tn, c.tn + c.fp) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiRow {
    #[serde(flatten)]
    pub confusion: RoiConfusion,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<CaseMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub specificity: Option<f64>,
}

impl RoiRow {
    pub fn new(c: RoiConfusion) -> Result<Self> {
        Ok(match c.class {
            SlideClass::Case => Self {
                metrics: Some(case_metrics(&c)),
                specificity: None,
                confusion: c,
            },
            SlideClass::Control => Self {
                specificity: Some(control_specificity(&c)?),
                metrics: None,
                confusion: c,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub cases: usize,
    pub controls: usize,
    /// Unweighted means over case ROIs.
    pub f1: Option<f64>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    /// Unweighted mean over control ROIs.
    pub specificity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<RoiRow>,
    /// Mean of per-ROI metrics; the headline numbers.
    pub macro_avg: Aggregate,
    /// Metrics of the pooled counts, for reference.
    pub micro_avg: Aggregate,
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn aggregate(rows: Vec<RoiRow>) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(Error::Validation("no ROIs to aggregate".into()));
    }
    let cases: Vec<&RoiRow> = rows.iter().filter(|r| r.confusion.class == SlideClass::Case).collect();
    let controls: Vec<&RoiRow> = rows.iter().filter(|r| r.confusion.class == SlideClass::Control).collect();
    let case_m = |f: fn(&CaseMetrics) -> f64| mean(cases.iter().filter_map(|r| r.metrics.as_ref()).map(f));
    let macro_avg = Aggregate {
        cases: cases.len(),
        controls: controls.len(),
        f1: case_m(|m| m.f1),
        recall: case_m(|m| m.recall),
        precision: case_m(|m| m.precision),
        specificity: mean(controls.iter().filter_map(|r| r.specificity)),
    };
    let pool = |group: &[&RoiRow]| {
        group.iter().fold([0u64; 4], |mut a, r| {
            let c = &r.confusion;
            for (s, v) in a.iter_mut().zip([c.tp, c.fp, c.fn_, c.tn]) {
                *s += v;
            }
            a
        })
    };
    let [tp, fp, fn_, _] = pool(&cases);
    let [_, cfp, _, ctn] = pool(&controls);
    let pooled = case_metrics(&RoiConfusion {
        slide: String::new(),
        roi: 0,
        class: SlideClass::Case,
        tp,
        fp,
        fn_,
        tn: 0,
    });
    let micro_avg = Aggregate {
        cases: cases.len(),
        controls: controls.len(),
        f1: (!cases.is_empty()).then_some(pooled.f1),
        recall: (!cases.is_empty()).then_some(pooled.recall),
        precision: (!cases.is_empty()).then_some(pooled.precision),
        specificity: (!controls.is_empty()).then(|| if ctn + cfp == 0 { 1.0 } else { ratio(ctn, ctn + cfp) }),
    };
    Ok(EvalReport {
        rows,
        macro_avg,
        micro_avg,
        meta: Default::default(),
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    /// Plain-text table with one row per ROI and both averages.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:>4} {:<8} {:>8} {:>8} {:>9} {:>11}",
            "slide", "roi", "class", "F1", "recall", "precision", "specificity"
        );
        for r in &self.rows {
            let c = &r.confusion;
            let class = match c.class {
                SlideClass::Case => "case",
                SlideClass::Control => "control",
            };
            let m = r.metrics.as_ref();
            let _ = writeln!(
                s,
                "{:<20} {:>4} {:<8} {:>8} {:>8} {:>9} {:>11}",
                c.slide,
                c.roi,
                class,
                cell(m.map(|m| m.f1)),
                cell(m.map(|m| m.recall)),
                cell(m.map(|m| m.precision)),
                cell(r.specificity)
            );
        }
        for (label, a) in [("mean (macro)", &self.macro_avg), ("pooled (micro)", &self.micro_avg)] {
            let _ = writeln!(
                s,
                "{:<20} {:>4} {:<8} {:>8} {:>8} {:>9} {:>11}",
                label,
                "",
                format!("{}/{}", a.cases, a.controls),
                cell(a.f1),
                cell(a.recall),
                cell(a.precision),
                cell(a.specificity)
            );
        }
        s
    }
}
