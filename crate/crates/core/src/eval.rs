//! Confusion matrices, IoU / mIoU, class ratios and multi-seed aggregation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixing::{LabelMap, IGNORE_INDEX};
use crate::numerics::Tensor;
use crate::segnet::SegModel;
use crate::trainer::argmax_labels;
use crate::util::write_atomic;

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }

    /// Adds one prediction/truth pair; ignored truth pixels are skipped.
    pub fn accumulate(&mut self, prediction: &LabelMap, truth: &LabelMap) -> Result<()> {
        if prediction.dims() != truth.dims() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs truth {:?}",
                prediction.dims(),
                truth.dims()
            )));
        }
        let c = self.classes;
        let mut add = vec![0u64; c * c];
        for (&p, &t) in prediction.data().iter().zip(truth.data()) {
            if t == IGNORE_INDEX {
                continue;
            }
            let (t, p) = (t as usize, p as usize);
            if t >= c || p >= c {
                return Err(Error::Domain(format!("class pair ({t}, {p}) outside {c} classes")));
            }
            add[t * c + p] += 1;
        }
        for (a, b) in self.counts.iter_mut().zip(add) {
            *a += b;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape("confusion matrices with different class counts".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// `cm[c][c] / (row_c + col_c − cm[c][c])`; `None` when the union is empty.
pub fn iou(cm: &ConfusionMatrix, c: usize) -> Option<f64> {
    let inter = cm.get(c, c);
    let union = cm.row_sum(c) + cm.col_sum(c) - inter;
    (union > 0).then(|| inter as f64 / union as f64)
}

/// What to do with a class that is absent from both truth and prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UndefinedIou {
    #[default]
    Exclude,
    CountAsZero,
}

pub fn per_class_iou(cm: &ConfusionMatrix, policy: UndefinedIou) -> Vec<Option<f64>> {
    (0..cm.classes())
        .map(|c| match (iou(cm, c), policy) {
            (None, UndefinedIou::CountAsZero) => Some(0.0),
            (v, _) => v,
        })
        .collect()
}

pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

pub fn miou(cm: &ConfusionMatrix, policy: UndefinedIou) -> Option<f64> {
    mean_defined(&per_class_iou(cm, policy))
}

/// Fraction of non-ignored pixels per class over a set of label maps.
pub fn class_ratios<'a>(labels: impl IntoIterator<Item = &'a LabelMap>, classes: usize) -> Result<Vec<f64>> {
    let mut hist = [0u64; 256];
    for l in labels {
        for &v in l.data() {
            hist[v as usize] += 1;
        }
    }
    if hist[classes..IGNORE_INDEX as usize].iter().any(|&n| n > 0) {
        return Err(Error::Domain(format!("label value outside {classes} classes")));
    }
    let total: u64 = hist[..classes].iter().sum();
    if total == 0 {
        return Err(Error::Domain("no labeled pixels".into()));
    }
    Ok(hist[..classes].iter().map(|&n| n as f64 / total as f64).collect())
}

/// Confusion matrix of the model's argmax predictions on `samples`.
pub fn evaluate_model(model: &SegModel, samples: &[(Tensor, LabelMap)]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config().classes);
    for (image, truth) in samples {
        let (logits, _) = model.seg_forward(image)?;
        cm.accumulate(&argmax_labels(&logits)?, truth)?;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    /// Per-class ratios of the evaluated ground truth.
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub iou_std: Vec<Option<f64>>,
    pub miou_std: Option<f64>,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix, class_names: &[String], seed: u64, policy: UndefinedIou) -> Result<Self> {
        let c = cm.classes();
        if class_names.len() != c {
            return Err(Error::Shape(format!("{} class names for {c} classes", class_names.len())));
        }
        let iou = per_class_iou(cm, policy);
        let total = cm.total();
        let ratios = (0..c)
            .map(|k| if total == 0 { 0.0 } else { cm.row_sum(k) as f64 / total as f64 })
            .collect();
        Ok(Self {
            class_names: class_names.to_vec(),
            miou: mean_defined(&iou),
            iou_std: iou.iter().map(|v| v.map(|_| 0.0)).collect(),
            miou_std: mean_defined(&iou).map(|_| 0.0),
            iou,
            ratios,
            seeds: vec![seed],
        })
    }
}

/// `(mean, population std)` of the defined values.
pub fn mean_std(values: &[Option<f64>]) -> Option<(f64, f64)> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Mean and population std across per-seed reports.
pub fn aggregate_seeds(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports.first().ok_or_else(|| Error::Invalid("no reports to aggregate".into()))?;
    if reports.iter().any(|r| r.class_names != first.class_names) {
        return Err(Error::Invalid("reports have different class sets".into()));
    }
    let c = first.class_names.len();
    let per_class: Vec<Option<(f64, f64)>> = (0..c)
        .map(|k| mean_std(&reports.iter().map(|r| r.iou[k]).collect::<Vec<_>>()))
        .collect();
    let m = mean_std(&reports.iter().map(|r| r.miou).collect::<Vec<_>>());
    let ratios = (0..c)
        .map(|k| reports.iter().map(|r| r.ratios[k]).sum::<f64>() / reports.len() as f64)
        .collect();
    Ok(MetricsReport {
        class_names: first.class_names.clone(),
        iou: per_class.iter().map(|v| v.map(|p| p.0)).collect(),
        iou_std: per_class.iter().map(|v| v.map(|p| p.1)).collect(),
        miou: m.map(|p| p.0),
        miou_std: m.map(|p| p.1),
        ratios,
        seeds: reports.iter().flat_map(|r| r.seeds.clone()).collect(),
    })
}

/// `mean±std` in percent with two decimals.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{:.2}±{:.2}", 100.0 * mean, 100.0 * std)
}

/// One row of a report CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub labeled_ratio: f64,
    /// Seed number, or `None` for the aggregate row.
    pub seed: Option<u64>,
    pub report: MetricsReport,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Per-class IoU and mIoU columns, then their std columns.
pub fn report_csv(rows: &[ReportRow]) -> Result<Vec<u8>> {
    let first = rows.first().ok_or_else(|| Error::Invalid("empty report".into()))?;
    let names = &first.report.class_names;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["variant".to_string(), "labeled_ratio".into(), "seed".into()];
    header.extend(names.iter().map(|n| format!("iou_{n}")));
    header.push("miou".into());
    header.extend(names.iter().map(|n| format!("iou_{n}_std")));
    header.push("miou_std".into());
    w.write_record(&header).map_err(|e| Error::Invalid(e.to_string()))?;
    for r in rows {
        if &r.report.class_names != names {
            return Err(Error::Invalid("report rows with different class sets".into()));
        }
        let mut rec = vec![
            r.variant.clone(),
            format!("{}", r.labeled_ratio),
            r.seed.map(|s| s.to_string()).unwrap_or_else(|| "aggregate".into()),
        ];
        rec.extend(r.report.iou.iter().map(|&v| cell(v)));
        rec.push(cell(r.report.miou));
        rec.extend(r.report.iou_std.iter().map(|&v| cell(v)));
        rec.push(cell(r.report.miou_std));
        w.write_record(&rec).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Invalid(e.to_string()))
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    write_atomic(path, &report_csv(rows)?)
}
