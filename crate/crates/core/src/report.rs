//! CSV tables: per-epoch training logs, patchwise metric summaries, raw
//! per-patch points, precision-recall curves and correlation matrices.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::defect::PRResult;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, correlate, CorrelationTable, MetricReport, PatchMetric};
use crate::raster::{PatchRegion, RasterImage};
use crate::train::EpochScores;

/// One model's summary for one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub model: String,
    pub loss: String,
    pub epoch: Option<usize>,
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    pub n_patches: usize,
}

impl EvalRow {
    fn model_key(&self) -> (String, String, String, Option<usize>) {
        (self.dataset.clone(), self.model.clone(), self.loss.clone(), self.epoch)
    }
}

/// One patch's value, kept for distribution plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRow {
    pub dataset: String,
    pub model: String,
    pub metric: String,
    pub patch: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_l2: f64,
    pub val_loss: f64,
    pub val_ce: Option<f64>,
    pub best: bool,
}

impl EpochRow {
    pub fn new(s: &EpochScores, best: bool) -> Self {
        EpochRow {
            epoch: s.epoch,
            lr: s.lr,
            train_loss: s.train_loss,
            val_l2: s.val_l2,
            val_loss: s.val_loss,
            val_ce: s.val_ce,
            best,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrRow {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(|e| csv_err(path, e)))
        .collect()
}

pub fn pr_rows(pr: &PRResult) -> Vec<PrRow> {
    pr.thresholds
        .iter()
        .zip(&pr.precision)
        .zip(&pr.recall)
        .map(|((&threshold, &precision), &recall)| PrRow {
            threshold,
            precision,
            recall,
        })
        .collect()
}

/// Scores a simulation patch by patch against the photo.
pub fn evaluate_regions(
    simulation: &RasterImage,
    photo: &RasterImage,
    regions: &[PatchRegion],
    metrics: &[PatchMetric],
) -> Result<Vec<MetricReport>> {
    if regions.is_empty() {
        return Err(Error::Empty("no patches to evaluate".into()));
    }
    metrics
        .iter()
        .map(|&m| {
            let values = regions
                .iter()
                .map(|r| m.evaluate(&simulation.extract(r)?, &photo.extract(r)?))
                .collect::<Result<Vec<_>>>()?;
            Ok(aggregate(m.name(), values, m.direction()))
        })
        .collect()
}

/// Labels shared by every row describing one evaluated model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTag {
    pub dataset: String,
    pub model: String,
    pub loss: String,
    pub epoch: Option<usize>,
}

impl ModelTag {
    pub fn rows(&self, reports: &[MetricReport]) -> Vec<EvalRow> {
        reports
            .iter()
            .map(|r| EvalRow {
                dataset: self.dataset.clone(),
                model: self.model.clone(),
                loss: self.loss.clone(),
                epoch: self.epoch,
                metric: r.metric.clone(),
                mean: r.mean,
                sd: r.sd,
                n_patches: r.values.len(),
            })
            .collect()
    }

    pub fn points(&self, reports: &[MetricReport]) -> Vec<PointRow> {
        reports
            .iter()
            .flat_map(|r| {
                r.values.iter().enumerate().map(|(patch, &value)| PointRow {
                    dataset: self.dataset.clone(),
                    model: self.model.clone(),
                    metric: r.metric.clone(),
                    patch,
                    value,
                })
            })
            .collect()
    }
}

/// Correlates metric means across the models in `rows`. Only metrics reported
/// for every model take part.
pub fn correlation_from_rows(rows: &[EvalRow]) -> Result<CorrelationTable> {
    if rows.is_empty() {
        return Err(Error::Empty("no evaluations found".into()));
    }
    let mut table: BTreeMap<String, BTreeMap<_, f64>> = BTreeMap::new();
    let mut models = Vec::new();
    for r in rows {
        let key = r.model_key();
        if !models.contains(&key) {
            models.push(key.clone());
        }
        table.entry(r.metric.clone()).or_default().insert(key, r.mean);
    }
    let mut names = Vec::new();
    let mut columns = Vec::new();
    for (metric, by_model) in table {
        if models.iter().all(|m| by_model.contains_key(m)) {
            columns.push(models.iter().map(|m| by_model[m]).collect());
            names.push(metric);
        }
    }
    correlate(&names, &columns)
}

/// Square matrix with a leading `metric` column.
pub fn write_matrix(path: &Path, names: &[String], matrix: &[Vec<f64>]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let header: Vec<&str> = std::iter::once("metric").chain(names.iter().map(String::as_str)).collect();
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (name, row) in names.iter().zip(matrix) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str, metric: &str, mean: f64) -> EvalRow {
        EvalRow {
            dataset: "s1".into(),
            model: model.into(),
            loss: "-".into(),
            epoch: None,
            metric: metric.into(),
            mean,
            sd: 0.0,
            n_patches: 4,
        }
    }

    #[test]
    fn eval_rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.csv");
        let mut rows = vec![row("tree", "l2", 0.007), row("unet", "l2", 0.004)];
        rows[1].epoch = Some(7);
        write_rows(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("dataset,model,loss,epoch,metric,mean,sd,n_patches\n"));
        assert_eq!(read_rows::<EvalRow>(&path).unwrap(), rows);
    }

    #[test]
    fn two_models_two_metrics() {
        let rows = vec![
            row("tree", "l2", 0.007),
            row("tree", "ssim", 0.8),
            row("unet", "l2", 0.004),
            row("unet", "ssim", 0.9),
        ];
        let t = correlation_from_rows(&rows).unwrap();
        assert_eq!(t.metrics, vec!["l2", "ssim"]);
        assert_eq!(t.pearson[0][0], 1.0);
        assert!((t.pearson[0][1] + 1.0).abs() < 1e-12);
        assert!((t.spearman[1][0] + 1.0).abs() < 1e-12);
        assert!(correlation_from_rows(&[]).is_err());
    }

    #[test]
    fn region_evaluation() {
        let a = RasterImage::filled(8, 8, [0.5; 3]);
        let mut b = a.clone();
        b.set_pixel(0, 0, [0.9, 0.5, 0.5]);
        let regions = [PatchRegion::new(0, 0, 4, 4), PatchRegion::new(4, 4, 4, 4)];
        let reps = evaluate_regions(&b, &a, &regions, &[PatchMetric::L2, PatchMetric::L1]).unwrap();
        assert!((reps[0].values[0] - 0.16 / 48.0).abs() < 1e-15);
        assert_eq!(reps[0].values[1], 0.0);
        let tag = ModelTag {
            dataset: "d".into(),
            model: "m".into(),
            loss: "l2".into(),
            epoch: Some(1),
        };
        assert_eq!(tag.rows(&reps).len(), 2);
        assert_eq!(tag.points(&reps).len(), 4);
    }
}
