//! Regression metrics, the 7x7 category confusion matrix and the gating
//! classification report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetIndex;
use crate::error::{Error, Result};
use crate::models::{categorize, SaffirSimpsonCategory};
use crate::predict::SpeedPredictor;

fn check(yhat: &[f64], y: &[f64], min: usize) -> Result<()> {
    if yhat.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction and truth lengths differ: {} vs {}",
            yhat.len(),
            y.len()
        )));
    }
    if y.len() < min {
        return Err(Error::InvalidArgument(format!("metric needs at least {min} samples, got {}", y.len())));
    }
    Ok(())
}

pub fn rmse(yhat: &[f64], y: &[f64]) -> Result<f64> {
    check(yhat, y, 1)?;
    let sq: f64 = yhat.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sq / y.len() as f64).sqrt())
}

pub fn mae(yhat: &[f64], y: &[f64]) -> Result<f64> {
    check(yhat, y, 1)?;
    let abs: f64 = yhat.iter().zip(y).map(|(a, b)| (a - b).abs()).sum();
    Ok(abs / y.len() as f64)
}

/// Mean signed error `mean(yhat - y)`; positive means overestimation.
pub fn bias(yhat: &[f64], y: &[f64]) -> Result<f64> {
    check(yhat, y, 1)?;
    let sum: f64 = yhat.iter().zip(y).map(|(a, b)| a - b).sum();
    Ok(sum / y.len() as f64)
}

/// `sqrt(sum (yhat - y)^2 / (N - 1)) / mean(yhat)`.
pub fn relative_rmse(yhat: &[f64], y: &[f64]) -> Result<f64> {
    check(yhat, y, 2)?;
    let n = y.len() as f64;
    let mean_pred = yhat.iter().sum::<f64>() / n;
    if mean_pred == 0.0 {
        return Err(Error::InvalidArgument("relative_rmse undefined for zero mean prediction".into()));
    }
    let sq: f64 = yhat.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sq / (n - 1.0)).sqrt() / mean_pred)
}

/// Counts indexed `[true category][predicted category]`, TD first.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion(pub [[u64; 7]; 7]);

impl Confusion {
    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn true_count(&self, c: SaffirSimpsonCategory) -> u64 {
        self.0[c as usize].iter().sum()
    }

    pub fn predicted_count(&self, c: SaffirSimpsonCategory) -> u64 {
        self.0.iter().map(|row| row[c as usize]).sum()
    }

    pub fn get(&self, truth: SaffirSimpsonCategory, pred: SaffirSimpsonCategory) -> u64 {
        self.0[truth as usize][pred as usize]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub category: SaffirSimpsonCategory,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Macro averages over the categories present in the truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassScores>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion_and_report(yhat: &[f64], y: &[f64]) -> Result<(Confusion, ClassReport)> {
    check(yhat, y, 0)?;
    let mut m = Confusion::default();
    for (&p, &t) in yhat.iter().zip(y) {
        m.0[categorize(t)? as usize][categorize(p)? as usize] += 1;
    }
    let mut per_class = Vec::new();
    for c in SaffirSimpsonCategory::ALL {
        let support = m.true_count(c);
        if support == 0 {
            continue;
        }
        let tp = m.get(c, c);
        let precision = ratio(tp, m.predicted_count(c));
        let recall = ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassScores {
            category: c,
            precision,
            recall,
            f1,
            support,
        });
    }
    let k = per_class.len().max(1) as f64;
    let report = ClassReport {
        precision: per_class.iter().map(|s| s.precision).sum::<f64>() / k,
        recall: per_class.iter().map(|s| s.recall).sum::<f64>() / k,
        f1: per_class.iter().map(|s| s.f1).sum::<f64>() / k,
        per_class,
    };
    Ok((m, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub rmse: f64,
    pub mae: f64,
    pub bias: f64,
    /// Absent for fewer than two samples.
    pub relative_rmse: Option<f64>,
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassScores>,
    /// Free-form description of the evaluated model, e.g. `ensemble`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub members: Option<usize>,
}

impl EvalReport {
    /// All metrics from one prediction vector.
    pub fn from_predictions(yhat: &[f64], y: &[f64]) -> Result<Self> {
        let (confusion, report) = confusion_and_report(yhat, y)?;
        Ok(EvalReport {
            n: y.len(),
            rmse: rmse(yhat, y)?,
            mae: mae(yhat, y)?,
            bias: bias(yhat, y)?,
            relative_rmse: if y.len() >= 2 { Some(relative_rmse(yhat, y)?) } else { None },
            confusion,
            precision: report.precision,
            recall: report.recall,
            f1: report.f1,
            per_class: report.per_class,
            model_kind: None,
            members: None,
        })
    }

    /// Plain-text table: the four regression rows, then the gating report and
    /// the confusion matrix.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let title = self.model_kind.as_deref().unwrap_or("model");
        let _ = writeln!(s, "{:<16}{:>12}", "Metric", title);
        let _ = writeln!(s, "{:<16}{:>12.2}", "RMSE", self.rmse);
        let _ = writeln!(s, "{:<16}{:>12.2}", "MAE", self.mae);
        let _ = writeln!(s, "{:<16}{:>12.2}", "Bias", self.bias);
        match self.relative_rmse {
            Some(r) => {
                let _ = writeln!(s, "{:<16}{:>12.2}", "Relative RMSE", r);
            }
            None => {
                let _ = writeln!(s, "{:<16}{:>12}", "Relative RMSE", "n/a");
            }
        }
        let _ = writeln!(s, "\nsamples {}", self.n);
        if let Some(m) = self.members {
            let _ = writeln!(s, "members {m}");
        }
        let _ = writeln!(
            s,
            "category precision {:.2}  recall {:.2}  f1 {:.2}  (macro over {} categories)",
            self.precision,
            self.recall,
            self.f1,
            self.per_class.len()
        );
        let _ = write!(s, "\n{:>6}", "true");
        for c in SaffirSimpsonCategory::ALL {
            let _ = write!(s, "{:>7}", c.name());
        }
        s.push('\n');
        for (i, c) in SaffirSimpsonCategory::ALL.into_iter().enumerate() {
            let _ = write!(s, "{:>6}", c.name());
            for v in self.confusion.0[i] {
                let _ = write!(s, "{v:>7}");
            }
            s.push('\n');
        }
        s
    }
}

/// Predicts every sample of `dataset` once and scores the result. Returns the
/// report and the predictions in sample order.
pub fn evaluate<P: SpeedPredictor + ?Sized>(predictor: &P, dataset: &DatasetIndex) -> Result<(EvalReport, Vec<f32>)> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let images: Vec<_> = dataset.samples().iter().map(|s| s.image.as_ref()).collect();
    let preds = predictor.predict_speeds(&images)?;
    if preds.len() != images.len() {
        return Err(Error::InvalidArgument(format!(
            "predictor returned {} speeds for {} images",
            preds.len(),
            images.len()
        )));
    }
    if let Some(bad) = preds.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
        return Err(Error::Data(format!("predictor produced invalid speed {bad}")));
    }
    let yhat: Vec<f64> = preds.iter().map(|&p| p as f64).collect();
    let y: Vec<f64> = dataset.wind_speeds().iter().map(|&v| v as f64).collect();
    Ok((EvalReport::from_predictions(&yhat, &y)?, preds))
}
