use serde::{Deserialize, Serialize};

use super::EpochRecord;
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::model::Model;

const PREDICT_CHUNK: usize = 128;

/// Rows are true classes, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; class_count]; class_count],
        }
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.correct() as f64 / n as f64,
        }
    }

    /// CSV with a header row of predicted classes and one row per true class.
    pub fn to_csv(&self) -> String {
        let c = self.counts.len();
        let mut s = String::from("true");
        for j in 0..c {
            s.push_str(&format!(",pred_{j}"));
        }
        s.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            s.push_str(&i.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Accuracy on one target domain's test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub domain_id: String,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Everything a training run produces besides the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub epochs_run: usize,
    pub evaluations: Vec<Evaluation>,
    pub trace: Vec<EpochRecord>,
}

impl EvalReport {
    /// One JSON object per epoch.
    pub fn trace_jsonl(&self) -> String {
        let mut s = String::new();
        for rec in &self.trace {
            s.push_str(&serde_json::to_string(rec).expect("records serialize"));
            s.push('\n');
        }
        s
    }
}

/// Predicts every row of `ds` and tallies the confusion matrix.
pub fn evaluate(model: &Model, ds: &DomainDataset) -> Result<Evaluation> {
    let labels = ds.labels.as_ref().ok_or_else(|| {
        Error::Config(format!("domain '{}' has no labels to evaluate", ds.domain_id))
    })?;
    if ds.class_count != model.config().num_classes {
        return Err(Error::Config(format!(
            "domain '{}' has {} classes, model predicts {}",
            ds.domain_id,
            ds.class_count,
            model.config().num_classes
        )));
    }
    let preds = model.predict(&ds.features, PREDICT_CHUNK)?;
    let mut confusion = ConfusionMatrix::new(ds.class_count);
    for (&t, &p) in labels.iter().zip(&preds) {
        confusion.record(t, p);
    }
    Ok(Evaluation {
        domain_id: ds.domain_id.clone(),
        accuracy: confusion.accuracy(),
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_counts() {
        let mut m = ConfusionMatrix::new(3);
        for (t, p) in [(0, 0), (1, 2), (2, 2), (2, 2)] {
            m.record(t, p);
        }
        assert_eq!(m.total(), 4);
        assert_eq!(m.correct(), 3);
        assert_eq!(m.accuracy(), 0.75);
        assert_eq!(
            m.to_csv(),
            "true,pred_0,pred_1,pred_2\n0,1,0,0\n1,0,0,1\n2,0,0,2\n"
        );
    }
}
