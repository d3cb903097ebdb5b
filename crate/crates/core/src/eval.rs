//! Accuracy over seen classes, confusion matrices, last-group prediction
//! bias and forgetting.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::parallel::Exec;

fn predictions<F>(predict: &F, test: &Dataset, exec: Exec) -> Result<Vec<usize>>
where
    F: Fn(&LabeledExample) -> Result<usize> + Sync,
{
    exec.map(test.examples(), predict).into_iter().collect()
}

/// Fraction of `test` examples whose prediction equals the label.
pub fn evaluate<F>(predict: F, test: &Dataset) -> Result<f64>
where
    F: Fn(&LabeledExample) -> Result<usize> + Sync,
{
    evaluate_with(predict, test, Exec::default())
}

pub fn evaluate_with<F>(predict: F, test: &Dataset, exec: Exec) -> Result<f64>
where
    F: Fn(&LabeledExample) -> Result<usize> + Sync,
{
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let correct = predictions(&predict, test, exec)?
        .iter()
        .zip(test.examples())
        .filter(|(p, e)| **p == e.label)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// `counts[t][p]`: examples of true class `classes[t]` predicted as `classes[p]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<usize>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn index_of(&self, class: usize) -> Option<usize> {
        self.classes.binary_search(&class).ok()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, class: usize) -> usize {
        self.index_of(class).map_or(0, |i| self.counts[i].iter().sum())
    }
}

/// Confusion counts over the union of true and predicted classes, sorted.
pub fn confusion_matrix<F>(predict: F, test: &Dataset) -> Result<ConfusionMatrix>
where
    F: Fn(&LabeledExample) -> Result<usize> + Sync,
{
    let preds = predictions(&predict, test, Exec::default())?;
    let classes: Vec<usize> = test
        .class_set()
        .iter()
        .copied()
        .chain(preds.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut cm = ConfusionMatrix {
        counts: vec![vec![0; classes.len()]; classes.len()],
        classes,
    };
    for (p, e) in preds.iter().zip(test.examples()) {
        let (t, p) = (cm.index_of(e.label).expect("label listed"), cm.index_of(*p).expect("prediction listed"));
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

/// Share of old-class test examples (true class outside `last_group`)
/// predicted into `last_group`.
pub fn last_group_bias(cm: &ConfusionMatrix, last_group: &BTreeSet<usize>) -> Result<f64> {
    let (mut old, mut into_last) = (0, 0);
    for (t, row) in cm.classes.iter().zip(&cm.counts) {
        if last_group.contains(t) {
            continue;
        }
        for (p, n) in cm.classes.iter().zip(row) {
            old += n;
            if last_group.contains(p) {
                into_last += n;
            }
        }
    }
    if old == 0 {
        return Err(Error::Empty("old-class test examples"));
    }
    Ok(into_last as f64 / old as f64)
}

/// `acc[i][j]`: accuracy on session `j`'s test classes after session `i`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub acc: Vec<Vec<f64>>,
    pub seen_accuracy: Vec<f64>,
    /// Test examples per session, the weights behind `seen_accuracy`.
    pub test_counts: Vec<usize>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sessions(&self) -> usize {
        self.acc.len()
    }

    /// Appends row `i` by evaluating on the test sets of sessions `0..=i`.
    pub fn record<F>(&mut self, predict: F, tests: &[&Dataset]) -> Result<()>
    where
        F: Fn(&LabeledExample) -> Result<usize> + Sync,
    {
        let i = self.acc.len();
        if tests.len() != i + 1 {
            return Err(Error::InvalidArgument(format!(
                "row {i} needs {} test sets, got {}",
                i + 1,
                tests.len()
            )));
        }
        let (mut correct, mut total) = (0usize, 0usize);
        let mut row = Vec::with_capacity(tests.len());
        for test in tests {
            if test.is_empty() {
                return Err(Error::Empty("session test set"));
            }
            let preds = predictions(&predict, test, Exec::default())?;
            let c = preds.iter().zip(test.examples()).filter(|(p, e)| **p == e.label).count();
            row.push(c as f64 / test.len() as f64);
            correct += c;
            total += test.len();
        }
        self.test_counts = tests.iter().map(|t| t.len()).collect();
        self.acc.push(row);
        self.seen_accuracy.push(correct as f64 / total as f64);
        Ok(())
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.seen_accuracy.last().copied()
    }
}

/// Per session `j`: best accuracy ever reached on it minus final accuracy.
pub fn forgetting(m: &AccuracyMatrix) -> Vec<f64> {
    let Some(last) = m.acc.last() else {
        return Vec::new();
    };
    (0..last.len())
        .map(|j| {
            let best = m.acc[j..].iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max);
            best - last[j]
        })
        .collect()
}

/// Per-class test counts, handy for sanity checks on balanced sets.
pub fn class_histogram(test: &Dataset) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for e in test.examples() {
        *h.entry(e.label).or_insert(0) += 1;
    }
    h
}
