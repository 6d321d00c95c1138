//! Per-epoch records and the last-E-epoch reporting convention.

use std::io::{self, Write};

use crate::tensor::Tensor;

/// One student's metrics after one epoch. `epoch` is 1-based; accuracy is in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub student: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy in percent of row scores against labels.
pub fn top1_accuracy(scores: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = scores.rows().zip(labels).filter(|(row, &y)| argmax(row) == y).count();
    100.0 * correct as f64 / labels.len() as f64
}

/// Mean test accuracy of `student` over its final `window` epochs.
pub fn last_window_accuracy(records: &[EpochRecord], student: usize, window: usize) -> Option<f64> {
    let mut accs: Vec<(usize, f64)> = records
        .iter()
        .filter(|r| r.student == student)
        .map(|r| (r.epoch, r.test_acc))
        .collect();
    if window == 0 || accs.len() < window {
        return None;
    }
    accs.sort_by_key(|(e, _)| *e);
    let tail = &accs[accs.len() - window..];
    Some(tail.iter().map(|(_, a)| a).sum::<f64>() / window as f64)
}

/// Final-epoch record of `student`.
pub fn final_record(records: &[EpochRecord], student: usize) -> Option<&EpochRecord> {
    records.iter().filter(|r| r.student == student).max_by_key(|r| r.epoch)
}

/// Sample mean and (n - 1) standard deviation; the deviation is 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Tab-separated epoch log: `epoch student train_loss test_loss test_acc`.
pub fn write_epoch_log<W: Write>(records: &[EpochRecord], mut out: W) -> io::Result<()> {
    writeln!(out, "epoch\tstudent\ttrain_loss\ttest_loss\ttest_acc")?;
    for r in records {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.epoch, r.student, r.train_loss, r.test_loss, r.test_acc
        )?;
    }
    Ok(())
}

/// Parses a log written by [`write_epoch_log`].
pub fn parse_epoch_log(text: &str) -> Option<Vec<EpochRecord>> {
    let mut lines = text.lines();
    lines.next()?;
    lines
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            let [epoch, student, train_loss, test_loss, test_acc] = f[..] else {
                return None;
            };
            Some(EpochRecord {
                epoch: epoch.parse().ok()?,
                student: student.parse().ok()?,
                train_loss: train_loss.parse().ok()?,
                test_loss: test_loss.parse().ok()?,
                test_acc: test_acc.parse().ok()?,
            })
        })
        .collect()
}
