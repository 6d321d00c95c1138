//! The `train`, `sweep` and `divcurve` commands and the artifacts they write.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rdml::divergence::write_curve;
use rdml::metrics::{final_record, last_window_accuracy, mean_std, write_epoch_log};
use rdml::trainer::init_cohort;
use rdml::{divergence_curve, load_delimited, make_blobs, train, Dataset, EpochRecord, FixedSide, Schema};

use crate::config::{DatasetSpec, ExperimentConfig};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}

pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let (data, standardize) = match spec {
        DatasetSpec::Blobs {
            n,
            dim,
            classes,
            spread,
            seed,
            standardize,
        } => (make_blobs(*n, *dim, *classes, *spread, *seed)?, *standardize),
        DatasetSpec::File {
            path,
            label_column,
            classes,
            test_fraction,
            split_seed,
            standardize,
        } => {
            let schema = Schema {
                label_column: (!label_column.is_empty()).then(|| label_column.clone()),
                classes: (*classes > 0).then_some(*classes),
                test_fraction: *test_fraction,
                split_seed: *split_seed,
            };
            let data = load_delimited(path, &schema).with_context(|| format!("loading {}", path.display()))?;
            (data, *standardize)
        }
    };
    Ok(if standardize { data.standardized() } else { data })
}

fn layer_sizes(config: &ExperimentConfig, data: &Dataset) -> Vec<usize> {
    let mut sizes = vec![data.dim()];
    sizes.extend(&config.model.hidden);
    sizes.push(data.classes());
    sizes
}

/// Outcome of a single (alpha, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub method: &'static str,
    pub alpha: Option<f64>,
    pub seed: u64,
    /// Last-window mean accuracy per student, in student order.
    pub accuracy: Vec<f64>,
    /// Final-epoch test loss per student.
    pub final_test_loss: Vec<f64>,
    pub records: Vec<EpochRecord>,
}

impl RunSummary {
    pub fn mean_accuracy(&self) -> f64 {
        self.accuracy.iter().sum::<f64>() / self.accuracy.len() as f64
    }

    pub fn mean_final_test_loss(&self) -> f64 {
        self.final_test_loss.iter().sum::<f64>() / self.final_test_loss.len() as f64
    }
}

fn alpha_label(alpha: Option<f64>) -> String {
    alpha.map_or("-".to_string(), |a| a.to_string())
}

/// Per-student summary table; a `mean` row closes the table.
pub fn format_summary(run: &RunSummary) -> String {
    let mut out = String::from("method\talpha\tseed\tstudent\ttest_acc\tfinal_test_loss\n");
    let alpha = alpha_label(run.alpha);
    for (k, (acc, loss)) in run.accuracy.iter().zip(&run.final_test_loss).enumerate() {
        let _ = writeln!(out, "{}\t{alpha}\t{}\t{k}\t{acc:.2}\t{loss:.6}", run.method, run.seed);
    }
    let _ = writeln!(
        out,
        "{}\t{alpha}\t{}\tmean\t{:.2}\t{:.6}",
        run.method,
        run.seed,
        run.mean_accuracy(),
        run.mean_final_test_loss()
    );
    out
}

/// Trains one cohort and writes `epochs.tsv`, `summary.tsv` and
/// `checkpoints/student_<k>.ckpt` under `out_dir`.
pub fn run_train(config: &ExperimentConfig, data: &Dataset, out_dir: &Path) -> Result<RunSummary> {
    let tc = config.train_config()?;
    let mut models = init_cohort(&layer_sizes(config, data), &tc)?;
    let records = train(&mut models, data, &tc)?;
    let window = config.experiment.report_window;
    let accuracy = (0..tc.students)
        .map(|k| last_window_accuracy(&records, k, window).context("report window exceeds the epoch log"))
        .collect::<Result<Vec<_>>>()?;
    let final_test_loss = (0..tc.students)
        .map(|k| {
            final_record(&records, k)
                .map(|r| r.test_loss)
                .context("empty epoch log")
        })
        .collect::<Result<Vec<_>>>()?;
    let independent = tc.students == 1;
    let run = RunSummary {
        method: if independent { "independent" } else { "rdml" },
        alpha: (!independent).then_some(tc.alpha),
        seed: tc.seed,
        accuracy,
        final_test_loss,
        records,
    };

    let mut log = Vec::new();
    write_epoch_log(&run.records, &mut log)?;
    write_atomic(&out_dir.join("epochs.tsv"), &log)?;
    write_atomic(&out_dir.join("summary.tsv"), format_summary(&run).as_bytes())?;
    for (k, model) in models.iter().enumerate() {
        let mut buf = Vec::new();
        model.save(&mut buf)?;
        write_atomic(&out_dir.join("checkpoints").join(format!("student_{k}.ckpt")), &buf)?;
    }
    Ok(run)
}

/// One row group of the sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub method: &'static str,
    pub alpha: Option<f64>,
    /// Mean and std across seeds of the rank-sorted student accuracies, lowest first.
    pub ranked: Vec<(f64, f64)>,
    /// Mean and std across seeds of the cohort-mean accuracy.
    pub mean: (f64, f64),
    pub runs: Vec<RunSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    /// The independent baseline first, then the alpha grid in order.
    pub entries: Vec<SweepEntry>,
    /// Index into `entries` of the alpha with the highest mean accuracy.
    pub best: usize,
}

impl SweepReport {
    pub fn baseline(&self) -> &SweepEntry {
        &self.entries[0]
    }

    pub fn best_entry(&self) -> &SweepEntry {
        &self.entries[self.best]
    }
}

fn summarize(method: &'static str, alpha: Option<f64>, runs: Vec<RunSummary>) -> SweepEntry {
    let k = runs[0].accuracy.len();
    let sorted: Vec<Vec<f64>> = runs
        .iter()
        .map(|r| {
            let mut a = r.accuracy.clone();
            a.sort_by(f64::total_cmp);
            a
        })
        .collect();
    let ranked = (0..k)
        .map(|i| mean_std(&sorted.iter().map(|s| s[i]).collect::<Vec<_>>()))
        .collect();
    let mean = mean_std(&runs.iter().map(RunSummary::mean_accuracy).collect::<Vec<_>>());
    SweepEntry {
        method,
        alpha,
        ranked,
        mean,
        runs,
    }
}

/// `method alpha model mean std best`; `model` is the ascending rank or `mean`.
pub fn format_sweep(report: &SweepReport) -> String {
    let mut out = String::from("method\talpha\tmodel\tmean\tstd\tbest\n");
    for (i, e) in report.entries.iter().enumerate() {
        let alpha = alpha_label(e.alpha);
        for (rank, (m, s)) in e.ranked.iter().enumerate() {
            let _ = writeln!(out, "{}\t{alpha}\t{}\t{m:.2}\t{s:.2}\t", e.method, rank + 1);
        }
        let flag = if i == report.best { "*" } else { "" };
        let _ = writeln!(
            out,
            "{}\t{alpha}\tmean\t{:.2}\t{:.2}\t{flag}",
            e.method, e.mean.0, e.mean.1
        );
    }
    out
}

/// Every run's per-student outcome, for paired comparisons.
pub fn format_sweep_runs(report: &SweepReport) -> String {
    let mut out = String::from("method\talpha\tseed\tstudent\ttest_acc\tfinal_test_loss\n");
    for e in &report.entries {
        for r in &e.runs {
            for (k, (acc, loss)) in r.accuracy.iter().zip(&r.final_test_loss).enumerate() {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{k}\t{acc:.2}\t{loss:.6}",
                    e.method,
                    alpha_label(e.alpha),
                    r.seed
                );
            }
        }
    }
    out
}

fn run_dir(out_dir: &Path, alpha: Option<f64>, seed: u64) -> PathBuf {
    let name = match alpha {
        None => format!("independent_seed{seed}"),
        Some(a) => format!("alpha{a}_seed{seed}"),
    };
    out_dir.join("runs").join(name)
}

/// The independent baseline and every alpha in the grid, over the same seeds.
///
/// Writes each run under `runs/`, then `sweep.tsv` and `sweep_runs.tsv`.
pub fn run_sweep(config: &ExperimentConfig, data: &Dataset, out_dir: &Path) -> Result<SweepReport> {
    let mut grid: Vec<Option<f64>> = vec![None];
    grid.extend(config.experiment.alphas.iter().map(|&a| Some(a)));
    let mut entries = Vec::with_capacity(grid.len());
    for alpha in grid {
        let mut runs = Vec::with_capacity(config.experiment.seeds.len());
        for &seed in &config.experiment.seeds {
            let mut c = config.clone();
            c.train.seed = seed;
            match alpha {
                None => c.train.students = 1,
                Some(a) => c.train.alpha = a,
            }
            let run = run_train(&c, data, &run_dir(out_dir, alpha, seed))
                .with_context(|| format!("run alpha={} seed={seed} failed", alpha_label(alpha)))?;
            runs.push(run);
        }
        let method = if alpha.is_none() { "independent" } else { "rdml" };
        entries.push(summarize(method, alpha, runs));
    }
    let best = (1..entries.len())
        .reduce(|best, i| {
            if entries[i].mean.0 > entries[best].mean.0 {
                i
            } else {
                best
            }
        })
        .unwrap_or(0);
    let report = SweepReport { entries, best };
    write_atomic(&out_dir.join("sweep.tsv"), format_sweep(&report).as_bytes())?;
    write_atomic(&out_dir.join("sweep_runs.tsv"), format_sweep_runs(&report).as_bytes())?;
    Ok(report)
}

/// Writes the two-event divergence table to `path`.
pub fn run_divcurve(fixed: FixedSide, a: f64, alphas: &[f64], grid: usize, path: &Path) -> Result<Vec<rdml::CurveRow>> {
    let rows = divergence_curve(fixed, a, alphas, grid)?;
    let mut buf = Vec::new();
    write_curve(&rows, &mut buf)?;
    write_atomic(path, &buf)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EXAMPLE;
    use rdml::metrics::parse_epoch_log;

    fn setup() -> (ExperimentConfig, Dataset, tempfile::TempDir) {
        let config = ExperimentConfig::parse(EXAMPLE).unwrap();
        let data = build_dataset(&config.dataset).unwrap();
        (config, data, tempfile::tempdir().unwrap())
    }

    #[test]
    fn summary_is_recomputable_from_the_log() {
        let (config, data, dir) = setup();
        let run = run_train(&config, &data, dir.path()).unwrap();
        let log = parse_epoch_log(&fs::read_to_string(dir.path().join("epochs.tsv")).unwrap()).unwrap();
        assert_eq!(log, run.records);
        for k in 0..2 {
            let accs: Vec<f64> = log
                .iter()
                .filter(|r| r.student == k && r.epoch > 2)
                .map(|r| r.test_acc)
                .collect();
            assert_eq!(accs.iter().sum::<f64>() / 2.0, run.accuracy[k]);
        }
        assert!(dir.path().join("checkpoints/student_1.ckpt").exists());
        let summary = fs::read_to_string(dir.path().join("summary.tsv")).unwrap();
        assert!(summary.lines().nth(1).unwrap().starts_with("rdml\t1.5\t0\t0\t"));
    }

    #[test]
    fn window_of_one_is_the_final_accuracy() {
        let (mut config, data, dir) = setup();
        config.experiment.report_window = 1;
        let run = run_train(&config, &data, dir.path()).unwrap();
        for k in 0..2 {
            assert_eq!(run.accuracy[k], final_record(&run.records, k).unwrap().test_acc);
        }
    }

    #[test]
    fn single_student_is_labelled_independent() {
        let (mut config, data, dir) = setup();
        config.train.students = 1;
        run_train(&config, &data, dir.path()).unwrap();
        let summary = fs::read_to_string(dir.path().join("summary.tsv")).unwrap();
        assert!(summary.lines().skip(1).all(|l| l.starts_with("independent\t-\t")));
    }

    #[test]
    fn checkpoints_reload_to_the_trained_models() {
        let (config, data, dir) = setup();
        run_train(&config, &data, dir.path()).unwrap();
        let tc = config.train_config().unwrap();
        let mut models = init_cohort(&layer_sizes(&config, &data), &tc).unwrap();
        train(&mut models, &data, &tc).unwrap();
        let loaded = rdml::StudentModel::load_from_path(&dir.path().join("checkpoints/student_0.ckpt")).unwrap();
        assert_eq!(loaded, models[0]);
    }

    #[test]
    fn sweep_flags_the_column_maximum() {
        let (config, data, dir) = setup();
        let report = run_sweep(&config, &data, dir.path()).unwrap();
        assert_eq!(report.entries.len(), 3);
        assert_eq!(report.baseline().method, "independent");
        let best = report.best_entry().mean.0;
        assert!(report.entries[1..].iter().all(|e| e.mean.0 <= best));
        for e in &report.entries {
            assert!(e.ranked.windows(2).all(|w| w[0].0 <= w[1].0));
        }
        let table = fs::read_to_string(dir.path().join("sweep.tsv")).unwrap();
        let flagged: Vec<&str> = table.lines().filter(|l| l.ends_with('*')).collect();
        assert_eq!(flagged.len(), 1);
        assert!(dir.path().join("runs/alpha0.5_seed1/epochs.tsv").exists());
    }

    #[test]
    fn single_cell_sweep_reduces_to_train() {
        let (mut config, data, dir) = setup();
        config.apply_overrides(Some(0), Some(1.5)).unwrap();
        let report = run_sweep(&config, &data, dir.path()).unwrap();
        let direct = run_train(&config, &data, &dir.path().join("direct")).unwrap();
        let cell = &report.entries[1];
        assert_eq!(cell.runs[0], direct);
        let mut sorted = direct.accuracy.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(cell.ranked.iter().map(|r| r.0).collect::<Vec<_>>(), sorted);
        assert_eq!(cell.mean.0, direct.mean_accuracy());
    }

    #[test]
    fn failing_run_names_alpha_and_seed() {
        let (mut config, data, dir) = setup();
        config.train.lr = 1e300;
        config.train.clip_max_norm = 0.0;
        config.experiment.alphas = vec![2.0];
        let err = format!("{:#}", run_sweep(&config, &data, dir.path()).unwrap_err());
        assert!(err.contains("alpha=") && err.contains("seed="), "{err}");
    }
}
