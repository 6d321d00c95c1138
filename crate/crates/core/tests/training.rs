//! End-to-end behaviour of the cohort trainer and the dataset layer.

use std::collections::BTreeSet;

use rdml::data::SplitKind;
use rdml::divergence::DivergenceSpec;
use rdml::metrics::final_record;
use rdml::trainer::{epoch_seed, evaluate, init_cohort, student_seed};
use rdml::{
    batches, dml_loss, load_delimited, make_blobs, train, train_step, Dataset, LossConfig, OptimizerState, Schema,
    StudentModel, Tape, TrainConfig, UpdateMode,
};

fn blobs() -> Dataset {
    make_blobs(300, 4, 3, 1.0, 5).unwrap().standardized()
}

fn quick(alpha: f64, students: usize, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::new(alpha, 4, seed);
    c.students = students;
    c.batch_size = 32;
    c.lr_decay_epochs = vec![2];
    c
}

fn run(data: &Dataset, config: &TrainConfig, hidden: usize) -> (Vec<StudentModel>, Vec<rdml::EpochRecord>) {
    let mut models = init_cohort(&[data.dim(), hidden, data.classes()], config).unwrap();
    let recs = train(&mut models, data, config).unwrap();
    (models, recs)
}

#[test]
fn same_seed_gives_bitwise_identical_records() {
    let data = blobs();
    let config = quick(1.5, 3, 9);
    let (ma, a) = run(&data, &config, 8);
    let (mb, b) = run(&data, &config, 8);
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    let (_, c) = run(&data, &quick(1.5, 3, 10), 8);
    assert_ne!(a, c);
}

#[test]
fn zero_weight_cohort_matches_independent_runs() {
    let data = blobs();
    let mut cohort = quick(2.0, 2, 21);
    cohort.psi = 0.0;
    let (models, recs) = run(&data, &cohort, 8);

    for k in 0..2 {
        let mut solo_cfg = cohort.clone();
        solo_cfg.students = 1;
        let mut solo = vec![StudentModel::init(&[4, 8, 3], student_seed(21, k)).unwrap()];
        let solo_recs = train(&mut solo, &data, &solo_cfg).unwrap();
        assert_eq!(solo[0].params(), models[k].params(), "student {k}");
        let mine: Vec<_> = recs
            .iter()
            .filter(|r| r.student == k)
            .map(|r| (r.train_loss, r.test_loss, r.test_acc))
            .collect();
        let theirs: Vec<_> = solo_recs
            .iter()
            .map(|r| (r.train_loss, r.test_loss, r.test_acc))
            .collect();
        assert_eq!(mine, theirs, "student {k}");
    }
}

#[test]
fn separable_limit_is_solved_by_a_linear_model() {
    let data = make_blobs(400, 5, 4, 1e-3, 2).unwrap().standardized();
    let mut config = quick(1.0, 1, 3);
    config.epochs = 10;
    let (_, recs) = run_linear(&data, &config);
    assert_eq!(final_record(&recs, 0).unwrap().test_acc, 100.0);
}

fn run_linear(data: &Dataset, config: &TrainConfig) -> (Vec<StudentModel>, Vec<rdml::EpochRecord>) {
    let mut models = init_cohort(&[data.dim(), data.classes()], config).unwrap();
    let recs = train(&mut models, data, config).unwrap();
    (models, recs)
}

#[test]
fn benchmark_is_not_trivially_separable() {
    let data = make_blobs(2000, 10, 5, 2.0, 0).unwrap().standardized();
    let mut config = TrainConfig::new(1.0, 30, 0);
    config.students = 1;
    config.batch_size = 64;
    config.lr_decay_epochs = vec![15, 25];
    let (_, recs) = run_linear(&data, &config);
    let best = recs.iter().map(|r| r.test_acc).fold(0.0, f64::max);
    assert!(best < 100.0, "{best}");
    assert!(best > 100.0 / 5.0, "{best}");
}

#[test]
fn delimited_round_trip_is_bitwise() {
    let data = make_blobs(120, 3, 4, 1.5, 77).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("blobs.csv");
    rdml::data::save_delimited(&data, std::fs::File::create(&path).unwrap()).unwrap();
    let mut schema = Schema::new(77);
    schema.classes = Some(4);
    let back = load_delimited(&path, &schema).unwrap();
    assert_eq!(back.features(), data.features());
    assert_eq!(back.labels(), data.labels());
    assert_eq!(back.split(), data.split());
}

#[test]
fn batches_cover_the_split_once_per_epoch() {
    let data = blobs();
    let a = batches(&data, SplitKind::Train, 50, epoch_seed(4, 0)).unwrap();
    let all: Vec<usize> = a.iter().flat_map(|b| b.indices.clone()).collect();
    let mut sorted = all.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, data.split().train);
    assert!(a
        .iter()
        .all(|b| b.indices.len() == 50 || std::ptr::eq(b, a.last().unwrap())));
    let b = batches(&data, SplitKind::Train, 50, epoch_seed(4, 1)).unwrap();
    let other: Vec<usize> = b.iter().flat_map(|b| b.indices.clone()).collect();
    assert_ne!(all, other);
    assert_eq!(
        all.iter().collect::<BTreeSet<_>>(),
        other.iter().collect::<BTreeSet<_>>()
    );
}

#[test]
fn clipped_updates_respect_the_norm() {
    let data = blobs();
    let mut config = quick(2.0, 2, 1);
    config.lr = 0.5;
    config.clip_max_norm = Some(0.05);
    let mut models = init_cohort(&[4, 8, 3], &config).unwrap();
    let mut states: Vec<_> = models.iter().map(|m| OptimizerState::new(m.params())).collect();
    config.momentum = 0.0;
    config.weight_decay = 0.0;
    for batch in batches(&data, SplitKind::Train, 32, 0).unwrap() {
        let before: Vec<StudentModel> = models.clone();
        train_step(&mut models, &mut states, &batch, &config, 1.0).unwrap();
        for (b, a) in before.iter().zip(&models) {
            let step_sq: f64 = b
                .params()
                .iter()
                .zip(a.params())
                .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(u, v)| (u - v).powi(2)))
                .sum();
            assert!(step_sq.sqrt() <= 0.05 + 1e-9, "{}", step_sq.sqrt());
        }
    }
}

#[test]
fn sequential_and_simultaneous_updates_differ_only_after_the_first_student() {
    let data = blobs();
    let batch = &batches(&data, SplitKind::Train, 32, 3).unwrap()[0];
    let mut outcomes = Vec::new();
    for mode in [UpdateMode::Sequential, UpdateMode::Simultaneous] {
        let mut config = quick(1.5, 2, 8);
        config.update_mode = mode;
        let mut models = init_cohort(&[4, 8, 3], &config).unwrap();
        let mut states: Vec<_> = models.iter().map(|m| OptimizerState::new(m.params())).collect();
        train_step(&mut models, &mut states, batch, &config, 0.1).unwrap();
        outcomes.push(models);
    }
    assert_eq!(outcomes[0][0], outcomes[1][0]);
    assert_ne!(outcomes[0][1], outcomes[1][1]);
}

#[test]
fn loss_is_non_negative_and_non_decreasing_in_alpha() {
    let data = blobs();
    let batch = &batches(&data, SplitKind::Train, 64, 2).unwrap()[0];
    let models = init_cohort(&[4, 8, 3], &quick(1.0, 3, 14)).unwrap();
    for k in 0..3 {
        let mut last = f64::NEG_INFINITY;
        for alpha in [0.0, 0.25, 0.5, 1.0, 1.5, 2.0, 5.0, 10.0] {
            let cfg = LossConfig {
                divergence: DivergenceSpec::new(alpha).unwrap(),
                ..LossConfig::new(alpha, 1.0).unwrap()
            };
            let mut tape = Tape::new();
            let out = dml_loss(&mut tape, k, &batch.x, &batch.y, &models, &cfg).unwrap();
            let total = tape.value(out.total).data()[0];
            assert!(total >= 0.0);
            assert!(total >= last - 1e-12, "alpha {alpha}: {total} < {last}");
            last = total;
        }
    }
}

#[test]
fn cohort_training_reduces_test_loss() {
    let data = blobs();
    let config = quick(1.0, 2, 6);
    let mut models = init_cohort(&[4, 16, 3], &config).unwrap();
    let (x, y) = data.subset(SplitKind::Test);
    let untrained: Vec<f64> = models.iter().map(|m| evaluate(m, &x, &y).unwrap().0).collect();
    let recs = train(&mut models, &data, &config).unwrap();
    for k in 0..2 {
        let last = final_record(&recs, k).unwrap().test_loss;
        assert!(last < untrained[k], "student {k}: {} -> {last}", untrained[k]);
    }
}
