mod common;

use gcsl_core::data::{make_task_stream, sequential_label_order, AccumulativeValidation};
use gcsl_core::experiments::DatasetKind;

#[test]
fn mnist_shapes_and_accumulative_counts() {
    let data = common::load(DatasetKind::Mnist);
    assert_eq!(data.train.images.shape(), (60000, 784));
    assert_eq!(data.train.labels.len(), 60000);
    assert_eq!(data.test.images.shape(), (10000, 784));

    let tasks = make_task_stream(&data, &sequential_label_order(), 2).unwrap();
    let mut acc = AccumulativeValidation::new();
    acc.accumulate(&tasks[0]).unwrap();
    assert_eq!(acc.len(), 2115);
    for t in &tasks[1..] {
        acc.accumulate(t).unwrap();
    }
    assert_eq!(acc.len(), 10000);
    assert!(acc.accumulate(&tasks[2]).is_err());
    let train_total: usize = tasks.iter().map(|t| t.train.len()).sum();
    assert_eq!(train_total, 60000);
}

#[test]
fn pixel_ranges_are_sane() {
    for kind in [DatasetKind::Mnist, DatasetKind::Fmnist] {
        let data = common::load(kind);
        for split in [&data.train, &data.test] {
            let px = split.images.as_slice();
            assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(px.contains(&0.0));
            assert!(px.iter().any(|&v| v > 0.99));
        }
        assert!(data.train.labels.iter().all(|&l| l < 10));
    }
}

#[test]
fn fashion_splits_are_balanced() {
    let data = common::load(DatasetKind::Fmnist);
    assert_eq!(data.train.len(), 60000);
    assert_eq!(data.test.len(), 10000);
    for c in 0..10u8 {
        assert_eq!(data.test.indices_with_labels(&[c]).len(), 1000);
    }
}
