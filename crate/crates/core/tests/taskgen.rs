mod common;

use mslora::taskgen::{
    gen_modality, gen_task, DEFAULT_CLASSES, DEFAULT_DIM, DEFAULT_MARGIN, DEFAULT_PER_CLASS,
};

#[test]
fn default_tasks_are_linearly_separable() {
    for (mseed, tseed) in [(101, 1), (101, 2), (202, 1), (202, 2), (9, 40)] {
        let m = gen_modality("m", DEFAULT_DIM, mseed).unwrap();
        let ds = gen_task(
            &m,
            tseed,
            DEFAULT_CLASSES,
            DEFAULT_PER_CLASS,
            DEFAULT_MARGIN,
        )
        .unwrap();
        let acc = common::oracle_test_accuracy(&ds);
        assert!(acc >= 0.99, "modality {mseed} task {tseed}: {acc}");
    }
}

#[test]
fn same_modality_tasks_share_a_frame() {
    let m = gen_modality("m", DEFAULT_DIM, 101).unwrap();
    let a = gen_task(&m, 1, 4, 20, 6.0).unwrap();
    let b = gen_task(&m, 2, 4, 20, 6.0).unwrap();
    for ds in [&a, &b] {
        let back = m.apply(&m.invert(&ds.features));
        assert!(back.max_abs_diff(&ds.features).unwrap() < 1e-10);
    }
}

#[test]
fn splits_are_disjoint_and_balanced() {
    let m = gen_modality("m", 8, 5).unwrap();
    let ds = gen_task(&m, 2, 5, 30, 4.0).unwrap();
    assert_eq!(ds.train.len() + ds.test.len(), ds.len());
    assert!(ds.train.iter().all(|i| !ds.test.contains(i)));
    let min = ds.len().div_ceil(2 * ds.classes);
    for c in 0..ds.classes {
        assert!(ds.labels.iter().filter(|&&l| l == c).count() >= min);
    }
}
