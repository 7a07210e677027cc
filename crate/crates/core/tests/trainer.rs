mod common;

use mslora::model::MaskPolicy;
use mslora::optim::OptimizerState;
use mslora::regularizers::LossWeights;
use mslora::taskgen::DatasetRef;
use mslora::trainer::{
    default_sequence, partition_for, run_fresh, run_sequence, train_task, RunConfig, TaskSpec,
};

fn short(mut seq: Vec<TaskSpec>, steps: usize) -> Vec<TaskSpec> {
    for t in &mut seq {
        t.steps = steps;
    }
    seq
}

#[test]
fn frozen_hash_survives_training() {
    let config = RunConfig::default();
    let seq = short(default_sequence(), 20);
    let mut model = config.build_model().unwrap();
    run_sequence(&mut model, &seq[..1], &config, Vec::new(), None).unwrap();

    let spec = &seq[1];
    let task = model
        .begin_task(
            spec.id.clone(),
            spec.modality.clone(),
            spec.classes,
            None,
            config.rank,
            config.scale(),
            3,
        )
        .unwrap();
    let before = model.frozen_hash();
    let head0 = model.tasks()[0].head.clone();
    let data = config.resolve(spec, 1).unwrap();
    let partition = partition_for(&model, task).unwrap();
    let report = train_task(&mut model, spec, &data, &partition, &config, 1, None).unwrap();
    assert_eq!(model.frozen_hash(), before);
    assert_eq!(model.tasks()[0].head, head0);
    assert_eq!(report.trace.len(), spec.steps);
    // The open branch did move.
    assert!(model.layers()[0].branches()[task].a().max_abs() > 0.0);
}

#[test]
fn trainable_count_is_constant_across_tasks() {
    let config = RunConfig::default();
    let (model, out) = run_fresh(&short(default_sequence(), 3), &config, None).unwrap();
    let d = config.model.width;
    let per_branch = 2 * d * config.rank;
    let head = d * 4 + 4;
    for t in &out.report.tasks {
        assert_eq!(
            t.trainable_parameters,
            per_branch * model.placed_layers().len() + head
        );
    }
}

#[test]
fn optimizer_state_dropped_for_frozen() {
    let config = RunConfig::default();
    let seq = short(default_sequence(), 2);
    let mut model = config.build_model().unwrap();
    run_sequence(&mut model, &seq[..1], &config, Vec::new(), None).unwrap();
    let mut state = OptimizerState::new();
    state.moments.insert(
        mslora::model::ParamId::HeadWeight(0),
        mslora::optim::Moments {
            first: mslora::Matrix::zeros(16, 4),
            second: mslora::Matrix::zeros(16, 4),
        },
    );
    state.retain_trainable(&model);
    assert!(state.moments.is_empty());
}

#[test]
fn separable_two_class_task_learned() {
    let spec = TaskSpec {
        id: "bin".into(),
        modality: "A".into(),
        data: DatasetRef::Synthetic {
            modality_seed: 7,
            task_seed: 3,
            classes: 2,
        },
        classes: 2,
        steps: 300,
        batch: 32,
    };
    let config = RunConfig::default();
    let data = config.resolve(&spec, 0).unwrap();
    assert!(common::oracle_test_accuracy(&data) >= 0.99);
    let (_, out) = run_fresh(std::slice::from_ref(&spec), &config, None).unwrap();
    assert!(
        out.report.tasks[0].train_accuracy >= 0.95,
        "{}",
        out.report.tasks[0].train_accuracy
    );
}

#[test]
fn zero_weights_single_task_is_plain_finetuning() {
    let mut config = RunConfig::default();
    config.loss.weights = LossWeights {
        alpha: 0.0,
        beta: 0.0,
    };
    let seq = short(default_sequence(), 10)[..1].to_vec();
    let (_, out) = run_fresh(&seq, &config, None).unwrap();
    for row in &out.report.tasks[0].trace {
        assert_eq!(row.total.to_bits(), row.ce.to_bits());
        assert_eq!(row.cr, 0.0);
    }
}

#[test]
fn identical_seeds_identical_runs() {
    let config = RunConfig::default();
    let seq = short(default_sequence(), 15);
    let (m1, o1) = run_fresh(&seq, &config, None).unwrap();
    let (m2, o2) = run_fresh(&seq, &config, None).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(o1.report, o2.report);
    let other = RunConfig { seed: 1, ..config };
    let (m3, _) = run_fresh(&seq, &other, None).unwrap();
    assert_ne!(m1, m3);
}

#[test]
fn resume_continues_where_it_stopped() {
    let config = RunConfig::default();
    let seq = short(default_sequence(), 8);
    let (full, full_out) = run_fresh(&seq, &config, None).unwrap();

    let mut model = config.build_model().unwrap();
    let first = run_sequence(&mut model, &seq[..2], &config, Vec::new(), None).unwrap();
    let rest = run_sequence(&mut model, &seq, &config, first.snapshots, None).unwrap();
    assert_eq!(model, full);
    assert_eq!(rest.report.resumed.len(), 2);
    assert_eq!(rest.report.metrics, full_out.report.metrics);
}

#[test]
fn mismatched_resume_rejected() {
    let config = RunConfig::default();
    let seq = short(default_sequence(), 2);
    let mut model = config.build_model().unwrap();
    run_sequence(&mut model, &seq[1..2], &config, Vec::new(), None).unwrap();
    assert!(run_sequence(&mut model, &seq, &config, Vec::new(), None).is_err());
}

#[test]
fn all_policy_reports_deviation_for_earlier_tasks() {
    let config = RunConfig {
        mask_policy: MaskPolicy::All,
        ..Default::default()
    };
    let (_, out) = run_fresh(&short(default_sequence(), 20), &config, None).unwrap();
    let entries = &out.report.stability.entries;
    assert!(entries[0].max_abs_deviation > 0.0);
    assert!(entries.last().unwrap().bitwise_equal);
}
