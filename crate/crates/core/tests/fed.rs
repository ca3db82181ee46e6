use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scalefl::arch::{BlockKind, DesignBase};
use scalefl::data::{generate, GroupSpec, SubsetMode, SyntheticTaskSpec, TaskData};
use scalefl::fed::{adjust_lr, group_quota, run_experiment, select_clients, FedConfig, Federation, LrSchedule, Method, RunOutput};
use scalefl::local::{local_update, LocalConfig};
use scalefl::params::read_tensors;

fn task(groups: &[(usize, usize, usize)], seed: u64) -> Arc<TaskData> {
    let spec = SyntheticTaskSpec {
        master_classes: groups[0].1,
        master_size: groups[0].0,
        channels: 3,
        prototype_grid: 4,
        groups: groups
            .iter()
            .map(|&(h, k, clients)| GroupSpec {
                image_size: h,
                num_classes: k,
                clients,
                train_per_client: 12,
                test_per_group: 8,
            })
            .collect(),
        noise: 0.3,
        shift_frac: 0.1,
        gain: 0.2,
        subset: SubsetMode::Prefix,
        seed,
    };
    Arc::new(generate(&spec).unwrap())
}

fn base(base_classes: usize) -> DesignBase {
    DesignBase {
        base_classes,
        base_feature_size: 2,
        base_widths: vec![4, 8, 8],
        input_channels: 3,
        block: BlockKind::Plain,
    }
}

fn config(method: Method) -> FedConfig {
    FedConfig {
        rounds: 3,
        participation: 0.5,
        local_steps: 2,
        batch_size: 4,
        lr: 0.05,
        seed: 4,
        method,
        ..FedConfig::default()
    }
}

#[test]
fn one_client_round_equals_a_direct_local_update() {
    let data = task(&[(8, 3, 1)], 1);
    let mut fed = Federation::new(config(Method::ScalableFl), &base(3), data.clone()).unwrap();
    let mut model = fed.client_model(0).unwrap();
    let mut state = fed.states()[0].clone();
    let cfg = LocalConfig {
        steps: 2,
        batch_size: 4,
        lr: adjust_lr(0, 3, 0.05, LrSchedule::Cosine),
        momentum: 0.9,
        weight_decay: 5e-4,
        persist_momentum: false,
    };
    let direct = local_update(&mut model, &mut state, &data.clients[0].train, &cfg, 0).unwrap();
    let report = fed.run_round().unwrap();
    for (name, t) in &direct.shared {
        assert_eq!(fed.space().get(name).unwrap(), t, "{name}");
    }
    assert_eq!(fed.states()[0], state);
    assert_eq!(report.clients[0].train_loss, direct.mean_loss);
}

#[test]
fn individual_training_never_touches_the_global_store() {
    let data = task(&[(8, 3, 2), (4, 2, 2)], 2);
    let mut fed = Federation::new(config(Method::Individual), &base(3), data).unwrap();
    let before = fed.space().clone();
    let first = fed.client_model(0).unwrap().shared_tensors();
    fed.run_round().unwrap();
    fed.run_round().unwrap();
    assert_eq!(fed.space(), &before);
    let trained: Vec<usize> = (0..4).filter(|&id| fed.states()[id].own_shared.as_ref().unwrap() != &fed.client_model(id).unwrap().shared_tensors()).collect();
    assert!(trained.is_empty());
    assert_ne!(fed.client_model(0).unwrap().shared_tensors(), first);
}

#[test]
fn federated_round_moves_the_store_and_keeps_unselected_state() {
    let data = task(&[(8, 3, 4), (4, 2, 2)], 3);
    let mut fed = Federation::new(config(Method::ScalableFl), &base(3), data).unwrap();
    let before_space = fed.space().clone();
    let before_states = fed.states().to_vec();
    let report = fed.run_round().unwrap();
    assert_ne!(fed.space(), &before_space);
    let selected: Vec<usize> = report.selected.iter().flatten().copied().collect();
    assert_eq!(report.selected.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 1]);
    assert_eq!(before_states.len(), 6);
    for (id, (after, before)) in fed.states().iter().zip(&before_states).enumerate() {
        assert_eq!(after == before, !selected.contains(&id), "client {id}");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let data = task(&[(8, 3, 3), (4, 2, 3)], 5);
    let run = |threads| {
        let mut cfg = config(Method::ScalableFl);
        cfg.threads = threads;
        cfg.participation = 1.0;
        let mut fed = Federation::new(cfg, &base(3), data.clone()).unwrap();
        let report = run_experiment(&mut fed, None).unwrap();
        (fed.space().clone(), fed.states().to_vec(), report)
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn selection_is_sorted_sized_and_uniform() {
    let groups = vec![(0..8).collect::<Vec<_>>(), (8..11).collect()];
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let mut counts = [0usize; 11];
    for _ in 0..1000 {
        let picked = select_clients(&groups, 0.25, &mut r);
        assert_eq!(picked[0].len(), 2);
        assert_eq!(picked[1].len(), 1);
        for (sel, members) in picked.iter().zip(&groups) {
            assert!(sel.windows(2).all(|w| w[0] < w[1]));
            assert!(sel.iter().all(|id| members.contains(id)));
            sel.iter().for_each(|&id| counts[id] += 1);
        }
    }
    let check = |ids: std::ops::Range<usize>, p: f64| {
        let (mean, sd) = (1000.0 * p, (1000.0 * p * (1.0 - p)).sqrt());
        for id in ids {
            assert!((counts[id] as f64 - mean).abs() <= 3.0 * sd, "client {id}: {}", counts[id]);
        }
    };
    check(0..8, 0.25);
    check(8..11, 1.0 / 3.0);
    assert_eq!(group_quota(8, 0.25), 2);
    assert_eq!(group_quota(3, 0.25), 1);
    assert_eq!(group_quota(10, 0.05), 1);
}

#[test]
fn configuration_errors() {
    let data = task(&[(8, 3, 2), (4, 2, 2)], 6);
    for bad in [
        FedConfig { rounds: 0, ..config(Method::ScalableFl) },
        FedConfig { participation: 1.5, ..config(Method::ScalableFl) },
        FedConfig { momentum: 1.0, ..config(Method::ScalableFl) },
        config(Method::FedAvgHomogeneous),
        config(Method::HeteroFl { fixed_depth: 9 }),
    ] {
        assert!(Federation::new(bad, &base(3), data.clone()).is_err());
    }
    let fed = Federation::new(config(Method::ScalableFl), &base(3), data).unwrap();
    assert!(fed.client_model(99).is_err());
}

#[test]
fn heterofl_keeps_every_client_at_one_depth() {
    let data = task(&[(8, 4, 2), (4, 2, 2)], 7);
    let wide = DesignBase { base_widths: vec![8, 16, 32], ..base(4) };
    let mut fed = Federation::new(config(Method::HeteroFl { fixed_depth: 2 }), &wide, data).unwrap();
    assert!(fed.specs().iter().all(|s| s.depth() == 2));
    assert_eq!(fed.global_spec().depth(), 2);
    run_experiment(&mut fed, None).unwrap();
}

#[test]
fn reports_and_artifacts() {
    let data = task(&[(8, 3, 2), (4, 2, 2)], 8);
    let mut cfg = config(Method::ScalableFl);
    cfg.eval_every = 1;
    let mut fed = Federation::new(cfg, &base(3), data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = RunOutput {
        dir: dir.path().to_path_buf(),
        checkpoints: true,
    };
    let report = run_experiment(&mut fed, Some(&out)).unwrap();
    assert_eq!(report.reports.len(), 3);
    assert!(report.reports.iter().all(|r| r.eval.is_some() && r.wall_ms == 0));
    // prefix label sets are nested, so each level has a radius
    assert_eq!(report.reports[2].radii.len(), 2);
    let gap = report.reports[2].gap.as_ref().unwrap();
    assert_eq!(gap.radii.len(), 2);
    assert!((gap.tasks.iter().map(|t| t.alpha).sum::<f64>() - 1.0).abs() < 1e-15);
    assert!((0.0..=1.0).contains(&report.mean_accuracy()));

    let gap_csv = std::fs::read_to_string(dir.path().join("gap.csv")).unwrap();
    assert_eq!(gap_csv.lines().filter(|l| l.contains(",aggregate,")).count(), 3);
    let client = read_tensors(&std::fs::read(dir.path().join("checkpoints/client2.sfl")).unwrap()).unwrap();
    let names: Vec<&str> = client.iter().map(|(n, _)| n.as_str()).collect();
    assert!(names.contains(&"head.weight") && names.contains(&"bn0.running_var"), "{names:?}");
    assert!(!names.iter().any(|n| n.ends_with("conv1.weight")));
}

#[test]
fn schedules() {
    for t in 0..10 {
        assert!(adjust_lr(t + 1, 10, 0.1, LrSchedule::Cosine) < adjust_lr(t, 10, 0.1, LrSchedule::Cosine));
    }
    assert_eq!(adjust_lr(6, 10, 0.1, LrSchedule::Step), 0.1);
    assert!((adjust_lr(7, 10, 0.1, LrSchedule::Step) - 0.01).abs() < 1e-17);
}
