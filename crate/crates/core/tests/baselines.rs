use lmc_core::baselines::{run_learner, BaselineKind, LearnerConfig, Learned};
use lmc_core::metrics::forgetting;
use lmc_core::net::NetConfig;
use lmc_core::taskgen::{gen_task, make_stream, Dataset, Sizes, StreamConfig, StreamKind, TaskSpec, BLACK, BLUE, GREEN, RED};
use lmc_core::tensor::optim::AdamConfig;
use lmc_core::trainer::TrainConfig;

fn task(families: Vec<usize>, fg: [f64; 3], bg: [f64; 3], seed: u64) -> Dataset {
    let s = TaskSpec::new("t", families, fg, bg, Sizes { train: 160, val: 40, test: 120 }, seed);
    gen_task(&s).unwrap()
}

fn cfg(seed: u64) -> LearnerConfig {
    LearnerConfig {
        net: NetConfig {
            channels: 8,
            seed,
            ..NetConfig::default()
        },
        train: TrainConfig {
            epochs: 8,
            projection_epochs: 2,
            batch_size: 32,
            adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
            seed,
            ..TrainConfig::default()
        },
        normalize: false,
    }
}

fn snapshots(l: &Learned<f64>) -> Vec<Vec<Vec<f64>>> {
    l.nets[0].cells().map(|c| c.all_params().iter().map(|p| p.to_vec()).collect()).collect()
}

#[test]
fn experts_never_forget() {
    let tasks = vec![task(vec![0, 1], RED, BLACK, 1), task(vec![2, 3], GREEN, BLACK, 2), task(vec![4, 5], BLUE, BLACK, 3)];
    let l = run_learner::<f64>(BaselineKind::Experts, &tasks, &cfg(0)).unwrap();
    let r = &l.record.accuracy;
    assert_eq!(forgetting(r), Some(0.0));
    assert_eq!(l.record.module_counts, vec![4, 8, 12]);
    for i in 0..3 {
        for j in 0..=i {
            assert_eq!(r.get(i, j), r.get(j, j));
        }
        assert!(r.get(i, i).unwrap() >= 0.9, "expert {i}: {:?}", r.get(i, i));
    }
}

#[test]
fn finetune_forgets_an_interfering_task() {
    let a = task(vec![0, 1], RED, BLACK, 4);
    let mut flipped = TaskSpec::new("flip", vec![0, 1], BLACK, RED, Sizes { train: 160, val: 40, test: 120 }, 5);
    flipped.label_perm = vec![1, 0];
    let b = gen_task(&flipped).unwrap();
    let l = run_learner::<f64>(BaselineKind::Finetune, &[a, b], &cfg(1)).unwrap();
    let r = &l.record.accuracy;
    let drop = r.get(0, 0).unwrap() - r.get(1, 0).unwrap();
    assert!(drop >= 0.10, "drop {drop}: {:?}", r.rows());
    assert_eq!(l.record.module_counts, vec![4, 4]);
    let wide = run_learner::<f64>(BaselineKind::FinetuneWide, &[task(vec![0, 1], RED, BLACK, 4)], &cfg(1)).unwrap();
    assert!(wide.record.params >= l.record.params);
}

#[test]
fn path_search_reuses_a_repeated_task_and_never_touches_stored_modules() {
    let t0 = task(vec![0, 1], RED, BLACK, 6);
    let t1 = task(vec![2, 3], GREEN, BLACK, 7);
    let tasks = vec![t0.clone(), t1, t0];
    let mut c = cfg(2);
    c.train.projection_epochs = 0;
    c.train.epochs = 14;
    let first = run_learner::<f64>(BaselineKind::MntdpLite, &tasks[..1], &c).unwrap();
    assert_eq!(first.layouts, vec![vec![0; 4]]);
    let before = snapshots(&first);
    let l = run_learner::<f64>(BaselineKind::MntdpLite, &tasks, &c).unwrap();
    assert_eq!(l.layouts.len(), 3);
    assert_eq!(l.layouts[2], l.layouts[0], "{:?}", l.layouts);
    assert_eq!(l.record.module_counts[2], l.record.module_counts[1]);
    let after: Vec<Vec<Vec<f64>>> = l.nets[0]
        .cells()
        .filter(|c| c.birth_task() == 0)
        .map(|c| c.all_params().iter().map(|p| p.to_vec()).collect())
        .collect();
    assert_eq!(after, before, "first-task modules changed");
    assert_eq!(forgetting(&l.record.accuracy), Some(0.0));
}

#[test]
fn aware_and_agnostic_share_training() {
    let s = make_stream(StreamKind::SPl, 3, &StreamConfig { scale: 0.2, ..StreamConfig::default() }).unwrap();
    let tasks: Vec<Dataset> = s.generate().unwrap().into_iter().take(2).collect();
    let mut c = cfg(3);
    c.train.epochs = 4;
    c.train.projection_epochs = 1;
    let a = run_learner::<f64>(BaselineKind::LmcAware, &tasks, &c).unwrap();
    let g = run_learner::<f64>(BaselineKind::LmcAgnostic, &tasks, &c).unwrap();
    assert_eq!(snapshots(&a), snapshots(&g));
    assert_eq!(a.record.aware, g.record.aware);
    assert_eq!(a.record.agnostic, g.record.agnostic);
    assert_eq!(Some(&a.record.accuracy), a.record.aware.as_ref());
    assert_eq!(Some(&g.record.accuracy), g.record.agnostic.as_ref());
}

#[test]
fn hard_variant_routes_one_hot() {
    let s = make_stream(StreamKind::SPl, 4, &StreamConfig { scale: 0.2, ..StreamConfig::default() }).unwrap();
    let tasks: Vec<Dataset> = s.generate().unwrap().into_iter().take(2).collect();
    let mut c = cfg(4);
    c.train.epochs = 4;
    c.train.projection_epochs = 1;
    let mut h = run_learner::<f64>(BaselineKind::LmcHard, &tasks, &c).unwrap();
    let (x, _) = tasks[1].gather::<f64>(&tasks[1].test, &(0..16).collect::<Vec<_>>()).unwrap();
    let (_, trace) = h.nets[0].predict(&x, lmc_core::net::HeadMode::Agnostic).unwrap();
    for rec in &trace.layers {
        for col in 0..16 {
            let w: Vec<f64> = rec.weights.iter().map(|r| r[col]).collect();
            assert_eq!(w.iter().filter(|v| **v == 1.0).count(), 1, "{w:?}");
            assert_eq!(w.iter().filter(|v| **v == 0.0).count(), w.len() - 1);
        }
    }
}

#[test]
fn every_learner_sees_the_same_stream_bytes() {
    let sc = StreamConfig { scale: 0.1, ..StreamConfig::default() };
    let a = make_stream(StreamKind::SMinus, 9, &sc).unwrap().generate().unwrap();
    let b = make_stream(StreamKind::SMinus, 9, &sc).unwrap().generate().unwrap();
    assert_eq!(a, b);
    let copy = a.clone();
    let mut c = cfg(5);
    c.train.epochs = 1;
    c.train.projection_epochs = 0;
    run_learner::<f64>(BaselineKind::Finetune, &a[..2], &c).unwrap();
    assert_eq!(a, copy);
}

#[test]
fn normalization_toggle_is_recorded_and_applied() {
    let tasks = vec![task(vec![0, 1], RED, BLACK, 10)];
    let mut c = cfg(6);
    c.normalize = true;
    c.train.epochs = 2;
    c.train.projection_epochs = 0;
    let mut l = run_learner::<f64>(BaselineKind::Finetune, &tasks, &c).unwrap();
    assert!(l.normalizer.is_some());
    assert_eq!(l.record.config["normalize"], serde_json::Value::Bool(true));
    let again = l.evaluate(0, &tasks[0], |d| &d.test, true).unwrap();
    assert_eq!(again, l.record.accuracy.get(0, 0).unwrap());
}
