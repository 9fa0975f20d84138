use geos_core::datasets::{self, synthesize, SynthSpec};
use geos_core::optim::OptimizerKind;
use geos_core::sstasks::Task;
use geos_core::trainer::{self, presets, FitHooks, Mode, TrainConfig, TrainInputs};

#[test]
fn synthetic_counts_and_determinism() {
    let spec = SynthSpec::desk(4, 7, 50, 66, 7);
    let a = synthesize(&spec).unwrap();
    assert_eq!(a.domains().len(), 4);
    assert_eq!(a.len(), 1400);
    assert!(a.domains().iter().all(|d| d.samples.len() == 350));
    assert_eq!(a.class_names().len(), 7);
    let b = synthesize(&spec).unwrap();
    assert!(a.domains().iter().zip(b.domains()).all(|(x, y)| x.samples.iter().zip(&y.samples).all(|(s, t)| s.image == t.image && s.label == t.label)));
}

/// Plain classifier fit used by the separability and shift checks.
fn classifier(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        mode: Mode::NullHypothesis,
        task: Task::Rotation,
        optimizer: OptimizerKind::Adam,
        lr_main: 0.003,
        lr_head: 0.003,
        batch_size_primary: 8,
        batch_size_auxiliary: 8,
        epochs: 2,
        augment: false,
        ..presets::desk()
    }
}

#[test]
fn classes_are_separable_within_domains() {
    let ds = synthesize(&SynthSpec::desk(4, 7, 50, 28, 7)).unwrap();
    let labeled = ds.gather(&[1, 2, 3]);
    let inputs = TrainInputs {
        labeled: &labeled,
        unlabeled: None,
        num_classes: 7,
    };
    let state = trainer::fit::<f32>(&classifier(0), inputs, None, FitHooks::default()).unwrap();
    assert!(state.best_val_metric > 0.9, "held-in accuracy {}", state.best_val_metric);
}

#[test]
fn domain_shift_is_real() {
    let ds = synthesize(&SynthSpec::desk(4, 7, 50, 28, 7)).unwrap();
    let own = ds.gather(&[1]);
    let cfg = TrainConfig {
        epochs: 4,
        ..classifier(1)
    };
    let split = datasets::split(&own, 0.2, 3).unwrap();
    let inputs = TrainInputs {
        labeled: &split.train,
        unlabeled: None,
        num_classes: 7,
    };
    let state = trainer::fit::<f32>(&cfg, inputs, None, FitHooks::default()).unwrap();
    let held_in = trainer::evaluate(state.best(), &split.val).unwrap();
    for other in [0, 2, 3] {
        let shifted = trainer::evaluate(state.best(), &ds.gather(&[other])).unwrap();
        assert!(shifted < held_in, "domain {other}: {shifted} vs held-in {held_in}");
    }
}

#[test]
fn folder_roundtrip_preserves_pixels() {
    let ds = synthesize(&SynthSpec::desk(2, 3, 2, 12, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    datasets::export_folder(&ds, dir.path()).unwrap();
    let (back, report) = datasets::load_folder(dir.path(), 12).unwrap();
    assert!(report.errors.is_empty());
    assert_eq!(back.len(), ds.len());
    let again = datasets::load_folder(dir.path(), 12).unwrap().0;
    let ids = |d: &geos_core::datasets::DomainDataset| d.gather(&[0, 1]).iter().map(|s| (s.origin.clone(), s.label)).collect::<Vec<_>>();
    assert_eq!(ids(&back), ids(&again));
}
