use geos_core::datasets::{synthesize, DomainDataset, SynthSpec};
use geos_core::evalproto::{self, Method, Protocol, ProtocolSpec, RowStatus};
use geos_core::permset::{self, PermutationSet};
use geos_core::trainer::{presets, TrainConfig};

fn tiny_train(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        crop_size: 12,
        desk_channels: Some(vec![4, 8]),
        epochs: 1,
        batch_size_primary: 8,
        batch_size_auxiliary: 8,
        val_fraction: 0.25,
        ..presets::desk()
    }
}

fn tiny(protocol: Protocol, methods: Vec<Method>) -> ProtocolSpec {
    ProtocolSpec {
        repetitions: 1,
        methods,
        os_max_iterations: 2,
        os_batch_size: 8,
        eval_limit: Some(6),
        ..ProtocolSpec::new(protocol, tiny_train(5))
    }
}

fn data(domains: usize) -> DomainDataset {
    synthesize(&SynthSpec::desk(domains, 3, 6, 14, 2)).unwrap()
}

fn perms() -> PermutationSet {
    permset::generate(9, 30, 0).unwrap()
}

#[test]
fn pda_on_three_domains_runs_six_ordered_pairs() {
    let r = evalproto::run_pda(&data(3), &tiny(Protocol::PdaPairs, vec![Method::Ges]), Some(&perms())).unwrap();
    assert_eq!(r.rows.len(), 6);
    let targets: std::collections::HashSet<_> = r.rows.iter().map(|row| row.target.as_str()).collect();
    assert_eq!(targets.len(), 6);
    assert!(r.notices.is_empty());
}

#[test]
fn pda_subsamples_pairs_unless_full_sweep() {
    let ds = data(4);
    let spec = ProtocolSpec {
        max_pairs: 3,
        ..tiny(Protocol::PdaPairs, vec![Method::Null])
    };
    let r = evalproto::run_pda(&ds, &spec, None).unwrap();
    assert_eq!(r.targets.len(), 3);
    assert!(r.notices[0].contains("3 of 12"));
    let full = evalproto::run_pda(&ds, &ProtocolSpec { full_sweep: true, ..spec }, None).unwrap();
    assert_eq!(full.targets.len(), 12);
}

#[test]
fn dg_loo_shape_and_single_repetition_aggregate() {
    let r = evalproto::run_dg_loo(&data(3), &tiny(Protocol::DgLoo, vec![Method::Null, Method::Ges, Method::Geos]), Some(&perms())).unwrap();
    // null + ges + geos(it 1..2) per target.
    assert_eq!(r.rows.len(), 3 * 4);
    for a in &r.targets_mean {
        let row = r
            .rows
            .iter()
            .find(|row| row.target == a.target && row.method == a.method && row.os_iterations == a.os_iterations)
            .unwrap();
        assert_eq!(Some(a.mean), row.accuracy);
    }
    let md = evalproto::markdown(&r);
    assert_eq!(md.lines().count(), 2 + 4);
    assert!(md.lines().next().unwrap().ends_with("| Avg |"));
}

#[test]
fn rows_rerun_from_their_seed() {
    let ds = data(3);
    let spec = ProtocolSpec {
        repetitions: 2,
        ..tiny(Protocol::DgLoo, vec![Method::Ges, Method::Geos])
    };
    let p = perms();
    let r = evalproto::run_dg_loo(&ds, &spec, Some(&p)).unwrap();
    for row in [&r.rows[0], &r.rows[r.rows.len() - 1]] {
        assert_eq!(evalproto::rerun_row(&ds, &spec, Some(&p), row).unwrap(), row.accuracy);
    }
    assert_ne!(r.rows[0].seed, r.rows[1].seed);
    let again = evalproto::run_dg_loo(&ds, &spec, Some(&p)).unwrap();
    assert_eq!(again.rows, r.rows);
}

#[test]
fn divergence_marks_rows_failed_and_the_run_continues() {
    let mut spec = tiny(Protocol::DgLoo, vec![Method::Null]);
    spec.train.lr_main = 1e30;
    spec.train.lr_head = 1e30;
    spec.train.optimizer = geos_core::optim::OptimizerKind::SgdMomentum;
    spec.train.epochs = 3;
    let r = evalproto::run_dg_loo(&data(3), &spec, None).unwrap();
    assert_eq!(r.rows.len(), 3);
    assert!(r.failed());
    assert!(r.rows.iter().all(|row| row.status == RowStatus::Failed && row.accuracy.is_none()));
    assert_eq!(r.notices.len(), 3);
    assert!(r.overall.is_empty());
}

#[test]
fn protocol_preconditions() {
    let spec = tiny(Protocol::PdaPairs, vec![Method::Null]);
    assert!(matches!(evalproto::run_pda(&data(2), &spec, None), Err(geos_core::Error::Protocol(_))));
    let jig = tiny(Protocol::DgLoo, vec![Method::Ges]);
    assert!(matches!(evalproto::run_dg_loo(&data(3), &jig, None), Err(geos_core::Error::Config(_))));
    let none = ProtocolSpec { repetitions: 0, ..jig };
    assert!(evalproto::run_dg_loo(&data(3), &none, Some(&perms())).is_err());
    assert!(evalproto::run_da(&data(3), &["nowhere".into()], &tiny(Protocol::DaMulti, vec![Method::Null]), None).is_err());
}

/// Seeded desk comparison of adaptation against generalization on one target.
/// Selecting DA checkpoints by pretext accuracy often keeps an epoch with a
/// weak primary head at this scale, so DA wins only on some seeds; the
/// observed outcome is pinned as a regression value.
#[test]
fn da_versus_dg_seeded_outcome() {
    let ds = synthesize(&SynthSpec::desk(4, 4, 16, 28, 7)).unwrap();
    let p = perms();
    let target = vec![ds.domains()[3].name.clone()];
    let mut observed = Vec::new();
    for seed in 0..5 {
        let base = ProtocolSpec {
            repetitions: 1,
            methods: vec![Method::Ges],
            ..ProtocolSpec::new(Protocol::DgLoo, TrainConfig { seed, ..presets::desk() })
        };
        let dg = evalproto::run_dg_loo(&ds, &base, Some(&p)).unwrap();
        let dg_acc = dg.rows.iter().find(|r| r.target == target[0]).unwrap().accuracy.unwrap();
        let da = evalproto::run_da(&ds, &target, &base, Some(&p)).unwrap();
        observed.push((dg_acc, da.rows[0].accuracy.unwrap()));
    }
    let pinned = [(0.25, 0.25), (0.546875, 0.25), (0.359375, 0.578125), (0.4375, 0.3125), (0.546875, 0.25)];
    assert_eq!(observed, pinned);
    assert_eq!(observed.iter().filter(|(dg, da)| da >= dg).count(), 2);
}
