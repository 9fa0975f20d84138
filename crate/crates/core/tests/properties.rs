use std::collections::HashMap;
use std::sync::Arc;

use geos_core::datasets::{self, LabeledSample, SampleId};
use geos_core::evalproto::{self, Method, Protocol, ProtocolRow, RowStatus};
use geos_core::image::Image;
use geos_core::netcore::{Batch, GeosModel, ModelConfig};
use geos_core::params::Group;
use geos_core::permset::{self, Permutation, PermutationSet};
use geos_core::rng;
use geos_core::sstasks::{self, Grid};
use geos_core::Tensor;
use proptest::prelude::*;

fn permutation(n: usize) -> impl Strategy<Value = Permutation> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle().prop_map(|m| Permutation::new(m).unwrap())
}

fn image(side: usize) -> impl Strategy<Value = Image<f32>> {
    proptest::collection::vec(0.0f32..1.0, side * side * 3).prop_map(move |d| Image::new(side, side, 3, d).unwrap())
}

fn all_perms(n: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for k in 0..n {
        out = out
            .into_iter()
            .flat_map(|p: Vec<usize>| {
                (0..=p.len()).map(move |pos| {
                    let mut q = p.clone();
                    q.insert(pos, k);
                    q
                })
            })
            .collect();
    }
    out
}

fn dist(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hamming_is_a_metric(a in permutation(6), b in permutation(6), c in permutation(6)) {
        let d = |x: &Permutation, y: &Permutation| permset::hamming(x, y).unwrap();
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert_eq!(d(&a, &b) == 0, a == b);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert_ne!(d(&a, &b), 1);
    }

    #[test]
    fn scramble_then_inverse_is_identity(p in permutation(9), img in image(12)) {
        let grid = Grid::square(3);
        let there = sstasks::scramble_tiles(&img, &p, grid).unwrap();
        prop_assert_eq!(sstasks::scramble_tiles(&there, &p.inverse(), grid).unwrap(), img);
    }

    #[test]
    fn rotations_compose(img in image(8), k in 0usize..4) {
        let once = sstasks::rotate_ccw(&img, k).unwrap();
        prop_assert_eq!(sstasks::rotate_ccw(&once, 4 - k).unwrap(), img);
    }

    #[test]
    fn greedy_selection_replays(n in 2usize..=5, v in 2usize..=20, seed in any::<u64>()) {
        let v = v.min((1..=n).product());
        let set = permset::generate(n, v, seed).unwrap();
        let pool = all_perms(n);
        let chosen: Vec<&[usize]> = set.permutations().iter().map(Permutation::as_slice).collect();
        for k in 1..chosen.len() {
            let to_prefix = |c: &[usize]| chosen[..k].iter().map(|p| dist(c, p)).min().unwrap();
            let best = pool.iter().map(|c| to_prefix(c)).max().unwrap();
            prop_assert_eq!(to_prefix(chosen[k]), best, "step {}", k);
        }
        let brute = (0..v).flat_map(|i| (i + 1..v).map(move |j| (i, j))).map(|(i, j)| dist(chosen[i], chosen[j])).min();
        prop_assert_eq!(set.min_pairwise_hamming(), brute);
    }

    #[test]
    fn permset_text_roundtrip(n in 2usize..=6, v in 1usize..=12, seed in any::<u64>()) {
        let v = v.min((1..=n).product());
        let set = permset::generate(n, v, seed).unwrap();
        let back = PermutationSet::parse(&set.to_text(), "mem").unwrap();
        prop_assert_eq!(back, set);
    }

    #[test]
    fn split_partitions_and_stratifies(per_class in proptest::collection::vec(0usize..12, 1..5), frac in 0.05f64..0.6, seed in any::<u64>()) {
        let raster = Arc::new(Image::filled(2, 2, 3, 0u8));
        let samples: Vec<LabeledSample> = per_class
            .iter()
            .enumerate()
            .flat_map(|(c, &k)| (0..k).map(move |i| (c, i)))
            .enumerate()
            .map(|(idx, (c, _))| LabeledSample { id: SampleId::new(0, idx), image: raster.clone(), label: c, origin: None })
            .collect();
        prop_assume!(!samples.is_empty());
        let s = datasets::split(&samples, frac, seed).unwrap();
        let again = datasets::split(&samples, frac, seed).unwrap();
        prop_assert_eq!(&s.train, &again.train);
        let mut ids: Vec<_> = s.train.iter().chain(&s.val).map(|x| x.id).collect();
        ids.sort();
        let mut orig: Vec<_> = samples.iter().map(|x| x.id).collect();
        orig.sort();
        prop_assert_eq!(ids, orig);
        for (c, &k) in per_class.iter().enumerate() {
            let v = s.val.iter().filter(|x| x.label == c).count();
            if k < 2 {
                prop_assert_eq!(v, 0);
            } else {
                prop_assert!(v < k);
                prop_assert!((v as f64 - k as f64 * frac).abs() <= 1.0 + 1e-9, "class {} of {}: {} in val", c, k, v);
            }
        }
    }

    #[test]
    fn seed_derivation_is_stable(root in any::<u64>(), a in "[a-z]{1,8}", b in "[a-z]{1,8}") {
        prop_assert_eq!(rng::derive_seed(root, &a), rng::derive_seed(root, &a));
        if a != b {
            prop_assert_ne!(rng::derive_seed(root, &a), rng::derive_seed(root, &b));
        }
        prop_assert_ne!(rng::derive_index(root, 0), rng::derive_index(root, 1));
    }

    #[test]
    fn aggregates_are_means_of_means(accs in proptest::collection::vec(proptest::option::of(0.0f64..=1.0), 1..24)) {
        let rows: Vec<ProtocolRow> = accs
            .iter()
            .enumerate()
            .map(|(i, &a)| ProtocolRow {
                protocol: Protocol::DgLoo,
                target: format!("d{}", i % 3),
                method: Method::Ges,
                os_iterations: 0,
                run: i / 3,
                seed: i as u64,
                accuracy: a,
                status: if a.is_some() { RowStatus::Ok } else { RowStatus::Failed },
            })
            .collect();
        let targets: Vec<String> = (0..3).map(|i| format!("d{i}")).collect();
        let (per_target, overall) = evalproto::aggregate(&rows, &targets);
        let mut by: HashMap<&str, Vec<f64>> = HashMap::new();
        for r in &rows {
            if let Some(a) = r.accuracy {
                by.entry(r.target.as_str()).or_default().push(a);
            }
        }
        prop_assert_eq!(per_target.len(), by.len());
        for t in &per_target {
            let v = &by[t.target.as_str()];
            prop_assert!((t.mean - v.iter().sum::<f64>() / v.len() as f64).abs() < 1e-12);
            prop_assert_eq!(t.runs, v.len());
        }
        if by.is_empty() {
            prop_assert!(overall.is_empty());
        } else {
            let mean = per_target.iter().map(|t| t.mean).sum::<f64>() / per_target.len() as f64;
            prop_assert!((overall[0].mean - mean).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn isolation_holds_for_any_initialisation(seed in any::<u64>(), l0 in 0usize..3, l1 in 0usize..5) {
        let cfg = ModelConfig { channels: Some(vec![4, 6]), zero_init_refinement: false, ..ModelConfig::desk(3, 5, 12, seed) };
        let model = GeosModel::<f64>::build(cfg).unwrap();
        let mut r = rng::rng(seed ^ 1);
        let data = (0..2 * 3 * 144).map(|_| rand::Rng::gen_range(&mut r, -1.0..1.0)).collect();
        let batch = Batch { inputs: Tensor::from_vec(&[2, 3, 12, 12], data).unwrap(), labels: vec![l0, l1 % 3] };
        let mut g = model.grads();
        model.accumulate_primary(&batch, &mut g).unwrap();
        prop_assert!(g.group_is_zero(model.params(), Group::Lambda));
        let aux = Batch { labels: vec![l1, l0], ..batch };
        let mut g = model.grads();
        model.accumulate_auxiliary(&aux, 2.0, &mut g).unwrap();
        prop_assert!(g.group_is_zero(model.params(), Group::Theta));
    }
}
