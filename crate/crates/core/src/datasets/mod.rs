//! Domain-organized image collections: on-disk ingestion, a procedural
//! multi-domain generator, and stratified train/validation splitting.

mod folder;
mod synth;

use std::collections::BTreeMap;
use std::sync::Arc;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Raster;
use crate::rng;

pub use folder::{export_folder, load_folder, load_manifest, IngestReport};
pub use synth::{synthesize, DomainStyle, SynthSpec, SHAPE_NAMES};

/// Stable identity of an image: owning domain index plus position within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId {
    pub domain: u32,
    pub index: u32,
}

impl SampleId {
    pub fn new(domain: usize, index: usize) -> Self {
        SampleId {
            domain: domain as u32,
            index: index as u32,
        }
    }
}

impl std::fmt::Display for SampleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.domain, self.index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: SampleId,
    pub image: Arc<Raster>,
    pub label: usize,
    /// Path relative to the dataset root, when ingested from disk.
    pub origin: Option<String>,
}

/// An image with its label removed. Auxiliary streams only ever see these.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSample {
    pub id: SampleId,
    pub image: Arc<Raster>,
}

impl LabeledSample {
    pub fn unlabeled(&self) -> UnlabeledSample {
        UnlabeledSample {
            id: self.id,
            image: Arc::clone(&self.image),
        }
    }
}

pub fn strip_labels(samples: &[LabeledSample]) -> Vec<UnlabeledSample> {
    samples.iter().map(LabeledSample::unlabeled).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub name: String,
    pub samples: Vec<LabeledSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    domains: Vec<Domain>,
    class_names: Vec<String>,
    resolution: usize,
}

impl DomainDataset {
    pub fn new(domains: Vec<Domain>, class_names: Vec<String>, resolution: usize) -> Result<Self> {
        if domains.is_empty() {
            return Err(Error::Ingestion("dataset has no domains".into()));
        }
        for (d, dom) in domains.iter().enumerate() {
            for (i, s) in dom.samples.iter().enumerate() {
                if s.label >= class_names.len() {
                    return Err(Error::Ingestion(format!(
                        "sample {i} of `{}` has label {} outside {} classes",
                        dom.name,
                        s.label,
                        class_names.len()
                    )));
                }
                if s.id != SampleId::new(d, i) {
                    return Err(Error::Ingestion(format!("sample ids of `{}` are not sequential", dom.name)));
                }
            }
        }
        Ok(DomainDataset {
            domains,
            class_names,
            resolution,
        })
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn domain_names(&self) -> Vec<&str> {
        self.domains.iter().map(|d| d.name.as_str()).collect()
    }

    pub fn domain_index(&self, name: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| Error::Protocol(format!("no domain named `{name}`")))
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.domains.iter().map(|d| d.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All samples of the listed domains, concatenated in domain order.
    pub fn gather(&self, domains: &[usize]) -> Vec<LabeledSample> {
        domains
            .iter()
            .flat_map(|&d| self.domains[d].samples.iter().cloned())
            .collect()
    }

    pub fn sample(&self, id: SampleId) -> Option<&LabeledSample> {
        self.domains.get(id.domain as usize)?.samples.get(id.index as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub warnings: Vec<String>,
}

/// Stratified by `(domain, class)`. The validation size `round(N × val_fraction)`
/// is apportioned to strata by largest remainder, so every stratum keeps its
/// proportion within one sample. Strata with fewer than two samples stay in
/// train with a warning.
pub fn split(samples: &[LabeledSample], val_fraction: f64, seed: u64) -> Result<Split> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("val_fraction {val_fraction} must lie in (0, 1)")));
    }
    let mut strata: BTreeMap<(u32, usize), Vec<&LabeledSample>> = BTreeMap::new();
    for s in samples {
        strata.entry((s.id.domain, s.label)).or_default().push(s);
    }
    let mut out = Split {
        train: Vec::new(),
        val: Vec::new(),
        warnings: Vec::new(),
    };
    let eligible: Vec<(u32, usize)> = strata.iter().filter(|(_, m)| m.len() >= 2).map(|(k, _)| *k).collect();
    let pool: usize = eligible.iter().map(|k| strata[k].len()).sum();
    let target = (pool as f64 * val_fraction).round() as usize;
    let mut quota: BTreeMap<(u32, usize), usize> = BTreeMap::new();
    let mut remainders = Vec::new();
    for k in &eligible {
        let exact = strata[k].len() as f64 * val_fraction;
        quota.insert(*k, exact.floor() as usize);
        remainders.push((exact - exact.floor(), *k));
    }
    let assigned: usize = quota.values().sum();
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, k) in remainders.iter().take(target.saturating_sub(assigned)) {
        *quota.get_mut(k).expect("eligible") += 1;
    }

    for ((domain, class), mut members) in strata {
        let Some(&q) = quota.get(&(domain, class)) else {
            let msg = format!("domain {domain} class {class} has {} sample(s); kept in train", members.len());
            warn!("{msg}");
            out.warnings.push(msg);
            out.train.extend(members.into_iter().cloned());
            continue;
        };
        members.sort_by_key(|s| s.id);
        let mut rng = rng::rng(rng::derive_seed(seed, &format!("split/{domain}/{class}")));
        members.shuffle(&mut rng);
        let n_val = q.min(members.len() - 1);
        let (val, train) = members.split_at(n_val);
        out.val.extend(val.iter().map(|s| (*s).clone()));
        out.train.extend(train.iter().map(|s| (*s).clone()));
    }
    out.train.sort_by_key(|s| s.id);
    out.val.sort_by_key(|s| s.id);
    Ok(out)
}

/// Split by an explicit list of validation paths (relative to the dataset root).
pub fn split_by_paths(samples: &[LabeledSample], val_paths: &std::collections::HashSet<String>) -> Split {
    let (val, train): (Vec<_>, Vec<_>) = samples
        .iter()
        .cloned()
        .partition(|s| s.origin.as_ref().is_some_and(|o| val_paths.contains(o)));
    Split {
        train,
        val,
        warnings: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn toy(domains: usize, classes: usize, per: usize) -> Vec<LabeledSample> {
        let img = Arc::new(Raster::filled(2, 2, 3, 0));
        let mut out = Vec::new();
        for d in 0..domains {
            let mut idx = 0;
            for c in 0..classes {
                for _ in 0..per {
                    out.push(LabeledSample {
                        id: SampleId::new(d, idx),
                        image: Arc::clone(&img),
                        label: c,
                        origin: None,
                    });
                    idx += 1;
                }
            }
        }
        out
    }

    #[test]
    fn split_ninety_ten_stratified() {
        let samples = toy(1, 4, 25);
        let s = split(&samples, 0.1, 3).unwrap();
        assert_eq!(s.train.len(), 90);
        assert_eq!(s.val.len(), 10);
        for c in 0..4 {
            let v = s.val.iter().filter(|x| x.label == c).count();
            assert!((v as i64 - 2).abs() <= 1, "class {c}: {v}");
        }
        let again = split(&samples, 0.1, 3).unwrap();
        assert_eq!(s, again);
        let mut union: Vec<_> = s.train.iter().chain(&s.val).map(|x| x.id).collect();
        union.sort();
        let mut orig: Vec<_> = samples.iter().map(|x| x.id).collect();
        orig.sort();
        assert_eq!(union, orig);
        let tr: HashSet<_> = s.train.iter().map(|x| x.id).collect();
        assert!(s.val.iter().all(|x| !tr.contains(&x.id)));
    }

    #[test]
    fn singleton_strata_stay_in_train() {
        let samples = toy(1, 3, 1);
        let s = split(&samples, 0.5, 0).unwrap();
        assert_eq!(s.train.len(), 3);
        assert!(s.val.is_empty());
        assert_eq!(s.warnings.len(), 3);
        assert!(split(&samples, 1.0, 0).is_err());
        assert!(split(&samples, 0.0, 0).is_err());
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let mut samples = toy(1, 2, 1);
        samples[1].label = 5;
        let dom = Domain {
            name: "a".into(),
            samples,
        };
        assert!(DomainDataset::new(vec![dom], vec!["x".into(), "y".into()], 2).is_err());
    }
}
