//! Named parameter storage split into the primary (`theta`) and auxiliary
//! (`lambda`) ownership groups.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Theta,
    Lambda,
}

impl Group {
    pub fn prefix(self) -> &'static str {
        match self {
            Group::Theta => "theta",
            Group::Lambda => "lambda",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    /// Layer-qualified name without the group prefix, e.g. `stage1.conv.weight`.
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Group,
    /// Classifier heads may get their own learning rate.
    pub head: bool,
    /// Frozen buffers (normalization statistics) are stored but never updated.
    pub trainable: bool,
}

impl ParamSpec {
    pub fn qualified_name(&self) -> String {
        format!("{}/{}", self.group.prefix(), self.name)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    specs: Vec<ParamSpec>,
    values: Vec<Vec<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            specs: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, spec: ParamSpec, init: Vec<T>) -> ParamId {
        assert_eq!(spec.numel(), init.len(), "init size for {}", spec.name);
        assert!(
            self.find(spec.group, &spec.name).is_none(),
            "duplicate parameter {}",
            spec.qualified_name()
        );
        self.specs.push(spec);
        self.values.push(init);
        ParamId(self.specs.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.specs.len()).map(ParamId)
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.values[id.0]
    }

    pub fn find(&self, group: Group, name: &str) -> Option<ParamId> {
        self.specs
            .iter()
            .position(|s| s.group == group && s.name == name)
            .map(ParamId)
    }

    pub fn find_qualified(&self, qualified: &str) -> Option<ParamId> {
        let (prefix, name) = qualified.split_once('/')?;
        let group = match prefix {
            "theta" => Group::Theta,
            "lambda" => Group::Lambda,
            _ => return None,
        };
        self.find(group, name)
    }

    pub fn group_ids(&self, group: Group) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(move |&id| self.spec(id).group == group)
    }

    /// Scalar count per group, trainable parameters only.
    pub fn count(&self, group: Group) -> usize {
        self.group_ids(group)
            .filter(|&id| self.spec(id).trainable)
            .map(|id| self.spec(id).numel())
            .sum()
    }

    /// Order-sensitive hash over the raw bits of one group's values.
    pub fn checksum(&self, group: Group) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for id in self.group_ids(group) {
            for &v in self.value(id) {
                h ^= v.bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
                h ^= h >> 29;
            }
        }
        h
    }

    /// Bitwise equality of one group with another store of the same layout.
    pub fn group_bits_eq(&self, other: &ParamStore<T>, group: Group) -> bool {
        self.specs == other.specs
            && self.group_ids(group).all(|id| {
                self.value(id)
                    .iter()
                    .zip(other.value(id))
                    .all(|(a, b)| a.bits() == b.bits())
            })
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            specs: self.specs.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect())
                .collect(),
        }
    }
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    values: Vec<Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Grads {
            values: store.values.iter().map(|v| vec![T::zero(); v.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.values {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.values[id.0]
    }

    /// True when every entry of the group is exactly zero.
    pub fn group_is_zero(&self, store: &ParamStore<T>, group: Group) -> bool {
        store
            .group_ids(group)
            .all(|id| self.get(id).iter().all(|v| *v == T::zero()))
    }

    pub fn group_max_abs(&self, store: &ParamStore<T>, group: Group) -> T {
        store
            .group_ids(group)
            .flat_map(|id| self.get(id).iter().map(|v| v.abs()))
            .fold(T::zero(), |a, b| a.max(b))
    }

    pub fn checksum(&self, store: &ParamStore<T>, group: Group) -> u64 {
        let mut h: u64 = 0x84222325cbf29ce4;
        for id in store.group_ids(group) {
            for &v in self.get(id) {
                h ^= v.bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
                h ^= h >> 29;
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(name: &str, group: Group, n: usize) -> ParamSpec {
        ParamSpec {
            name: name.into(),
            shape: vec![n],
            group,
            head: false,
            trainable: true,
        }
    }

    #[test]
    fn groups_and_checksums() {
        let mut s = ParamStore::<f32>::new();
        let a = s.register(spec("a", Group::Theta, 2), vec![1.0, 2.0]);
        let b = s.register(spec("a", Group::Lambda, 1), vec![3.0]);
        assert_eq!(s.find_qualified("theta/a"), Some(a));
        assert_eq!(s.find_qualified("lambda/a"), Some(b));
        assert_eq!(s.count(Group::Theta), 2);
        let before = s.checksum(Group::Theta);
        let lam = s.checksum(Group::Lambda);
        s.value_mut(b)[0] = 4.0;
        assert_eq!(s.checksum(Group::Theta), before);
        assert_ne!(s.checksum(Group::Lambda), lam);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.register(spec("a", Group::Theta, 1), vec![0.0]);
        s.register(spec("a", Group::Theta, 1), vec![0.0]);
    }
}
