use std::collections::BTreeMap;

use crate::numerics::{Scalar, Tensor};
use crate::{Error, Result};

/// Exhaustive, disjoint labeling that decides what the optimizer may
/// update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Frozen,
    Trainable,
}

/// Named parameter tensors with their partition labels. Iteration order is
/// the name order (BTreeMap), so walks over the store are deterministic.
#[derive(Clone, Debug)]
pub struct ParameterStore<F: Scalar> {
    entries: BTreeMap<String, (Tensor<F>, Partition)>,
}

impl<F: Scalar> Default for ParameterStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParameterStore<F> {
    pub fn new() -> Self {
        ParameterStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>, partition: Partition) {
        self.entries.insert(name.into(), (tensor, partition));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.entries
            .get(name)
            .map(|(t, _)| t)
            .ok_or_else(|| Error::State(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.entries
            .get_mut(name)
            .map(|(t, _)| t)
            .ok_or_else(|| Error::State(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn partition(&self, name: &str) -> Result<Partition> {
        self.entries
            .get(name)
            .map(|(_, p)| *p)
            .ok_or_else(|| Error::State(format!("missing parameter {name:?}")))
    }

    pub fn set_partition(&mut self, name: &str, partition: Partition) -> Result<()> {
        match self.entries.get_mut(name) {
            Some((_, p)) => {
                *p = partition;
                Ok(())
            }
            None => Err(Error::State(format!("missing parameter {name:?}"))),
        }
    }

    /// Relabel every parameter with `rule`.
    pub fn repartition(&mut self, rule: impl Fn(&str) -> Partition) {
        for (name, (_, p)) in self.entries.iter_mut() {
            *p = rule(name);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Name-ordered iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>, Partition)> {
        self.entries.iter().map(|(n, (t, p))| (n.as_str(), t, *p))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, (_, p))| *p == Partition::Trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Total scalar element count.
    pub fn total_values(&self) -> usize {
        self.entries.values().map(|(t, _)| t.numel()).sum()
    }

    pub fn trainable_values(&self) -> usize {
        self.entries
            .values()
            .filter(|(_, p)| *p == Partition::Trainable)
            .map(|(t, _)| t.numel())
            .sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParameterStore<G> {
        let mut out = ParameterStore::new();
        for (name, tensor, partition) in self.iter() {
            out.insert(name, tensor.cast::<G>(), partition);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_counts() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("a.w", Tensor::zeros(&[2, 3]), Partition::Frozen);
        s.insert("b.w", Tensor::zeros(&[4]), Partition::Trainable);
        assert_eq!(s.total_values(), 10);
        assert_eq!(s.trainable_values(), 4);
        assert_eq!(s.trainable_names(), vec!["b.w".to_string()]);
    }

    #[test]
    fn iteration_is_name_ordered() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("z", Tensor::zeros(&[1]), Partition::Frozen);
        s.insert("a", Tensor::zeros(&[1]), Partition::Frozen);
        s.insert("m", Tensor::zeros(&[1]), Partition::Frozen);
        let names: Vec<&str> = s.iter().map(|(n, _, _)| n).collect();
        assert_eq!(names, vec!["a", "m", "z"]);
    }

    #[test]
    fn missing_parameter_is_state_error() {
        let s = ParameterStore::<f32>::new();
        assert!(matches!(s.get("nope"), Err(Error::State(_))));
    }
}
