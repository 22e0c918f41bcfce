//! Ordered, named parameter collections. Iteration order is the insertion
//! order and is part of the reproducibility contract: initialization,
//! serialization, the SGD update and the EMA update all walk entries in
//! this order.

use std::collections::BTreeMap;

use thiserror::Error;

use super::array::Array;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("duplicate parameter name `{0}`")]
    Duplicate(String),
    #[error("parameter `{0}` not found")]
    Missing(String),
    #[error("bundles are not shape-congruent at `{name}`: {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("bundles hold different parameter sets ({left} vs {right} entries)")]
    SetMismatch { left: usize, right: usize },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamBundle {
    entries: Vec<(String, Array)>,
    index: BTreeMap<String, usize>,
}

impl ParamBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<(), BundleError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(BundleError::Duplicate(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Result<&Array, BundleError> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| BundleError::Missing(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array, BundleError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(BundleError::Missing(name.to_string())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.entries.iter_mut().map(|(n, a)| (n.as_str(), a))
    }

    /// Checks that `other` holds exactly the same names with the same shapes,
    /// in the same order.
    pub fn check_congruent(&self, other: &ParamBundle) -> Result<(), BundleError> {
        if self.entries.len() != other.entries.len() {
            return Err(BundleError::SetMismatch {
                left: self.entries.len(),
                right: other.entries.len(),
            });
        }
        for ((ln, la), (rn, ra)) in self.entries.iter().zip(&other.entries) {
            if ln != rn {
                return Err(BundleError::Missing(rn.clone()));
            }
            if la.shape() != ra.shape() {
                return Err(BundleError::ShapeMismatch {
                    name: ln.clone(),
                    left: la.shape().to_vec(),
                    right: ra.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Largest absolute entry difference against a congruent bundle.
    pub fn max_abs_diff(&self, other: &ParamBundle) -> Result<f64, BundleError> {
        self.check_congruent(other)?;
        let mut worst = 0.0f64;
        for ((_, la), (_, ra)) in self.entries.iter().zip(&other.entries) {
            worst = worst.max(la.max_abs_diff(ra));
        }
        Ok(worst)
    }

    /// A congruent bundle with every value set to zero (gradient
    /// accumulator shape).
    pub fn zeros_like(&self) -> ParamBundle {
        let mut out = ParamBundle::new();
        for (name, arr) in &self.entries {
            out.insert(name.clone(), Array::zeros(arr.shape().to_vec()))
                .expect("source names are unique");
        }
        out
    }

    /// `self += factor · other`, entry by entry. Used to average per-sample
    /// gradients into a batch gradient.
    pub fn axpy(&mut self, other: &ParamBundle, factor: f64) -> Result<(), BundleError> {
        self.check_congruent(other)?;
        for ((_, acc), (_, d)) in self.entries.iter_mut().zip(&other.entries) {
            for (a, &v) in acc.data_mut().iter_mut().zip(d.data()) {
                *a += factor * v;
            }
        }
        Ok(())
    }

    /// `self *= factor`, entry by entry. Together with [`axpy`] this covers
    /// momentum-style running buffers (`v = β·v + g`).
    ///
    /// [`axpy`]: ParamBundle::axpy
    pub fn scale_in_place(&mut self, factor: f64) {
        for (_, arr) in self.entries.iter_mut() {
            for v in arr.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Content hash over names, shapes and little-endian value bytes.
    pub fn content_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for (name, arr) in &self.entries {
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(0);
            for &d in arr.shape() {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in arr.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::fnv1a64(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_preserved() {
        let mut b = ParamBundle::new();
        b.insert("z", Array::scalar(1.0)).unwrap();
        b.insert("a", Array::scalar(2.0)).unwrap();
        let names: Vec<&str> = b.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["z", "a"]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut b = ParamBundle::new();
        b.insert("w", Array::scalar(0.0)).unwrap();
        assert!(matches!(
            b.insert("w", Array::scalar(1.0)),
            Err(BundleError::Duplicate(_))
        ));
    }

    #[test]
    fn congruence_catches_shape_drift() {
        let mut a = ParamBundle::new();
        a.insert("w", Array::zeros(vec![2, 3])).unwrap();
        let mut b = ParamBundle::new();
        b.insert("w", Array::zeros(vec![3, 2])).unwrap();
        assert!(matches!(
            a.check_congruent(&b),
            Err(BundleError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn axpy_accumulates_scaled_entries() {
        let mut acc = ParamBundle::new();
        acc.insert("w", Array::from_vec(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let zero = acc.zeros_like();
        assert_eq!(zero.get("w").unwrap().data(), &[0.0, 0.0]);
        let mut sum = acc.zeros_like();
        sum.axpy(&acc, 0.5).unwrap();
        sum.axpy(&acc, 0.5).unwrap();
        assert_eq!(sum.get("w").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn scale_then_axpy_forms_a_momentum_update() {
        let mut vel = ParamBundle::new();
        vel.insert("w", Array::from_vec(vec![2], vec![1.0, -2.0]).unwrap())
            .unwrap();
        let mut grad = vel.zeros_like();
        grad.get_mut("w").unwrap().data_mut().copy_from_slice(&[0.5, 0.5]);
        vel.scale_in_place(0.9);
        vel.axpy(&grad, 1.0).unwrap();
        assert_eq!(vel.get("w").unwrap().data(), &[1.4, -1.3]);
    }

    #[test]
    fn content_hash_tracks_values() {
        let mut a = ParamBundle::new();
        a.insert("w", Array::from_vec(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let h1 = a.content_hash();
        a.get_mut("w").unwrap().data_mut()[0] = 1.5;
        assert_ne!(h1, a.content_hash());
    }
}
