//! Injective maps on an initial segment of the positive integers.
//!
//! A prefix stores only its deviations from the identity. Constrained
//! rearrangements touch a vanishing fraction of the positions they cover, so
//! identity-by-default keeps both memory and run files proportional to the
//! work actually done, not to the checkpoint indices reached.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::index_set::IndexSet;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PermutationPrefix {
    len: u64,
    deviations: BTreeMap<u64, u64>,
}

impl PermutationPrefix {
    pub fn identity(len: u64) -> Self {
        PermutationPrefix {
            len,
            deviations: BTreeMap::new(),
        }
    }

    pub fn from_deviations(len: u64, deviations: BTreeMap<u64, u64>) -> Result<Self> {
        for (&p, &v) in &deviations {
            if p == 0 || v == 0 {
                return Err(Error::InvalidArgument("positions are 1-based".into()));
            }
            if p > len {
                return Err(Error::InvalidArgument(format!(
                    "deviation at {p} beyond prefix length {len}"
                )));
            }
            if p == v {
                return Err(Error::InvalidArgument(format!(
                    "identity entry {p} stored as deviation"
                )));
            }
        }
        Ok(PermutationPrefix { len, deviations })
    }

    /// Dense one-line form: entry j of `values` is σ(j+1).
    pub fn from_values(values: &[u64]) -> Self {
        let mut deviations = BTreeMap::new();
        for (i, &v) in values.iter().enumerate() {
            let p = i as u64 + 1;
            if v != p {
                deviations.insert(p, v);
            }
        }
        PermutationPrefix {
            len: values.len() as u64,
            deviations,
        }
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// σ(j); None beyond the defined prefix.
    pub fn value(&self, j: u64) -> Option<u64> {
        if j == 0 || j > self.len {
            return None;
        }
        Some(self.deviations.get(&j).copied().unwrap_or(j))
    }

    pub fn deviations(&self) -> &BTreeMap<u64, u64> {
        &self.deviations
    }

    /// Records σ(position) = index. Extends the prefix length as needed.
    pub fn assign(&mut self, position: u64, index: u64) {
        debug_assert!(position >= 1 && index >= 1);
        if position != index {
            self.deviations.insert(position, index);
        }
        if position > self.len {
            self.len = position;
        }
    }

    /// Extends coverage to `len`, keeping identity on the new positions.
    pub fn extend_identity(&mut self, len: u64) {
        if len > self.len {
            self.len = len;
        }
    }

    /// Pairwise distinctness of assigned values. With identity defaults this
    /// reduces to: deviation targets are distinct, and any target that lands
    /// inside the prefix must itself be a vacated position.
    pub fn is_injective(&self) -> bool {
        let mut targets: Vec<u64> = self.deviations.values().copied().collect();
        targets.sort_unstable();
        if targets.windows(2).any(|w| w[0] == w[1]) {
            return false;
        }
        self.deviations
            .values()
            .all(|&t| t > self.len || self.deviations.contains_key(&t))
    }

    /// σ(j) = j for all assigned j outside A, and σ(j) ∈ A for j ∈ A.
    pub fn identity_off(&self, a: &IndexSet) -> bool {
        self.deviations
            .iter()
            .all(|(&p, &v)| a.member(p) && a.member(v))
    }

    /// Position where index `t` appears, if it does.
    pub fn position_of_in(&self, t: u64, inverse: &BTreeMap<u64, u64>) -> Option<u64> {
        if let Some(&p) = inverse.get(&t) {
            return Some(p);
        }
        if t <= self.len && !self.deviations.contains_key(&t) {
            return Some(t);
        }
        None
    }

    /// Inverse of the deviation map (target -> position).
    pub fn inverse_deviations(&self) -> BTreeMap<u64, u64> {
        self.deviations.iter().map(|(&p, &v)| (v, p)).collect()
    }
}

/// Read access to a possibly lazily extendable permutation.
pub trait PermutationView {
    /// σ(j), extending the underlying construction when it can.
    fn value_at(&self, j: u64) -> Result<u64>;
}

impl PermutationView for PermutationPrefix {
    fn value_at(&self, j: u64) -> Result<u64> {
        self.value(j).ok_or(Error::InsufficientDomain(j))
    }
}

/// Pointwise composition (outer ∘ inner)(j) = outer(inner(j)) on 1..=m.
pub fn compose(
    outer: &dyn PermutationView,
    inner: &dyn PermutationView,
    m: u64,
) -> Result<PermutationPrefix> {
    let mut out = PermutationPrefix::identity(m);
    for j in 1..=m {
        let mid = inner.value_at(j)?;
        let v = outer.value_at(mid)?;
        out.assign(j, v);
    }
    out.extend_identity(m);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_default_lookup() {
        let mut p = PermutationPrefix::identity(5);
        p.assign(2, 4);
        p.assign(4, 2);
        assert_eq!(p.value(1), Some(1));
        assert_eq!(p.value(2), Some(4));
        assert_eq!(p.value(4), Some(2));
        assert_eq!(p.value(6), None);
        assert!(p.is_injective());
    }

    #[test]
    fn injectivity_catches_unvacated_target() {
        // σ(2) = 3 while position 3 still maps to 3.
        let mut p = PermutationPrefix::identity(5);
        p.assign(2, 3);
        assert!(!p.is_injective());
        // Vacating 3 fixes it.
        p.assign(3, 2);
        assert!(p.is_injective());
    }

    #[test]
    fn injectivity_allows_targets_beyond_prefix() {
        let mut p = PermutationPrefix::identity(3);
        p.assign(2, 10);
        assert!(p.is_injective());
        // ...but duplicate targets fail.
        p.assign(3, 10);
        assert!(!p.is_injective());
    }

    #[test]
    fn constraint_checks() {
        let a = IndexSet::residues(4, vec![1, 2]).unwrap();
        let mut p = PermutationPrefix::identity(10);
        p.assign(5, 9);
        p.assign(9, 5);
        assert!(p.identity_off(&a));
        p.assign(6, 3); // 3 is off A
        assert!(!p.identity_off(&a));
    }

    #[test]
    fn compose_tables() {
        let outer = PermutationPrefix::from_values(&[3, 1, 2, 5, 4]);
        let inner = PermutationPrefix::from_values(&[2, 1, 5, 3, 4]);
        let c = compose(&outer, &inner, 5).unwrap();
        let got: Vec<u64> = (1..=5).map(|j| c.value(j).unwrap()).collect();
        assert_eq!(got, vec![1, 3, 4, 2, 5]);
    }

    #[test]
    fn compose_identity_cases() {
        let id = PermutationPrefix::identity(100);
        let pi = PermutationPrefix::from_values(&[2, 1, 4, 3]);
        let left = compose(&id, &pi, 4).unwrap();
        assert_eq!(left, pi);
        let right = compose(&pi, &PermutationPrefix::identity(4), 4).unwrap();
        assert_eq!(right, pi);
    }

    #[test]
    fn compose_insufficient_domain() {
        let short = PermutationPrefix::identity(2);
        let inner = PermutationPrefix::from_values(&[3, 1, 2]);
        assert!(matches!(
            compose(&short, &inner, 3),
            Err(Error::InsufficientDomain(3))
        ));
    }
}
