//! Natural density and the center-of-distances utility.

use num::bigint::BigInt;
use num::rational::BigRational;

use crate::error::{Error, Result};
use crate::index_set::IndexSet;
use crate::scalar::Scalar;

/// |A ∩ [1, N]| / N, exactly.
pub fn natural_density_prefix(a: &IndexSet, n: u64) -> Result<BigRational> {
    if n == 0 {
        return Err(Error::InvalidArgument("density prefix needs N >= 1".into()));
    }
    Ok(BigRational::new(
        BigInt::from(a.count(n)),
        BigInt::from(n),
    ))
}

/// Z(X) = {α >= 0 : every x in X has some y in X with |x - y| = α}.
///
/// Exact over the pairwise-distance candidate set.
pub fn center_of_distances(points: &[Scalar]) -> Result<Vec<Scalar>> {
    if points.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut xs: Vec<Scalar> = points.to_vec();
    xs.sort_by(|a, b| a.cmp_val(b));
    xs.dedup_by(|a, b| a == b);

    let mut candidates: Vec<Scalar> = Vec::new();
    for (i, x) in xs.iter().enumerate() {
        for y in &xs[i..] {
            candidates.push(y.sub(x).abs());
        }
    }
    candidates.sort_by(|a, b| a.cmp_val(b));
    candidates.dedup_by(|a, b| a == b);

    let mut center = Vec::new();
    'outer: for alpha in candidates {
        for x in &xs {
            let hit = xs
                .iter()
                .any(|y| y.sub(x).abs() == alpha);
            if !hit {
                continue 'outer;
            }
        }
        center.push(alpha);
    }
    Ok(center)
}

/// Formats a center as the CLI prints it: comma-separated ascending values.
pub fn format_center(center: &[Scalar]) -> String {
    center
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn density_is_zero_trend(densities: &[BigRational], window: usize) -> bool {
    // Every `window`-block sliding maximum must be nonincreasing.
    if densities.len() < 2 * window {
        return false;
    }
    let maxima: Vec<&BigRational> = densities
        .windows(window)
        .map(|w| w.iter().max().expect("nonempty window"))
        .collect();
    maxima.windows(2).all(|m| m[1] <= m[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Mode;

    fn pts(values: &[i64]) -> Vec<Scalar> {
        values
            .iter()
            .map(|&v| Scalar::from_int(v, Mode::Exact))
            .collect()
    }

    #[test]
    fn density_prefixes() {
        let all = IndexSet::all();
        assert_eq!(
            natural_density_prefix(&all, 17).unwrap(),
            BigRational::from_integer(1.into())
        );
        let evens = IndexSet::residues(2, vec![0]).unwrap();
        assert_eq!(
            natural_density_prefix(&evens, 10).unwrap(),
            BigRational::new(1.into(), 2.into())
        );
        let squares = IndexSet::finite((1..=10).map(|k| k * k).collect()).unwrap();
        assert_eq!(
            natural_density_prefix(&squares, 100).unwrap(),
            BigRational::new(1.into(), 10.into())
        );
    }

    #[test]
    fn density_complement_identity() {
        let a = IndexSet::residues(3, vec![1]).unwrap();
        let c = IndexSet::complement(a.clone());
        for n in [1u64, 7, 30, 100] {
            let da = natural_density_prefix(&a, n).unwrap();
            let dc = natural_density_prefix(&c, n).unwrap();
            assert_eq!(da + dc, BigRational::from_integer(1.into()));
        }
    }

    #[test]
    fn center_examples() {
        assert_eq!(center_of_distances(&pts(&[0])).unwrap(), pts(&[0]));
        assert_eq!(center_of_distances(&pts(&[0, 1])).unwrap(), pts(&[0, 1]));
        // α = 2 fails at x = 1.
        assert_eq!(center_of_distances(&pts(&[0, 1, 2])).unwrap(), pts(&[0, 1]));
        assert!(center_of_distances(&[]).is_err());
    }

    #[test]
    fn center_always_contains_zero() {
        let c = center_of_distances(&pts(&[3, 5, 11])).unwrap();
        assert_eq!(c[0], Scalar::from_int(0, Mode::Exact));
    }
}
