//! Summation orders.
//!
//! Every reduction in the crate goes through one of two routines. `indexed_sum`
//! adds terms in the order given, which is the index-ascending order for
//! tensor axes that carry meaning (feature channels, grid cells). `canonical_sum`
//! adds the terms of an unordered set (neighbours of a node, members of a query
//! set, contributors to a cell) in ascending value order, so the result is a
//! function of the multiset and not of the storage order.

use std::cmp::Ordering;

use super::Scalar;

/// Sums terms in the order given.
pub fn indexed_sum<T: Scalar>(terms: impl IntoIterator<Item = T>) -> T {
    terms.into_iter().fold(T::zero(), |acc, t| acc + t)
}

/// Sums terms after sorting them by value; the result is independent of the
/// input order. Terms are expected to be finite.
pub fn canonical_sum<T: Scalar>(terms: &mut [T]) -> T {
    terms.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let mut it = terms.iter().copied();
    match it.next() {
        Some(first) => it.fold(first, |acc, t| acc + t),
        None => T::zero(),
    }
}

/// Which order a reduction over an axis uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SumOrder {
    /// Index-ascending; the axis has a fixed meaning.
    Indexed,
    /// Value-sorted; the axis indexes an unordered set.
    Canonical,
}
