//! Old/new item split by frequency and timestamp-ordered warm-up phases.

use std::collections::{BTreeMap, BTreeSet};

use super::table::InteractionTable;
use crate::error::{config_err, contract_err, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemSplit {
    pub old: BTreeSet<u32>,
    pub new: BTreeSet<u32>,
    pub threshold: usize,
    pub shots: usize,
}

/// Old items have more than `threshold` records; new items fewer than
/// `threshold` but more than `3 * shots`. Everything else is dropped.
pub fn split_items(table: &InteractionTable, threshold: usize, shots: usize) -> Result<ItemSplit> {
    if threshold <= 3 * shots {
        return Err(config_err!(
            "threshold N = {threshold} must exceed 3K = {}",
            3 * shots
        ));
    }
    let mut old = BTreeSet::new();
    let mut new = BTreeSet::new();
    for (item, count) in table.item_counts() {
        if count > threshold {
            old.insert(item);
        } else if count < threshold && count > 3 * shots {
            new.insert(item);
        }
    }
    Ok(ItemSplit {
        old,
        new,
        threshold,
        shots,
    })
}

/// Record positions of one new item, split into the three warm-up phases and
/// the test remainder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemPhases {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    pub c: Vec<usize>,
    pub test: Vec<usize>,
}

impl ItemPhases {
    /// Cumulative warm-up support after `phases` phases (1 = A, 2 = A+B, 3 = A+B+C).
    pub fn cumulative(&self, phases: usize) -> Vec<usize> {
        [&self.a, &self.b, &self.c]
            .iter()
            .take(phases)
            .flat_map(|p| p.iter().copied())
            .collect()
    }

    pub fn all(&self) -> Vec<usize> {
        let mut v = self.cumulative(3);
        v.extend(&self.test);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhasePlan {
    pub shots: usize,
    pub items: BTreeMap<u32, ItemPhases>,
}

/// Sorts each new item's records by timestamp (stable on input order) and
/// cuts them into K / K / K / rest.
pub fn build_phases(table: &InteractionTable, split: &ItemSplit) -> Result<PhasePlan> {
    let k = split.shots;
    let mut items = BTreeMap::new();
    for &item in &split.new {
        let mut recs = table.records_of(item).to_vec();
        if recs.len() <= 3 * k {
            return Err(contract_err!(
                "item {item} has {} records, needs more than {}",
                recs.len(),
                3 * k
            ));
        }
        recs.sort_by_key(|&r| table.row(r).timestamp);
        let test = recs.split_off(3 * k);
        let c = recs.split_off(2 * k);
        let b = recs.split_off(k);
        items.insert(item, ItemPhases { a: recs, b, c, test });
    }
    Ok(PhasePlan { shots: k, items })
}
