use rand::Rng;

use super::table::{FeatureValue, InteractionTable};
use crate::error::{Error, Result};

/// One item's episode: disjoint support and query records.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub item: u32,
    pub item_values: Vec<FeatureValue>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

/// Draws `n_support + n_query` distinct records of `item` uniformly without
/// replacement; the first `n_support` form the support set.
pub fn sample_task(
    table: &InteractionTable,
    item: u32,
    n_support: usize,
    n_query: usize,
    rng: &mut impl Rng,
) -> Result<Task> {
    let recs = table.records_of(item);
    let need = n_support + n_query;
    if recs.len() < need {
        return Err(Error::Sampling(format!(
            "item {item} has {} records, task needs {need}",
            recs.len()
        )));
    }
    let picked = rand::seq::index::sample(rng, recs.len(), need);
    let mut chosen: Vec<usize> = picked.iter().map(|i| recs[i]).collect();
    let query = chosen.split_off(n_support);
    Ok(Task {
        item,
        item_values: table.item_values(item).expect("item has records"),
        support: chosen,
        query,
    })
}
