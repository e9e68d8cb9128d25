//! Synthetic data with planted, item-dependent pairwise interactions.
//!
//! Every item carries a `group` feature. The group selects a secret pair of
//! non-ID fields, and the item's labels are driven by how the instance's
//! values on that pair combine:
//!
//! * [`LabelRule::HalfMatch`]: positive iff both values fall in the same half
//!   of their vocabularies (an XOR of two binary indicators, no first-order
//!   signal at all).
//! * [`LabelRule::Product`]: each index maps to a signed level `z` in `(-1, 1)`
//!   and the label is drawn from `sigmoid(gain * z_a * z_b)`.
//!
//! Each item also carries a hidden popularity skew `β ~ uniform(-s, s)`: with
//! probability `|β|` the label is forced to `β > 0` instead of following the
//! rule. The skew is invisible in the features and only learnable from the
//! item's own records.
//!
//! Labels are then flipped with probability `noise`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schema::{FeatureDecl, FeatureKind, FeatureSchema, Owner};
use super::table::{FeatureValue, InteractionTable, RawInteraction};
use crate::diffcore::sigmoid;
use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LabelRule {
    HalfMatch,
    Product { gain: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_old_items: usize,
    pub n_new_items: usize,
    pub old_records: usize,
    pub new_records: usize,
    pub n_users: usize,
    /// Item attributes besides the ID and the group selector.
    pub item_fields: Vec<String>,
    /// User attributes besides the ID.
    pub user_fields: Vec<String>,
    pub field_vocab: usize,
    /// Candidate secret pairs by field name. Empty means "draw `n_groups`
    /// distinct pairs at random from all eligible fields".
    pub pairs: Vec<(String, String)>,
    pub n_groups: usize,
    pub noise: f64,
    /// Bound `s` of the hidden per-item skew.
    pub item_skew: f64,
    pub rule: LabelRule,
    pub embedding_dim: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_old_items: 80,
            n_new_items: 50,
            old_records: 260,
            new_records: 150,
            n_users: 600,
            item_fields: vec!["price".into()],
            user_fields: vec!["income".into(), "age".into(), "city".into()],
            field_vocab: 4,
            pairs: Vec::new(),
            n_groups: 3,
            noise: 0.1,
            item_skew: 0.5,
            rule: LabelRule::HalfMatch,
            embedding_dim: 16,
        }
    }
}

impl SynthConfig {
    pub fn schema(&self) -> Result<FeatureSchema> {
        let n_items = self.n_old_items + self.n_new_items;
        let mut features = vec![
            FeatureDecl::new("item_id", Owner::Item, FeatureKind::Single, n_items.max(1)),
            FeatureDecl::new("group", Owner::Item, FeatureKind::Single, self.n_groups.max(1)),
        ];
        for f in &self.item_fields {
            features.push(FeatureDecl::new(f, Owner::Item, FeatureKind::Single, self.field_vocab));
        }
        features.push(FeatureDecl::new("user_id", Owner::User, FeatureKind::Single, self.n_users.max(1)));
        for f in &self.user_fields {
            features.push(FeatureDecl::new(f, Owner::User, FeatureKind::Single, self.field_vocab));
        }
        FeatureSchema::new(features, self.embedding_dim)
    }

    fn validate(&self) -> Result<()> {
        if self.item_fields.len() + self.user_fields.len() < 2 {
            return Err(config_err!("synthetic data needs at least 2 non-ID fields"));
        }
        if self.field_vocab < 2 {
            return Err(config_err!("field_vocab must be >= 2"));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(config_err!("noise must lie in [0, 0.5]"));
        }
        if !(0.0..=1.0).contains(&self.item_skew) {
            return Err(config_err!("item_skew must lie in [0, 1]"));
        }
        if self.n_users == 0 || self.n_old_items + self.n_new_items == 0 {
            return Err(config_err!("need at least one user and one item"));
        }
        if self.pairs.is_empty() && self.n_groups == 0 {
            return Err(config_err!("n_groups must be >= 1"));
        }
        Ok(())
    }

    /// Expected positive fraction over uniformly drawn field values.
    pub fn target_positive_rate(&self) -> f64 {
        let v = self.field_vocab;
        let clean = match self.rule {
            LabelRule::HalfMatch => {
                let hi = (v - v / 2) as f64 / v as f64;
                hi * hi + (1.0 - hi) * (1.0 - hi)
            }
            LabelRule::Product { gain } => {
                let mut s = 0.0;
                for a in 0..v {
                    for b in 0..v {
                        s += sigmoid(gain * level(a as u32, v) * level(b as u32, v));
                    }
                }
                s / (v * v) as f64
            }
        };
        let s = self.item_skew;
        let skewed = clean * (1.0 - s / 2.0) + s / 4.0;
        skewed * (1.0 - self.noise) + (1.0 - skewed) * self.noise
    }
}

/// Signed level of a vocabulary index, symmetric around zero.
pub fn level(index: u32, vocab: usize) -> f64 {
    2.0 * (index as f64 + 0.5) / vocab as f64 - 1.0
}

fn upper_half(index: u32, vocab: usize) -> bool {
    index as usize >= vocab / 2
}

/// Which fields drive each item's labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRegistry {
    pub rule: LabelRule,
    pub field_vocab: usize,
    /// Item to schema feature indices of its secret pair.
    pub pairs: BTreeMap<u32, (usize, usize)>,
    /// Item to its hidden skew `β`.
    pub skew: BTreeMap<u32, f64>,
    /// Item ids with enough records to be "old".
    pub old_items: Vec<u32>,
    pub new_items: Vec<u32>,
}

impl PairRegistry {
    /// Noise-free label probability of an instance, skew included.
    pub fn clean_probability(&self, item: u32, values: &[FeatureValue]) -> f64 {
        let beta = self.skew.get(&item).copied().unwrap_or(0.0);
        (1.0 - beta.abs()) * self.rule_probability(item, values) + beta.max(0.0)
    }

    /// Label probability under the pair rule alone.
    pub fn rule_probability(&self, item: u32, values: &[FeatureValue]) -> f64 {
        let (a, b) = self.pairs[&item];
        let va = values[a].as_single().expect("categorical");
        let vb = values[b].as_single().expect("categorical");
        match self.rule {
            LabelRule::HalfMatch => {
                if upper_half(va, self.field_vocab) == upper_half(vb, self.field_vocab) {
                    1.0
                } else {
                    0.0
                }
            }
            LabelRule::Product { gain } => {
                sigmoid(gain * level(va, self.field_vocab) * level(vb, self.field_vocab))
            }
        }
    }
}

pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<(InteractionTable, PairRegistry)> {
    config.validate()?;
    let schema = Arc::new(config.schema()?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let n_item_feats = schema.n_item();
    let group_idx = 1;
    let eligible: Vec<usize> = (0..schema.n_features())
        .filter(|&m| m != 0 && m != group_idx && m != schema.user_id_index())
        .collect();
    let candidate_pairs: Vec<(usize, usize)> = if config.pairs.is_empty() {
        let mut all = Vec::new();
        for (i, &a) in eligible.iter().enumerate() {
            for &b in &eligible[i + 1..] {
                all.push((a, b));
            }
        }
        all.shuffle(&mut rng);
        all.truncate(config.n_groups);
        all
    } else {
        config
            .pairs
            .iter()
            .map(|(a, b)| {
                let ia = schema.index_of(a).filter(|i| eligible.contains(i));
                let ib = schema.index_of(b).filter(|i| eligible.contains(i));
                match (ia, ib) {
                    (Some(x), Some(y)) if x != y => Ok((x, y)),
                    _ => Err(config_err!("pair ({a}, {b}) does not name two distinct attribute fields")),
                }
            })
            .collect::<Result<_>>()?
    };
    if candidate_pairs.len() > schema.feature(group_idx).vocab {
        return Err(config_err!(
            "{} candidate pairs but only {} groups",
            candidate_pairs.len(),
            schema.feature(group_idx).vocab
        ));
    }
    let n_groups = candidate_pairs.len();

    let users: Vec<Vec<u32>> = (0..config.n_users)
        .map(|_| {
            (0..config.user_fields.len())
                .map(|_| rng.gen_range(0..config.field_vocab as u32))
                .collect()
        })
        .collect();

    let n_items = config.n_old_items + config.n_new_items;
    let mut registry = PairRegistry {
        rule: config.rule,
        field_vocab: config.field_vocab,
        pairs: BTreeMap::new(),
        skew: BTreeMap::new(),
        old_items: Vec::new(),
        new_items: Vec::new(),
    };
    let mut rows = Vec::new();
    for item in 0..n_items as u32 {
        let group = (item as usize % n_groups) as u32;
        let attrs: Vec<u32> = (0..config.item_fields.len())
            .map(|_| rng.gen_range(0..config.field_vocab as u32))
            .collect();
        let beta = if config.item_skew > 0.0 {
            rng.gen_range(-config.item_skew..=config.item_skew)
        } else {
            0.0
        };
        registry.pairs.insert(item, candidate_pairs[group as usize]);
        registry.skew.insert(item, beta);
        let n_records = if (item as usize) < config.n_old_items {
            registry.old_items.push(item);
            config.old_records
        } else {
            registry.new_items.push(item);
            config.new_records
        };
        for _ in 0..n_records {
            let user = rng.gen_range(0..config.n_users as u32);
            let mut values = Vec::with_capacity(schema.n_features());
            values.push(FeatureValue::Single(item));
            values.push(FeatureValue::Single(group));
            values.extend(attrs.iter().map(|&v| FeatureValue::Single(v)));
            debug_assert_eq!(values.len(), n_item_feats);
            values.push(FeatureValue::Single(user));
            values.extend(users[user as usize].iter().map(|&v| FeatureValue::Single(v)));
            let p = registry.clean_probability(item, &values);
            let clean = rng.gen_bool(p.clamp(0.0, 1.0));
            let flip = config.noise > 0.0 && rng.gen_bool(config.noise);
            rows.push(RawInteraction {
                values,
                label: u8::from(clean != flip),
                timestamp: rng.gen_range(0..1_000_000),
            });
        }
    }
    Ok((InteractionTable::new(schema, rows)?, registry))
}
