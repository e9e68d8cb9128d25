//! Feature embeddings.
//!
//! Feature `m` owns a matrix `emb.<name>` with one row per vocabulary entry
//! (one row for continuous features). Single-valued features select a row,
//! multi-valued features sum the selected rows, continuous features scale the
//! single row by the value.
//!
//! Batched embeddings use a *feature-major* layout: for `B` instances the
//! result is `[N * B, N_d]` with row `m * B + b` holding feature `m` of
//! instance `b`.

use std::sync::Arc;

use rand::Rng;

use crate::dataio::table::check_value;
use crate::dataio::{FeatureKind, FeatureSchema, FeatureValue, RawInteraction};
use crate::diffcore::{Bound, ParamStore, RowMap, Tape, Tensor, Var};
use crate::error::{contract_err, dim_err, Result};
use crate::metatrain::ItemPhi;

pub fn table_name(schema: &FeatureSchema, m: usize) -> String {
    format!("emb.{}", schema.feature(m).name)
}

/// Embedding rows are drawn from `uniform(-1, 1)`: a lookup activates a single
/// input unit, so the initializer's fan-in is 1.
pub fn init_embedding_row(dim: usize, rng: &mut impl Rng) -> Tensor {
    crate::diffcore::init_uniform(1, dim, 1, rng)
}

pub fn init_embeddings(schema: &FeatureSchema, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
    for (m, f) in schema.features().iter().enumerate() {
        let t = crate::diffcore::init_uniform(f.table_rows(), schema.embedding_dim(), 1, rng);
        store.insert(table_name(schema, m), t, true)?;
    }
    Ok(())
}

fn row_entries(schema: &FeatureSchema, m: usize, out_row: usize, value: &FeatureValue) -> Result<Vec<(usize, usize, f64)>> {
    check_value(schema, m, value).map_err(|msg| contract_err!("feature `{}`: {msg}", schema.feature(m).name))?;
    Ok(match value {
        FeatureValue::Single(v) => vec![(out_row, *v as usize, 1.0)],
        FeatureValue::Multi(vs) => vs.iter().map(|v| (out_row, *v as usize, 1.0)).collect(),
        FeatureValue::Continuous(x) => vec![(out_row, 0, *x)],
    })
}

/// Embedding of a single feature value.
pub fn embed_feature(table: &Tensor, schema: &FeatureSchema, m: usize, value: &FeatureValue) -> Result<Tensor> {
    let decl = schema.feature(m);
    if table.rows() != decl.table_rows() || table.cols() != schema.embedding_dim() {
        return Err(dim_err!(
            "table for `{}` is {:?}, expected {}x{}",
            decl.name,
            table.shape(),
            decl.table_rows(),
            schema.embedding_dim()
        ));
    }
    let mut out = Tensor::zeros(1, table.cols());
    for (_, row, coef) in row_entries(schema, m, 0, value)? {
        for (o, s) in out.data_mut().iter_mut().zip(table.row(row)) {
            *o += coef * s;
        }
    }
    Ok(out)
}

/// `[N_v + N_u, N_d]` embedding matrix of one interaction, rows in schema order.
///
/// With `item_override`, the item ID row is the item-specific `e_ID` instead of
/// the shared table row.
pub fn embed_instance(
    store: &ParamStore,
    schema: &FeatureSchema,
    interaction: &RawInteraction,
    item_override: Option<&ItemPhi>,
) -> Result<Tensor> {
    let d = schema.embedding_dim();
    let mut data = Vec::with_capacity(schema.n_features() * d);
    for (m, value) in interaction.values.iter().enumerate() {
        let row = match (m, item_override) {
            (0, Some(phi)) => phi.e_id.clone(),
            _ => embed_feature(store.get(&table_name(schema, m))?, schema, m, value)?,
        };
        data.extend_from_slice(row.data());
    }
    Tensor::new(schema.n_features(), d, data)
}

/// Feature-major batch embedding `[N * B, N_d]` on the tape.
pub fn embed_batch(
    tape: &mut Tape,
    bound: &Bound,
    schema: &FeatureSchema,
    rows: &[&RawInteraction],
    e_id: Option<Var>,
) -> Result<Var> {
    let b = rows.len();
    if b == 0 {
        return Err(contract_err!("cannot embed an empty batch"));
    }
    let mut blocks = Vec::with_capacity(schema.n_features());
    for m in 0..schema.n_features() {
        if m == 0 {
            if let Some(e) = e_id {
                blocks.push(tape.broadcast_rows(e, b)?);
                continue;
            }
        }
        let mut entries = Vec::with_capacity(b);
        for (i, r) in rows.iter().enumerate() {
            entries.extend(row_entries(schema, m, i, &r.values[m])?);
        }
        let table = bound.var(&table_name(schema, m))?;
        let map = RowMap::new(schema.feature(m).table_rows(), b, entries)?;
        blocks.push(tape.row_combine(table, Arc::new(map))?);
    }
    tape.concat_rows(&blocks)
}

/// Item-feature embeddings `e_1, …, e_{N_v}` concatenated into `[1, N_v * N_d]`.
pub fn embed_item_features(
    tape: &mut Tape,
    bound: &Bound,
    schema: &FeatureSchema,
    item_values: &[FeatureValue],
    e_id: Option<Var>,
) -> Result<Var> {
    if item_values.len() != schema.n_item() {
        return Err(dim_err!(
            "{} item values for {} item features",
            item_values.len(),
            schema.n_item()
        ));
    }
    let mut parts = Vec::with_capacity(schema.n_item());
    for (m, value) in item_values.iter().enumerate() {
        if m == 0 {
            if let Some(e) = e_id {
                parts.push(e);
                continue;
            }
        }
        let table = bound.var(&table_name(schema, m))?;
        let map = RowMap::new(schema.feature(m).table_rows(), 1, row_entries(schema, m, 0, value)?)?;
        parts.push(tape.row_combine(table, Arc::new(map))?);
    }
    tape.concat_cols(&parts)
}

/// Kind-aware check used by callers that build values by hand.
pub fn is_categorical(schema: &FeatureSchema, m: usize) -> bool {
    schema.feature(m).kind != FeatureKind::Continuous
}
