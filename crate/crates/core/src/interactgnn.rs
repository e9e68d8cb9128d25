//! Order-aware message passing, attention fusion across layers and the
//! contribution-weighted predictor.
//!
//! Layer `l` computes `h_m ← op(h_m, (Σ_n A[m][n] h⁰_n) W)`: messages always
//! come from the input embeddings, so each layer raises the interaction order
//! by exactly one. Row vectors are multiplied on the left of weight matrices.
//!
//! The batched tape functions use the feature-major layout of
//! [`crate::embed::embed_batch`]: a `B`-instance batch of one item is
//! `[N * B, N_d]` with row `m * B + b`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{FeatureSchema, RawInteraction};
use crate::diffcore::{init_uniform, Bound, EwiseOp, Mlp, MlpSpec, ParamStore, RowMap, Tape, Tensor, Var};
use crate::error::{config_err, contract_err, Result};
use crate::graphgen::{build_stack_vars, HyperParams, RefineOptions};

/// Architecture of the shared network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub layers: usize,
    pub heads: usize,
    pub op: EwiseOp,
    pub hyper_hidden: Vec<usize>,
    pub c1_hidden: Vec<usize>,
    pub c2_hidden: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            op: EwiseOp::Product,
            hyper_hidden: vec![32],
            c1_hidden: vec![64],
            c2_hidden: vec![16],
        }
    }
}

impl NetConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.layers == 0 {
            return Err(config_err!("gnn_layers must be >= 1"));
        }
        check_heads(self.heads, dim)
    }
}

fn check_heads(heads: usize, dim: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(config_err!("heads = {heads} must divide embedding_dim = {dim}"));
    }
    Ok(())
}

pub fn gnn_weight_name(l: usize) -> String {
    format!("gnn.{l}.w")
}

pub const ATTN_Q: &str = "attn.q";
pub const ATTN_K: &str = "attn.k";
pub const ATTN_V: &str = "attn.v";

/// One GNN layer over a batch.
pub fn gnn_layer_var(tape: &mut Tape, h_prev: Var, h0: Var, a: Var, wg: Var, op: EwiseOp) -> Result<Var> {
    let n = tape.value(a).rows();
    let [rows, d] = tape.value(h0).shape();
    if tape.value(a).cols() != n || rows % n != 0 || tape.value(h_prev).shape() != [rows, d] {
        return Err(contract_err!(
            "gnn layer: adjacency {:?}, states {:?} and {:?}",
            tape.value(a).shape(),
            tape.value(h_prev).shape(),
            tape.value(h0).shape()
        ));
    }
    let b = rows / n;
    let wide = tape.reshape(h0, n, b * d)?;
    let agg = tape.matmul(a, wide)?;
    let agg = tape.reshape(agg, rows, d)?;
    let msg = tape.matmul(agg, wg)?;
    tape.ewise(h_prev, msg, op)
}

/// Residual variant `h + h ⊙ (Σ A h) W`, used only as an order contrast.
pub fn residual_layer_var(tape: &mut Tape, h_prev: Var, a: Var, wg: Var) -> Result<Var> {
    let n = tape.value(a).rows();
    let [rows, d] = tape.value(h_prev).shape();
    let wide = tape.reshape(h_prev, n, rows / n * d)?;
    let agg = tape.matmul(a, wide)?;
    let agg = tape.reshape(agg, rows, d)?;
    let msg = tape.matmul(agg, wg)?;
    let prod = tape.mul(h_prev, msg)?;
    tape.add(h_prev, prod)
}

/// States `h⁰ … h^{N_l}`.
pub fn run_gnn_var(tape: &mut Tape, h0: Var, a: &[Var], wg: &[Var], op: EwiseOp) -> Result<Vec<Var>> {
    if a.len() != wg.len() {
        return Err(contract_err!("{} adjacency layers for {} weight layers", a.len(), wg.len()));
    }
    let mut states = vec![h0];
    for (al, wl) in a.iter().zip(wg) {
        let prev = *states.last().unwrap();
        states.push(gnn_layer_var(tape, prev, h0, *al, *wl, op)?);
    }
    Ok(states)
}

/// Multi-head attention across the layer states of every row. Returns the
/// fused states, one var per layer, each shaped like the inputs.
pub fn attention_fuse_var(tape: &mut Tape, states: &[Var], wq: Var, wk: Var, wv: Var, heads: usize) -> Result<Vec<Var>> {
    let d = tape.value(states[0]).cols();
    check_heads(heads, d)?;
    let dh = d / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let n_l = states.len();
    let mut q = Vec::with_capacity(n_l);
    let mut k = Vec::with_capacity(n_l);
    let mut v = Vec::with_capacity(n_l);
    for &s in states {
        q.push(tape.matmul(s, wq)?);
        k.push(tape.matmul(s, wk)?);
        v.push(tape.matmul(s, wv)?);
    }
    let mut fused_heads: Vec<Vec<Var>> = vec![Vec::with_capacity(heads); n_l];
    for h in 0..heads {
        let mut qh = Vec::with_capacity(n_l);
        let mut kh = Vec::with_capacity(n_l);
        let mut vh = Vec::with_capacity(n_l);
        for i in 0..n_l {
            qh.push(tape.slice_cols(q[i], h * dh, dh)?);
            kh.push(tape.slice_cols(k[i], h * dh, dh)?);
            vh.push(tape.slice_cols(v[i], h * dh, dh)?);
        }
        for (i, fused) in fused_heads.iter_mut().enumerate() {
            let mut scores = Vec::with_capacity(n_l);
            for kj in &kh {
                let p = tape.mul(qh[i], *kj)?;
                scores.push(tape.row_sum(p)?);
            }
            let s = tape.concat_cols(&scores)?;
            let s = tape.scale(s, scale)?;
            let w = tape.softmax_rows(s)?;
            let mut acc = None;
            for (j, vj) in vh.iter().enumerate() {
                let wj = tape.slice_cols(w, j, 1)?;
                let wj = tape.broadcast_cols(wj, dh)?;
                let term = tape.mul(wj, *vj)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            fused.push(acc.unwrap());
        }
    }
    fused_heads
        .into_iter()
        .map(|parts| if parts.len() == 1 { Ok(parts[0]) } else { tape.concat_cols(&parts) })
        .collect()
}

fn to_instance_major(tape: &mut Tape, f: Var, nodes: usize) -> Result<Var> {
    let rows = tape.value(f).rows();
    let b = rows / nodes;
    let entries = (0..b)
        .flat_map(|i| (0..nodes).map(move |m| (i * nodes + m, m * b + i, 1.0)))
        .collect();
    let map = RowMap::new(rows, rows, entries)?;
    tape.row_combine(f, Arc::new(map))
}

/// Contribution factors `[B, N]` from the flattened fused matrices `[N * B, W]`.
pub fn contribution_var(tape: &mut Tape, bound: &Bound, c1: &Mlp, flat: Var, nodes: usize) -> Result<Var> {
    let [rows, w] = tape.value(flat).shape();
    let perm = to_instance_major(tape, flat, nodes)?;
    let x = tape.reshape(perm, rows / nodes, nodes * w)?;
    let logits = c1.forward(tape, bound, x)?;
    tape.sigmoid(logits)
}

/// Logits `s = Σ_m c_m · MLP_{c2}(Ĥ_m)`, shaped `[B, 1]`.
pub fn predict_var(tape: &mut Tape, bound: &Bound, c2: &Mlp, flat: Var, c: Var, nodes: usize) -> Result<Var> {
    let rows = tape.value(flat).rows();
    let o = c2.forward(tape, bound, flat)?;
    let o = tape.reshape(o, nodes, rows / nodes)?;
    let o = tape.transpose(o)?;
    let t = tape.mul(c, o)?;
    tape.row_sum(t)
}

/// The shared network: hypernetwork, embeddings, GNN, attention and predictor.
#[derive(Debug, Clone)]
pub struct EmergNet {
    pub schema: Arc<FeatureSchema>,
    pub config: NetConfig,
    pub hyper: HyperParams,
    pub c1: Mlp,
    pub c2: Mlp,
}

/// Per-item graph handles on a tape.
#[derive(Debug, Clone)]
pub struct ItemGraph {
    pub a: Vec<Var>,
    pub e_id: Option<Var>,
}

impl EmergNet {
    pub fn new(schema: Arc<FeatureSchema>, config: NetConfig) -> Result<Self> {
        let d = schema.embedding_dim();
        config.validate(d)?;
        let nodes = schema.n_features();
        let width = (config.layers + 1) * d;
        let mut w1 = vec![nodes * width];
        w1.extend_from_slice(&config.c1_hidden);
        w1.push(nodes);
        let mut w2 = vec![width];
        w2.extend_from_slice(&config.c2_hidden);
        w2.push(1);
        Ok(Self {
            hyper: HyperParams::new(&schema, &config.hyper_hidden)?,
            c1: Mlp::new("c1", w1)?,
            c2: Mlp::new("c2", w2)?,
            schema,
            config,
        })
    }

    pub fn nodes(&self) -> usize {
        self.schema.n_features()
    }

    /// Creates every shared parameter.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let d = self.schema.embedding_dim();
        crate::embed::init_embeddings(&self.schema, store, rng)?;
        self.hyper.init(store, rng)?;
        for l in 0..self.config.layers {
            store.insert(gnn_weight_name(l), init_uniform(d, d, d, rng), true)?;
        }
        for name in [ATTN_Q, ATTN_K, ATTN_V] {
            store.insert(name, init_uniform(d, d, d, rng), true)?;
        }
        self.c1.init(store, rng)?;
        self.c2.init(store, rng)
    }

    /// Checks that `store` holds every parameter with the expected shape.
    pub fn check_store(&self, store: &ParamStore) -> Result<()> {
        let mut fresh = ParamStore::new();
        self.init(&mut fresh, &mut rand::rngs::mock::StepRng::new(0, 1))?;
        for (name, p) in fresh.iter() {
            let have = store
                .get(name)
                .map_err(|_| crate::Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if !have.same_shape(&p.value) {
                return Err(crate::Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, schema needs {:?}",
                    have.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Refinement chain on the tape from a dense `Ā¹`.
    pub fn graph(&self, tape: &mut Tape, bar1: Var, refine: &RefineOptions, e_id: Option<Var>) -> Result<ItemGraph> {
        let sv = build_stack_vars(tape, bar1, refine)?;
        Ok(ItemGraph { a: sv.a, e_id })
    }

    /// Logits `[B, 1]` for a batch of one item's records.
    pub fn logits(&self, tape: &mut Tape, bound: &Bound, graph: &ItemGraph, rows: &[&RawInteraction]) -> Result<Var> {
        if graph.a.len() != self.config.layers {
            return Err(contract_err!(
                "{} adjacency layers for a {}-layer network",
                graph.a.len(),
                self.config.layers
            ));
        }
        let h0 = crate::embed::embed_batch(tape, bound, &self.schema, rows, graph.e_id)?;
        let wg = (0..self.config.layers)
            .map(|l| bound.var(&gnn_weight_name(l)))
            .collect::<Result<Vec<_>>>()?;
        let states = run_gnn_var(tape, h0, &graph.a, &wg, self.config.op)?;
        let fused = attention_fuse_var(
            tape,
            &states,
            bound.var(ATTN_Q)?,
            bound.var(ATTN_K)?,
            bound.var(ATTN_V)?,
            self.config.heads,
        )?;
        let flat = tape.concat_cols(&fused)?;
        let c = contribution_var(tape, bound, &self.c1, flat, self.nodes())?;
        predict_var(tape, bound, &self.c2, flat, c, self.nodes())
    }
}

// Single-instance numeric API.

/// Per-layer message-passing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnWeights {
    pub wg: Vec<Tensor>,
    pub op: EwiseOp,
}

/// Query/key/value projections; head `h` uses columns `h*N_d/N_h ..`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub heads: usize,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorWeights {
    pub c1: MlpSpec,
    pub c2: MlpSpec,
}

/// `h⁰ … h^{N_l}` of one instance, each `[N, N_d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStates {
    pub layers: Vec<Tensor>,
}

impl NodeStates {
    /// `H_m`: feature `m`'s state in every layer, `[N_l + 1, N_d]`.
    pub fn history(&self, m: usize) -> Tensor {
        let d = self.layers[0].cols();
        Tensor::from_fn(self.layers.len(), d, |l, c| self.layers[l].get(m, c))
    }
}

pub fn gnn_layer(h_prev: &Tensor, h0: &Tensor, a: &Tensor, wg: &Tensor, op: EwiseOp) -> Result<Tensor> {
    if a.rows() != a.cols() || a.rows() != h0.rows() || h_prev.shape() != h0.shape() || wg.shape() != [h0.cols(), h0.cols()] {
        return Err(contract_err!(
            "gnn layer: adjacency {:?}, states {:?}/{:?}, weight {:?}",
            a.shape(),
            h_prev.shape(),
            h0.shape(),
            wg.shape()
        ));
    }
    let mut tape = Tape::new();
    let vs = [h_prev, h0, a, wg].map(|t| tape.constant(t.clone()));
    let out = gnn_layer_var(&mut tape, vs[0], vs[1], vs[2], vs[3], op)?;
    Ok(tape.value(out).clone())
}

pub fn run_gnn(embeds: &Tensor, stack: &crate::graphgen::AdjacencyStack, weights: &GnnWeights) -> Result<NodeStates> {
    if stack.layers() != weights.wg.len() {
        return Err(contract_err!(
            "adjacency stack depth {} for {} GNN layers",
            stack.layers(),
            weights.wg.len()
        ));
    }
    let mut layers = vec![embeds.clone()];
    for (a, wg) in stack.a.iter().zip(&weights.wg) {
        let next = gnn_layer(layers.last().unwrap(), embeds, a, wg, weights.op)?;
        layers.push(next);
    }
    Ok(NodeStates { layers })
}

/// Fuses one feature's history `[N_l + 1, N_d]`.
pub fn attention_fuse(h: &Tensor, aw: &AttentionWeights) -> Result<Tensor> {
    check_heads(aw.heads, h.cols())?;
    let mut tape = Tape::new();
    let rows: Vec<Var> = (0..h.rows())
        .map(|r| tape.constant(Tensor::new(1, h.cols(), h.row(r).to_vec()).unwrap()))
        .collect();
    let [q, k, v] = [&aw.wq, &aw.wk, &aw.wv].map(|t| tape.constant(t.clone()));
    let fused = attention_fuse_var(&mut tape, &rows, q, k, v, aw.heads)?;
    let mut data = Vec::with_capacity(h.len());
    for f in fused {
        data.extend_from_slice(tape.value(f).data());
    }
    Tensor::new(h.rows(), h.cols(), data)
}

fn flatten_all(fused: &[Tensor]) -> Result<Tensor> {
    let data: Vec<f64> = fused.iter().flat_map(|f| f.data().iter().copied()).collect();
    Tensor::new(1, data.len(), data)
}

pub fn contribution(fused: &[Tensor], pw: &PredictorWeights) -> Result<Vec<f64>> {
    let logits = pw.c1.apply(&flatten_all(fused)?)?;
    if logits.cols() != fused.len() {
        return Err(contract_err!("{} contribution logits for {} features", logits.cols(), fused.len()));
    }
    Ok(logits.data().iter().map(|v| crate::diffcore::sigmoid(*v)).collect())
}

pub fn predict(fused: &[Tensor], c: &[f64], pw: &PredictorWeights) -> Result<f64> {
    if c.len() != fused.len() {
        return Err(contract_err!("{} factors for {} features", c.len(), fused.len()));
    }
    let mut s = 0.0;
    for (f, cm) in fused.iter().zip(c) {
        let o = pw.c2.apply(&f.reshape(1, f.len())?)?;
        s += cm * o.item();
    }
    Ok(crate::diffcore::sigmoid(s))
}
