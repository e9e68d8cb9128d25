//! Pretraining, meta-training over old-item tasks, and warm-up evaluation on
//! new items.
//!
//! Shared parameters θ live in one [`ParamStore`]: `hyper.*` (and the
//! `shared.adj` matrix of the shared-graph ablation) form θ_hyper, everything
//! else is θ_GNN. Item-specific parameters φ = {Ā¹, e_ID} are created per item
//! by [`Engine::init_phi`] and only ever updated by plain gradient descent.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{sample_task, FeatureSchema, FeatureValue, InteractionTable, ItemPhases, RawInteraction, Task};
use crate::diffcore::{bce_mean, AdamConfig, AdamState, Bound, EwiseOp, GradTable, ParamStore, Tape, Tensor, Var};
use crate::embed::{embed_item_features, init_embedding_row};
use crate::error::{config_err, contract_err, Error, Result};
use crate::eval;
use crate::graphgen::{build_adjacency_stack, default_k_sparse, AdjacencyStack, RefineOptions};
use crate::interactgnn::{EmergNet, NetConfig};

pub const SHARED_ADJ: &str = "shared.adj";

/// Ablation switches; all off is the full model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub random_graph: bool,
    pub no_sparsify: bool,
    pub no_mask: bool,
    pub shared_graph: bool,
    pub no_meta: bool,
    pub no_inner: bool,
}

impl Ablations {
    pub fn active(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        for (on, name) in [
            (self.random_graph, "random_graph"),
            (self.no_sparsify, "no_sparsify"),
            (self.no_mask, "no_mask"),
            (self.shared_graph, "shared_graph"),
            (self.no_meta, "no_meta"),
            (self.no_inner, "no_inner"),
        ] {
            if on {
                v.push(name);
            }
        }
        v
    }
}

/// Learning-protocol hyperparameters. Defaults are the MovieLens column of the
/// paper's hyperparameter table, except `heads` (see `validate`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub gnn_layers: usize,
    /// `None` means half of all adjacency entries, rounded up.
    pub k_sparse: Option<usize>,
    pub gamma: f64,
    pub heads: usize,
    pub embedding_dim: usize,
    pub batch_size: usize,
    pub pretrain_lr: f64,
    pub pretrain_epochs: usize,
    pub meta_lr: f64,
    pub meta_epochs: usize,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub warmup_lr: f64,
    pub warmup_epochs: usize,
    pub threshold: usize,
    pub shots: usize,
    pub support_size: Option<usize>,
    pub query_size: Option<usize>,
    pub op: EwiseOp,
    pub first_order: bool,
    pub hyper_hidden: Vec<usize>,
    pub c1_hidden: Vec<usize>,
    pub c2_hidden: Vec<usize>,
    pub ablations: Ablations,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        Self {
            gnn_layers: 2,
            k_sparse: None,
            gamma: 0.1,
            heads: net.heads,
            embedding_dim: 16,
            batch_size: 512,
            pretrain_lr: 0.005,
            pretrain_epochs: 2,
            meta_lr: 0.001,
            meta_epochs: 11,
            inner_lr: 0.01,
            inner_steps: 1,
            warmup_lr: 0.01,
            warmup_epochs: 11,
            threshold: 200,
            shots: 20,
            support_size: None,
            query_size: None,
            op: EwiseOp::Product,
            first_order: true,
            hyper_hidden: net.hyper_hidden,
            c1_hidden: net.c1_hidden,
            c2_hidden: net.c2_hidden,
            ablations: Ablations::default(),
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(config_err!("gamma = {} must lie in [0, 1]", self.gamma));
        }
        for (name, v) in [
            ("pretrain_lr", self.pretrain_lr),
            ("meta_lr", self.meta_lr),
            ("inner_lr", self.inner_lr),
            ("warmup_lr", self.warmup_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err!("{name} = {v} must be a positive number"));
            }
        }
        if self.gnn_layers == 0 {
            return Err(config_err!("gnn_layers must be >= 1"));
        }
        if self.embedding_dim == 0 {
            return Err(config_err!("embedding_dim must be >= 1"));
        }
        if self.heads == 0 || !self.embedding_dim.is_multiple_of(self.heads) {
            return Err(config_err!(
                "heads = {} must divide embedding_dim = {}",
                self.heads,
                self.embedding_dim
            ));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be >= 1"));
        }
        if self.shots == 0 {
            return Err(config_err!("shots must be >= 1"));
        }
        if self.threshold <= 3 * self.shots {
            return Err(config_err!(
                "threshold = {} must exceed 3 * shots = {}",
                self.threshold,
                3 * self.shots
            ));
        }
        if self.support_size == Some(0) || self.query_size == Some(0) {
            return Err(config_err!("support_size and query_size must be >= 1"));
        }
        if self.ablations.random_graph && self.ablations.shared_graph {
            return Err(config_err!("random_graph and shared_graph are mutually exclusive"));
        }
        Ok(())
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            layers: self.gnn_layers,
            heads: self.heads,
            op: self.op,
            hyper_hidden: self.hyper_hidden.clone(),
            c1_hidden: self.c1_hidden.clone(),
            c2_hidden: self.c2_hidden.clone(),
        }
    }

    pub fn n_support(&self) -> usize {
        self.support_size.unwrap_or(self.shots)
    }

    pub fn n_query(&self) -> usize {
        self.query_size.unwrap_or(self.shots)
    }

    pub fn refine(&self, nodes: usize) -> Result<RefineOptions> {
        let k = self.k_sparse.unwrap_or_else(|| default_k_sparse(nodes));
        if k < nodes || k > nodes * nodes {
            return Err(config_err!(
                "k_sparse = {k} must lie in [{nodes}, {}] for {nodes} features",
                nodes * nodes
            ));
        }
        Ok(RefineOptions {
            layers: self.gnn_layers,
            k_sparse: k,
            sparsify: !self.ablations.no_sparsify,
            mask: !self.ablations.no_mask,
        })
    }
}

/// splitmix64 finalizer chained over `parts`.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

const TAG_EID: u64 = 1;
const TAG_RANDOM_GRAPH: u64 = 2;
const TAG_INIT: u64 = 3;
const TAG_TASK: u64 = 4;
const TAG_BATCH: u64 = 5;

/// Item-specific parameters φ.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemPhi {
    /// Dense first-layer adjacency `Ā¹`.
    pub adjacency: Tensor,
    pub e_id: Tensor,
}

impl ItemPhi {
    pub fn to_json(&self, item: u32) -> serde_json::Value {
        let rows: Vec<&[f64]> = (0..self.adjacency.rows()).map(|r| self.adjacency.row(r)).collect();
        serde_json::json!({
            "item": item,
            "adjacency": rows,
            "e_id": self.e_id.data(),
        })
    }
}

/// Scores of one evaluation phase for one item.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseResult {
    pub label: String,
    /// `None` when the scored records hold a single class.
    pub auc: Option<f64>,
    pub f1: f64,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl PhaseResult {
    fn new(label: impl Into<String>, scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let auc = match eval::auc(&scores, &labels) {
            Ok(a) => Some(a),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        let f1 = eval::f1(&scores, &labels, eval::F1_THRESHOLD)?;
        Ok(Self {
            label: label.into(),
            auc,
            f1,
            scores,
            labels,
        })
    }
}

/// One meta-training task's losses.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskLog {
    pub epoch: usize,
    pub step: usize,
    /// `None` for pooled minibatch steps.
    pub item: Option<u32>,
    pub support_loss: f64,
    pub query_loss: f64,
    pub loss: f64,
}

/// Network, protocol configuration and refinement settings.
#[derive(Debug, Clone)]
pub struct Engine {
    pub net: EmergNet,
    pub cfg: MetaConfig,
    pub refine: RefineOptions,
}

/// φ on a tape.
#[derive(Debug, Clone, Copy)]
struct PhiVars {
    bar: Var,
    e_id: Var,
}

fn is_hyper(name: &str) -> bool {
    name.starts_with("hyper.") || name == SHARED_ADJ
}

impl Engine {
    pub fn new(schema: Arc<FeatureSchema>, cfg: MetaConfig) -> Result<Self> {
        cfg.validate()?;
        if schema.embedding_dim() != cfg.embedding_dim {
            return Err(config_err!(
                "schema embedding width {} differs from embedding_dim = {}",
                schema.embedding_dim(),
                cfg.embedding_dim
            ));
        }
        let refine = cfg.refine(schema.n_features())?;
        Ok(Self {
            net: EmergNet::new(schema, cfg.net_config())?,
            cfg,
            refine,
        })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.net.schema
    }

    pub fn nodes(&self) -> usize {
        self.net.nodes()
    }

    /// Freshly initialized θ.
    pub fn init_theta(&self) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.cfg.seed, TAG_INIT]));
        let mut store = ParamStore::new();
        self.net.init(&mut store, &mut rng)?;
        if self.cfg.ablations.shared_graph {
            let n = self.nodes();
            store.insert(SHARED_ADJ, crate::diffcore::init_uniform(n, n, n, &mut rng), true)?;
        }
        Ok(store)
    }

    /// Verifies that `theta` fits this engine's schema and architecture.
    pub fn check_theta(&self, theta: &ParamStore) -> Result<()> {
        self.net.check_store(theta)?;
        if self.cfg.ablations.shared_graph {
            let n = self.nodes();
            let adj = theta
                .get(SHARED_ADJ)
                .map_err(|_| Error::Checkpoint(format!("missing parameter `{SHARED_ADJ}`")))?;
            if adj.shape() != [n, n] {
                return Err(Error::Checkpoint(format!("`{SHARED_ADJ}` has shape {:?}", adj.shape())));
            }
        }
        Ok(())
    }

    fn fresh_e_id(&self, parts: &[u64]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(parts));
        init_embedding_row(self.cfg.embedding_dim, &mut rng)
    }

    /// e_ID of a new item at test time.
    pub fn test_e_id(&self, item: u32) -> Tensor {
        self.fresh_e_id(&[self.cfg.seed, TAG_EID, u64::from(item)])
    }

    fn train_e_id(&self, epoch: usize, item: u32) -> Tensor {
        self.fresh_e_id(&[self.cfg.seed, TAG_EID, epoch as u64 + 1, u64::from(item)])
    }

    fn random_bar(&self, item: u32) -> Tensor {
        let n = self.nodes();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.cfg.seed, TAG_RANDOM_GRAPH, u64::from(item)]));
        Tensor::from_fn(n, n, |_, _| rng.gen_range(-1.0..=1.0))
    }

    /// `Ā¹` on the tape. `e_id = None` feeds the shared ID table row to the
    /// hypernetwork.
    fn bar_var(&self, tape: &mut Tape, bound: &Bound, item: u32, item_values: &[FeatureValue], e_id: Option<Var>) -> Result<Var> {
        let ab = &self.cfg.ablations;
        if ab.shared_graph {
            bound.var(SHARED_ADJ)
        } else if ab.random_graph {
            Ok(tape.constant(self.random_bar(item)))
        } else {
            let flat = embed_item_features(tape, bound, self.schema(), item_values, e_id)?;
            self.net.hyper.forward(tape, bound, flat)
        }
    }

    /// Cold-start φ of an item: hypernetwork adjacency and a fresh e_ID.
    pub fn init_phi(&self, theta: &ParamStore, item: u32, item_values: &[FeatureValue], e_id: Tensor) -> Result<ItemPhi> {
        let mut tape = Tape::new();
        let bound = theta.bind(&mut tape, |_| false);
        let e = tape.constant(e_id.clone());
        let bar = self.bar_var(&mut tape, &bound, item, item_values, Some(e))?;
        Ok(ItemPhi {
            adjacency: tape.value(bar).clone(),
            e_id,
        })
    }

    /// [`Engine::init_phi`] with the run's deterministic test-time e_ID.
    pub fn cold_phi(&self, theta: &ParamStore, item: u32, item_values: &[FeatureValue]) -> Result<ItemPhi> {
        self.init_phi(theta, item, item_values, self.test_e_id(item))
    }

    pub fn stack(&self, phi: &ItemPhi) -> Result<AdjacencyStack> {
        build_adjacency_stack(&phi.adjacency, &self.refine)
    }

    fn probs(&self, tape: &mut Tape, bound: &Bound, phi: PhiVars, rows: &[&RawInteraction]) -> Result<Var> {
        let graph = self.net.graph(tape, phi.bar, &self.refine, Some(phi.e_id))?;
        let logits = self.net.logits(tape, bound, &graph, rows)?;
        tape.sigmoid(logits)
    }

    fn loss(&self, tape: &mut Tape, bound: &Bound, phi: PhiVars, rows: &[&RawInteraction]) -> Result<Var> {
        let p = self.probs(tape, bound, phi, rows)?;
        let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
        bce_mean(tape, p, &labels)
    }

    /// Predicted probabilities for `rows` under φ.
    pub fn score(&self, theta: &ParamStore, phi: &ItemPhi, rows: &[&RawInteraction]) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let bound = theta.bind(&mut tape, |_| false);
        let vars = PhiVars {
            bar: tape.constant(phi.adjacency.clone()),
            e_id: tape.constant(phi.e_id.clone()),
        };
        let p = self.probs(&mut tape, &bound, vars, rows)?;
        Ok(tape.value(p).data().to_vec())
    }

    /// Mean support loss `L_S(θ, φ)`.
    pub fn support_loss(&self, theta: &ParamStore, phi: &ItemPhi, rows: &[&RawInteraction]) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = theta.bind(&mut tape, |_| false);
        let vars = PhiVars {
            bar: tape.constant(phi.adjacency.clone()),
            e_id: tape.constant(phi.e_id.clone()),
        };
        let l = self.loss(&mut tape, &bound, vars, rows)?;
        Ok(tape.value(l).item())
    }

    /// Gradient of `L_S` with respect to φ = (Ā¹, e_ID).
    pub fn phi_gradient(&self, theta: &ParamStore, phi: &ItemPhi, rows: &[&RawInteraction]) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = theta.bind(&mut tape, |_| false);
        let vars = PhiVars {
            bar: tape.param(phi.adjacency.clone()),
            e_id: tape.param(phi.e_id.clone()),
        };
        let l = self.loss(&mut tape, &bound, vars, rows)?;
        let g = tape.backward_to(l, &[vars.bar, vars.e_id])?;
        Ok((g.value_or_zeros(&tape, vars.bar), g.value_or_zeros(&tape, vars.e_id)))
    }

    /// `steps` full-support gradient-descent steps on φ with θ frozen. Under
    /// the shared-graph ablation the adjacency is global and stays fixed.
    pub fn inner_update(&self, theta: &ParamStore, phi: &ItemPhi, support: &[&RawInteraction], lr: f64, steps: usize) -> Result<ItemPhi> {
        if support.is_empty() {
            return Err(contract_err!("inner update on an empty support set"));
        }
        let mut phi = phi.clone();
        for _ in 0..steps {
            let (gb, ge) = self.phi_gradient(theta, &phi, support)?;
            if !self.cfg.ablations.shared_graph {
                phi.adjacency = phi.adjacency.sub(&gb.scale(lr))?;
            }
            phi.e_id = phi.e_id.sub(&ge.scale(lr))?;
        }
        Ok(phi)
    }

    /// `γ·L_S(θ, φ) + (1 − γ)·L_Q(θ, φ′)`.
    pub fn meta_loss(&self, theta: &ParamStore, phi: &ItemPhi, phi_next: &ItemPhi, support: &[&RawInteraction], query: &[&RawInteraction]) -> Result<f64> {
        let ls = self.support_loss(theta, phi, support)?;
        let lq = self.support_loss(theta, phi_next, query)?;
        Ok(combine(self.cfg.gamma, ls, lq))
    }

    /// One task on a tape: returns (support loss, query loss, total) vars.
    fn task_graph(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        item: u32,
        item_values: &[FeatureValue],
        e_id: Tensor,
        support: &[&RawInteraction],
        query: &[&RawInteraction],
    ) -> Result<(Var, Var, Var)> {
        let ab = self.cfg.ablations;
        let e = tape.param(e_id);
        let bar = self.bar_var(tape, bound, item, item_values, Some(e))?;
        let phi = PhiVars { bar, e_id: e };
        let ls = self.loss(tape, bound, phi, support)?;
        let mut cur = phi;
        let mut cur_loss = ls;
        if !ab.no_inner {
            let adapt_bar = !ab.shared_graph;
            for step in 0..self.cfg.inner_steps {
                if step > 0 {
                    cur_loss = self.loss(tape, bound, cur, support)?;
                }
                let targets: Vec<Var> = if adapt_bar { vec![cur.bar, cur.e_id] } else { vec![cur.e_id] };
                let g = tape.backward_to(cur_loss, &targets)?;
                let step_of = |tape: &mut Tape, v: Var| -> Result<Var> {
                    let gv = match g.var(v) {
                        Some(gv) if self.cfg.first_order => tape.detach(gv),
                        Some(gv) => gv,
                        None => return Ok(v),
                    };
                    let scaled = tape.scale(gv, self.cfg.inner_lr)?;
                    tape.sub(v, scaled)
                };
                let e_next = step_of(tape, cur.e_id)?;
                let bar_next = if adapt_bar { step_of(tape, cur.bar)? } else { cur.bar };
                cur = PhiVars { bar: bar_next, e_id: e_next };
            }
        }
        let lq = self.loss(tape, bound, cur, query)?;
        let a = tape.scale(ls, self.cfg.gamma)?;
        let b = tape.scale(lq, 1.0 - self.cfg.gamma)?;
        let total = tape.add(a, b)?;
        Ok((ls, lq, total))
    }

    /// Meta loss of one task and its gradient over every trainable θ entry.
    pub fn task_gradient(&self, theta: &ParamStore, task: &Task, table: &InteractionTable, e_id: Tensor) -> Result<(TaskLog, GradTable)> {
        let support: Vec<&RawInteraction> = task.support.iter().map(|&i| table.row(i)).collect();
        let query: Vec<&RawInteraction> = task.query.iter().map(|&i| table.row(i)).collect();
        let mut tape = Tape::new();
        let bound = theta.bind(&mut tape, |_| true);
        let (ls, lq, total) = self.task_graph(&mut tape, &bound, task.item, &task.item_values, e_id, &support, &query)?;
        let g = tape.backward(total)?;
        let names = theta.trainable_names(|_| true);
        let table = bound.collect(&tape, &g, &names)?;
        let log = TaskLog {
            epoch: 0,
            step: 0,
            item: Some(task.item),
            support_loss: tape.value(ls).item(),
            query_loss: tape.value(lq).item(),
            loss: tape.value(total).item(),
        };
        Ok((log, table))
    }

    /// Minibatch BCE over records of several items. `e_id_of` supplies the
    /// ID embedding fed to both the hypernetwork and the ID node; `None`
    /// uses the shared ID table.
    fn pooled_gradient(
        &self,
        theta: &ParamStore,
        table: &InteractionTable,
        batch: &[usize],
        train: impl Fn(&str) -> bool,
        e_id_of: impl Fn(u32) -> Option<Tensor>,
    ) -> Result<(f64, GradTable)> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &i in batch {
            groups.entry(table.row(i).item()).or_default().push(i);
        }
        let mut tape = Tape::new();
        let bound = theta.bind(&mut tape, &train);
        let mut parts = Vec::new();
        let mut labels = Vec::new();
        for (item, idx) in &groups {
            let rows: Vec<&RawInteraction> = idx.iter().map(|&i| table.row(i)).collect();
            let values = &rows[0].values[..self.schema().n_item()];
            let e = e_id_of(*item).map(|t| tape.constant(t));
            let bar = self.bar_var(&mut tape, &bound, *item, values, e)?;
            let graph = self.net.graph(&mut tape, bar, &self.refine, e)?;
            parts.push(self.net.logits(&mut tape, &bound, &graph, &rows)?);
            labels.extend(rows.iter().map(|r| r.label));
        }
        let logits = tape.concat_rows(&parts)?;
        let p = tape.sigmoid(logits)?;
        let l = bce_mean(&mut tape, p, &labels)?;
        let g = tape.backward(l)?;
        let names = theta.trainable_names(&train);
        Ok((tape.value(l).item(), bound.collect(&tape, &g, &names)?))
    }

    fn pooled_epochs(
        &self,
        theta: &mut ParamStore,
        table: &InteractionTable,
        items: &[u32],
        epochs: usize,
        lr: f64,
        train: impl Fn(&str) -> bool + Copy,
        fresh_e_id: bool,
        log: &mut Vec<TaskLog>,
    ) -> Result<()> {
        let mut records: Vec<usize> = items.iter().flat_map(|&i| table.records_of(i).iter().copied()).collect();
        records.sort_unstable();
        let names = theta.trainable_names(train);
        let mut adam = AdamState::new(AdamConfig::with_lr(lr));
        for epoch in 0..epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.cfg.seed, TAG_BATCH, epoch as u64, fresh_e_id as u64]));
            records.shuffle(&mut rng);
            for (step, batch) in records.chunks(self.cfg.batch_size).enumerate() {
                let (loss, grads) = self.pooled_gradient(theta, table, batch, train, |item| {
                    fresh_e_id.then(|| self.train_e_id(epoch, item))
                })?;
                adam.step(theta, &grads, &names)?;
                log.push(TaskLog {
                    epoch,
                    step,
                    item: None,
                    support_loss: loss,
                    query_loss: loss,
                    loss,
                });
            }
        }
        Ok(())
    }

    /// Minibatch training of θ_GNN on pooled old-item records with the
    /// hypernetwork frozen.
    pub fn pretrain(&self, theta: &mut ParamStore, table: &InteractionTable, old: &[u32]) -> Result<Vec<TaskLog>> {
        if old.is_empty() {
            return Err(config_err!("pretraining needs at least one old item"));
        }
        let mut log = Vec::new();
        self.pooled_epochs(theta, table, old, self.cfg.pretrain_epochs, self.cfg.pretrain_lr, |n| !is_hyper(n), false, &mut log)?;
        Ok(log)
    }

    /// Meta-training over old-item tasks (or pooled training under `no_meta`).
    pub fn meta_train(&self, theta: &mut ParamStore, table: &InteractionTable, old: &[u32]) -> Result<Vec<TaskLog>> {
        if old.is_empty() {
            return Err(config_err!("meta-training needs at least one old item"));
        }
        let mut log = Vec::new();
        if self.cfg.ablations.no_meta {
            self.pooled_epochs(theta, table, old, self.cfg.meta_epochs, self.cfg.meta_lr, |_| true, true, &mut log)?;
            return Ok(log);
        }
        let names = theta.trainable_names(|_| true);
        let mut adam = AdamState::new(AdamConfig::with_lr(self.cfg.meta_lr));
        let mut order = old.to_vec();
        for epoch in 0..self.cfg.meta_epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.cfg.seed, TAG_TASK, epoch as u64]));
            order.shuffle(&mut rng);
            for (step, &item) in order.iter().enumerate() {
                let task = sample_task(table, item, self.cfg.n_support(), self.cfg.n_query(), &mut rng)?;
                let (mut entry, grads) = self.task_gradient(theta, &task, table, self.train_e_id(epoch, item))?;
                adam.step(theta, &grads, &names)?;
                entry.epoch = epoch;
                entry.step = step;
                log.push(entry);
            }
        }
        Ok(log)
    }

    /// Cold start, then warm-up phases A, B and C on cumulative supports.
    /// θ is read-only.
    pub fn evaluate_phases(&self, theta: &ParamStore, table: &InteractionTable, item: u32, phases: &ItemPhases) -> Result<Vec<PhaseResult>> {
        Ok(self.run_phases(theta, table, item, phases, &phases.test)?.0)
    }

    fn run_phases(
        &self,
        theta: &ParamStore,
        table: &InteractionTable,
        item: u32,
        phases: &ItemPhases,
        test: &[usize],
    ) -> Result<(Vec<PhaseResult>, ItemPhi)> {
        let values = table
            .item_values(item)
            .ok_or_else(|| Error::Lookup(format!("item {item} has no records")))?;
        let shots = self.cfg.shots;
        if [&phases.a, &phases.b, &phases.c].iter().any(|p| p.len() != shots) || test.is_empty() {
            return Err(contract_err!("item {item} lacks complete phase data"));
        }
        let test_rows: Vec<&RawInteraction> = test.iter().map(|&i| table.row(i)).collect();
        let labels: Vec<u8> = test_rows.iter().map(|r| r.label).collect();
        let mut phi = self.cold_phi(theta, item, &values)?;
        let mut out = vec![PhaseResult::new("cold", self.score(theta, &phi, &test_rows)?, labels.clone())?];
        for (k, label) in ["A", "B", "C"].iter().enumerate() {
            let support: Vec<&RawInteraction> = phases.cumulative(k + 1).iter().map(|&i| table.row(i)).collect();
            phi = self.inner_update(theta, &phi, &support, self.cfg.warmup_lr, self.cfg.warmup_epochs)?;
            out.push(PhaseResult::new(*label, self.score(theta, &phi, &test_rows)?, labels.clone())?);
        }
        Ok((out, phi))
    }

    /// φ after the warm-up phases, for graph export.
    pub fn phase_phis(&self, theta: &ParamStore, table: &InteractionTable, item: u32, phases: &ItemPhases) -> Result<Vec<(String, ItemPhi)>> {
        let values = table
            .item_values(item)
            .ok_or_else(|| Error::Lookup(format!("item {item} has no records")))?;
        let mut phi = self.cold_phi(theta, item, &values)?;
        let mut out = vec![("cold".to_string(), phi.clone())];
        for (k, label) in ["A", "B", "C"].iter().enumerate() {
            let support: Vec<&RawInteraction> = phases.cumulative(k + 1).iter().map(|&i| table.row(i)).collect();
            phi = self.inner_update(theta, &phi, &support, self.cfg.warmup_lr, self.cfg.warmup_epochs)?;
            out.push((label.to_string(), phi.clone()));
        }
        Ok(out)
    }

    /// The sufficient-data sweep: after phase C, the first `max(sizes)` test
    /// records become extra training data and the rest is the reduced test
    /// set. For each cumulative size `k`, φ continues descending on
    /// `A ∪ B ∪ C ∪ extra[..k]`; with `finetune`, a copy of θ is updated too.
    /// The first entry is phase C scored on the reduced test set.
    pub fn common_train(
        &self,
        theta: &ParamStore,
        table: &InteractionTable,
        item: u32,
        phases: &ItemPhases,
        sizes: &[usize],
        finetune: bool,
    ) -> Result<Vec<PhaseResult>> {
        let max = sizes.iter().copied().max().unwrap_or(0);
        if sizes.windows(2).any(|w| w[0] > w[1]) {
            return Err(config_err!("common sizes must be non-decreasing, got {sizes:?}"));
        }
        if max >= phases.test.len() {
            return Err(contract_err!(
                "item {item} has {} test records, sweep needs more than {max}",
                phases.test.len()
            ));
        }
        let (extra, test) = phases.test.split_at(max);
        let (base, mut phi) = self.run_phases(theta, table, item, phases, test)?;
        let test_rows: Vec<&RawInteraction> = test.iter().map(|&i| table.row(i)).collect();
        let labels: Vec<u8> = test_rows.iter().map(|r| r.label).collect();
        let mut out = vec![base.into_iter().last().expect("phase C")];
        let mut theta_ft = theta.clone();
        let mut prev = 0;
        for &k in sizes {
            if k > prev {
                let mut ids = phases.cumulative(3);
                ids.extend_from_slice(&extra[..k]);
                let support: Vec<&RawInteraction> = ids.iter().map(|&i| table.row(i)).collect();
                if finetune {
                    phi = self.finetune_steps(&mut theta_ft, &phi, &support)?;
                } else {
                    phi = self.inner_update(theta, &phi, &support, self.cfg.warmup_lr, self.cfg.warmup_epochs)?;
                }
            }
            prev = k;
            let th = if finetune { &theta_ft } else { theta };
            out.push(PhaseResult::new(format!("common-{k}"), self.score(th, &phi, &test_rows)?, labels.clone())?);
        }
        Ok(out)
    }

    fn finetune_steps(&self, theta: &mut ParamStore, phi: &ItemPhi, support: &[&RawInteraction]) -> Result<ItemPhi> {
        let mut phi = phi.clone();
        let lr = self.cfg.warmup_lr;
        for _ in 0..self.cfg.warmup_epochs {
            let mut tape = Tape::new();
            let bound = theta.bind(&mut tape, |_| true);
            let vars = PhiVars {
                bar: tape.param(phi.adjacency.clone()),
                e_id: tape.param(phi.e_id.clone()),
            };
            let l = self.loss(&mut tape, &bound, vars, support)?;
            let g = tape.backward(l)?;
            for name in theta.trainable_names(|_| true) {
                let grad = g.value_or_zeros(&tape, bound.var(&name)?);
                let p = theta.get_mut(&name)?;
                *p = p.sub(&grad.scale(lr))?;
            }
            if !self.cfg.ablations.shared_graph {
                phi.adjacency = phi.adjacency.sub(&g.value_or_zeros(&tape, vars.bar).scale(lr))?;
            }
            phi.e_id = phi.e_id.sub(&g.value_or_zeros(&tape, vars.e_id).scale(lr))?;
        }
        Ok(phi)
    }
}

pub fn combine(gamma: f64, support: f64, query: f64) -> f64 {
    gamma * support + (1.0 - gamma) * query
}

/// Writes the run log as CSV after a `# …` comment line.
pub fn write_run_log(out: impl std::io::Write, log: &[TaskLog], comment: &str) -> Result<()> {
    let mut out = out;
    writeln!(out, "# {comment}").map_err(|e| Error::io("<run log>", e))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["phase", "epoch", "step", "item", "support_loss", "query_loss", "loss"])?;
    for (phase, entry) in log_phases(log) {
        w.write_record([
            phase.to_string(),
            entry.epoch.to_string(),
            entry.step.to_string(),
            entry.item.map(|i| i.to_string()).unwrap_or_default(),
            format!("{:?}", entry.support_loss),
            format!("{:?}", entry.query_loss),
            format!("{:?}", entry.loss),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<run log>", e))?;
    Ok(())
}

fn log_phases(log: &[TaskLog]) -> impl Iterator<Item = (&'static str, &TaskLog)> {
    log.iter().map(|e| (if e.item.is_some() { "meta" } else { "pooled" }, e))
}

/// Pretraining followed by meta-training; returns θ* and the combined log.
pub fn train(engine: &Engine, table: &InteractionTable, old: &[u32]) -> Result<(ParamStore, Vec<TaskLog>, Vec<TaskLog>)> {
    let mut theta = engine.init_theta()?;
    let pre = engine.pretrain(&mut theta, table, old)?;
    let meta = engine.meta_train(&mut theta, table, old)?;
    Ok((theta, pre, meta))
}

/// Runs [`Engine::evaluate_phases`] for every item of `plan` on `workers`
/// threads. Results are keyed by item, so they do not depend on scheduling.
pub fn evaluate_items(
    engine: &Engine,
    theta: &ParamStore,
    table: &InteractionTable,
    plan: &crate::dataio::PhasePlan,
    workers: usize,
) -> Result<BTreeMap<u32, Vec<PhaseResult>>> {
    use rayon::prelude::*;
    let items: Vec<(&u32, &ItemPhases)> = plan.items.iter().collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| config_err!("cannot start {workers} workers: {e}"))?;
    let results: Vec<Result<(u32, Vec<PhaseResult>)>> = pool.install(|| {
        items
            .par_iter()
            .map(|(item, phases)| Ok((**item, engine.evaluate_phases(theta, table, **item, phases)?)))
            .collect()
    });
    results.into_iter().collect()
}

/// Pools every item's predictions per phase label, in first-seen label order.
pub fn pooled_reports(
    results: &BTreeMap<u32, Vec<PhaseResult>>,
    fingerprint: &str,
    seed: u64,
) -> Result<Vec<eval::MetricReport>> {
    let mut order: Vec<String> = Vec::new();
    let mut pooled: BTreeMap<String, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for phases in results.values() {
        for r in phases {
            if !pooled.contains_key(&r.label) {
                order.push(r.label.clone());
            }
            let e = pooled.entry(r.label.clone()).or_default();
            e.0.extend_from_slice(&r.scores);
            e.1.extend_from_slice(&r.labels);
        }
    }
    order
        .iter()
        .map(|label| {
            let (s, l) = &pooled[label];
            eval::MetricReport::from_predictions(label, s, l, fingerprint, seed)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{split_items, synth_generate, SynthConfig};

    fn small() -> (InteractionTable, MetaConfig) {
        let sc = SynthConfig {
            n_old_items: 6,
            n_new_items: 3,
            old_records: 40,
            new_records: 25,
            n_users: 50,
            embedding_dim: 4,
            ..SynthConfig::default()
        };
        let (table, _) = synth_generate(&sc, 3).unwrap();
        let cfg = MetaConfig {
            embedding_dim: 4,
            heads: 2,
            shots: 5,
            threshold: 30,
            batch_size: 32,
            pretrain_epochs: 1,
            meta_epochs: 1,
            warmup_epochs: 2,
            hyper_hidden: vec![8],
            c1_hidden: vec![8],
            c2_hidden: vec![4],
            seed: 9,
            ..MetaConfig::default()
        };
        (table, cfg)
    }

    fn engine(table: &InteractionTable, cfg: MetaConfig) -> Engine {
        Engine::new(table.schema_arc(), cfg).unwrap()
    }

    #[test]
    fn defaults_follow_the_hyperparameter_table() {
        let c = MetaConfig::default();
        assert_eq!((c.gnn_layers, c.embedding_dim, c.batch_size), (2, 16, 512));
        assert_eq!((c.pretrain_lr, c.pretrain_epochs), (0.005, 2));
        assert_eq!((c.meta_lr, c.meta_epochs, c.inner_lr), (0.001, 11, 0.01));
        assert_eq!((c.warmup_lr, c.warmup_epochs, c.gamma), (0.01, 11, 0.1));
        assert_eq!((c.threshold, c.shots), (200, 20));
        c.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        let bad = [
            MetaConfig { gamma: 1.5, ..MetaConfig::default() },
            MetaConfig { meta_lr: 0.0, ..MetaConfig::default() },
            MetaConfig { heads: 3, ..MetaConfig::default() },
            MetaConfig { threshold: 60, ..MetaConfig::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn seed_mixing_is_order_sensitive() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_eq!(mix_seed(&[5, 7]), mix_seed(&[5, 7]));
    }

    #[test]
    fn meta_loss_formula() {
        assert!((combine(0.1, 1.0, 2.0) - 1.9).abs() < 1e-15);
        assert_eq!(combine(1.0, 0.7, 3.0), 0.7);
    }

    #[test]
    fn init_phi_is_deterministic() {
        let (table, cfg) = small();
        let e = engine(&table, cfg);
        let theta = e.init_theta().unwrap();
        let v = table.item_values(0).unwrap();
        assert_eq!(e.cold_phi(&theta, 0, &v).unwrap(), e.cold_phi(&theta, 0, &v).unwrap());
    }

    #[test]
    fn zero_step_and_zero_rate_leave_phi() {
        let (table, cfg) = small();
        let e = engine(&table, cfg);
        let theta = e.init_theta().unwrap();
        let phi = e.cold_phi(&theta, 1, &table.item_values(1).unwrap()).unwrap();
        let rows: Vec<&RawInteraction> = table.records_of(1)[..5].iter().map(|&i| table.row(i)).collect();
        assert_eq!(e.inner_update(&theta, &phi, &rows, 0.0, 1).unwrap(), phi);
        assert_eq!(e.inner_update(&theta, &phi, &rows, 0.1, 0).unwrap(), phi);
        assert!(matches!(e.inner_update(&theta, &phi, &[], 0.1, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn inner_steps_reduce_support_loss() {
        let (table, cfg) = small();
        let e = engine(&table, cfg);
        let theta = e.init_theta().unwrap();
        let phi = e.cold_phi(&theta, 2, &table.item_values(2).unwrap()).unwrap();
        let rows: Vec<&RawInteraction> = table.records_of(2)[..10].iter().map(|&i| table.row(i)).collect();
        let before = e.support_loss(&theta, &phi, &rows).unwrap();
        let after = e.inner_update(&theta, &phi, &rows, 0.05, 5).unwrap();
        assert!(e.support_loss(&theta, &after, &rows).unwrap() <= before);
    }

    #[test]
    fn zero_epochs_leave_theta() {
        let (table, mut cfg) = small();
        cfg.pretrain_epochs = 0;
        cfg.meta_epochs = 0;
        let e = engine(&table, cfg);
        let split = split_items(&table, 30, 5).unwrap();
        let old: Vec<u32> = split.old.iter().copied().collect();
        let (theta, _, _) = train(&e, &table, &old).unwrap();
        assert_eq!(theta, e.init_theta().unwrap());
        assert!(matches!(e.pretrain(&mut theta.clone(), &table, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn shared_graph_adjacency_is_global() {
        let (table, mut cfg) = small();
        cfg.ablations.shared_graph = true;
        let e = engine(&table, cfg);
        let theta = e.init_theta().unwrap();
        let a = e.cold_phi(&theta, 0, &table.item_values(0).unwrap()).unwrap();
        let b = e.cold_phi(&theta, 7, &table.item_values(7).unwrap()).unwrap();
        assert_eq!(a.adjacency, b.adjacency);
        assert_ne!(a.e_id, b.e_id);
    }

    #[test]
    fn random_graph_ignores_hypernetwork() {
        let (table, mut cfg) = small();
        cfg.ablations.random_graph = true;
        let e = engine(&table, cfg);
        let theta = e.init_theta().unwrap();
        let mut other = theta.clone();
        let w = other.get_mut("hyper.0.w").unwrap();
        *w = w.map(|v| v + 0.3);
        let v = table.item_values(0).unwrap();
        assert_eq!(e.cold_phi(&theta, 0, &v).unwrap(), e.cold_phi(&other, 0, &v).unwrap());
    }

    #[test]
    fn task_gradient_reaches_hypernetwork_and_gnn() {
        let (table, cfg) = small();
        let e = engine(&table, cfg);
        let theta = e.init_theta().unwrap();
        let task = sample_task(&table, 0, 5, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (log, g) = e.task_gradient(&theta, &task, &table, e.test_e_id(0)).unwrap();
        assert!((log.loss - combine(0.1, log.support_loss, log.query_loss)).abs() < 1e-12);
        let nonzero = |n: &str| g.get(n).unwrap().data().iter().any(|v| *v != 0.0);
        assert!(nonzero("hyper.0.w"));
        assert!(nonzero("gnn.0.w"));
        assert!(nonzero("c2.0.w"));
    }
}
