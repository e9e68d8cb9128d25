#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use emerg::dataio::{FeatureDecl, FeatureKind, FeatureSchema, FeatureValue, Owner, RawInteraction};
use emerg::diffcore::{bce_mean, ParamStore, Tape, Tensor, Var};
use emerg::embed::embed_item_features;
use emerg::graphgen::AdjacencyStack;
use emerg::metatrain::{Engine, MetaConfig};

pub mod gradcases;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(lo..hi))
}

/// Values in `[-hi, -gap] ∪ [gap, hi]`, away from kinks at zero.
pub fn rand_away(rng: &mut impl Rng, rows: usize, cols: usize, gap: f64, hi: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        let m = rng.gen_range(gap..hi);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Gradients smaller than this are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-6;

/// `‖a − b‖ / max(‖a‖, ‖b‖, ABS_FLOOR)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / na.max(nb).max(ABS_FLOOR)
}

pub type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> emerg::Result<Var> + 'a;

fn contract(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let [r, c] = tape.value(out).shape();
    let w = rand_tensor(&mut rng(seed), r, c, -1.0, 1.0);
    let weighted = tape.mul_const(out, w).unwrap();
    tape.sum_all(weighted).unwrap()
}

fn scalar_of(inputs: &[Tensor], build: &Build, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let s = contract(&mut tape, out, seed);
    tape.value(s).item()
}

/// Reverse-mode gradient of `⟨build(inputs), W⟩` for a random `W` against
/// central differences, all entries of all inputs. Returns the relative error.
pub fn check_grad(inputs: &[Tensor], build: &Build, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let s = contract(&mut tape, out, seed);
    let g = tape.backward(s).unwrap();
    let mut ad = Vec::new();
    let mut fd = Vec::new();
    for (k, t) in inputs.iter().enumerate() {
        ad.extend_from_slice(g.value_or_zeros(&tape, vars[k]).data());
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            fd.push((scalar_of(&plus, build, seed) - scalar_of(&minus, build, seed)) / (2.0 * FD_STEP));
        }
    }
    rel_err(&ad, &fd)
}

/// Four features (item ID, one item attribute, user ID, one user attribute).
pub fn small_schema(dim: usize) -> FeatureSchema {
    FeatureSchema::new(
        vec![
            FeatureDecl::new("item_id", Owner::Item, FeatureKind::Single, 3),
            FeatureDecl::new("price", Owner::Item, FeatureKind::Single, 3),
            FeatureDecl::new("user_id", Owner::User, FeatureKind::Single, 5),
            FeatureDecl::new("age", Owner::User, FeatureKind::Single, 3),
        ],
        dim,
    )
    .unwrap()
}

/// The complete forward pass of one item: hypernetwork, adjacency stack,
/// GNN, attention, predictor and BCE, as a function of θ and e_ID.
pub struct ModelCase {
    pub engine: Engine,
    pub theta: ParamStore,
    pub rows: Vec<RawInteraction>,
    pub e_id: Tensor,
}

impl ModelCase {
    pub fn new(seed: u64, layers: usize, dim: usize) -> Self {
        let cfg = MetaConfig {
            embedding_dim: dim,
            gnn_layers: layers,
            heads: 2,
            seed,
            hyper_hidden: vec![8],
            c1_hidden: vec![8],
            c2_hidden: vec![4],
            ..MetaConfig::default()
        };
        let engine = Engine::new(Arc::new(small_schema(dim)), cfg).unwrap();
        let mut theta = engine.init_theta().unwrap();
        let mut r = rng(seed ^ 0xA5A5);
        // Jitter every entry so zero-initialized biases and dead units do
        // not leave exact ties in the top-K selection.
        let names: Vec<String> = theta.names().map(str::to_string).collect();
        for name in names {
            let p = theta.get_mut(&name).unwrap();
            let noise = rand_tensor(&mut r, p.rows(), p.cols(), -0.1, 0.1);
            *p = p.add(&noise).unwrap();
        }
        let item = r.gen_range(0..3);
        let price = r.gen_range(0..3);
        let rows = (0..4)
            .map(|_| RawInteraction {
                values: vec![
                    FeatureValue::Single(item),
                    FeatureValue::Single(price),
                    FeatureValue::Single(r.gen_range(0..5)),
                    FeatureValue::Single(r.gen_range(0..3)),
                ],
                label: r.gen_range(0..2),
                timestamp: 0,
            })
            .collect();
        let e_id = rand_tensor(&mut r, 1, dim, -1.0, 1.0);
        Self { engine, theta, rows, e_id }
    }

    fn run(&self, theta: &ParamStore, e_id: &Tensor) -> (Tape, Var, Vec<(String, Var)>, Var) {
        let mut tape = Tape::new();
        let bound = theta.bind(&mut tape, |_| true);
        let e = tape.param(e_id.clone());
        let schema = self.engine.schema();
        let values = &self.rows[0].values[..schema.n_item()];
        let flat = embed_item_features(&mut tape, &bound, schema, values, Some(e)).unwrap();
        let bar = self.engine.net.hyper.forward(&mut tape, &bound, flat).unwrap();
        let graph = self.engine.net.graph(&mut tape, bar, &self.engine.refine, Some(e)).unwrap();
        let refs: Vec<&RawInteraction> = self.rows.iter().collect();
        let logits = self.engine.net.logits(&mut tape, &bound, &graph, &refs).unwrap();
        let p = tape.sigmoid(logits).unwrap();
        let labels: Vec<u8> = self.rows.iter().map(|r| r.label).collect();
        let l = bce_mean(&mut tape, p, &labels).unwrap();
        let params = bound.iter().map(|(n, v)| (n.to_string(), v)).collect();
        (tape, l, params, e)
    }

    pub fn loss(&self, theta: &ParamStore, e_id: &Tensor) -> f64 {
        let (tape, l, _, _) = self.run(theta, e_id);
        tape.value(l).item()
    }

    /// Directional derivative along a random direction over every θ entry and
    /// e_ID, reverse mode against central differences.
    pub fn directional(&self, seed: u64) -> (f64, f64) {
        self.directional_with(seed, FD_STEP)
    }

    pub fn directional_with(&self, seed: u64, step: f64) -> (f64, f64) {
        let (mut tape, l, params, e) = self.run(&self.theta, &self.e_id);
        let g = tape.backward(l).unwrap();
        let mut r = rng(seed);
        let mut plus = self.theta.clone();
        let mut minus = self.theta.clone();
        let mut ad = 0.0;
        for (name, v) in &params {
            let grad = g.value_or_zeros(&tape, *v);
            let dir = rand_tensor(&mut r, grad.rows(), grad.cols(), -1.0, 1.0);
            ad += grad.data().iter().zip(dir.data()).map(|(a, b)| a * b).sum::<f64>();
            let p = plus.get_mut(name).unwrap();
            *p = p.add(&dir.scale(step)).unwrap();
            let m = minus.get_mut(name).unwrap();
            *m = m.sub(&dir.scale(step)).unwrap();
        }
        let ge = g.value_or_zeros(&tape, e);
        let de = rand_tensor(&mut r, 1, ge.cols(), -1.0, 1.0);
        ad += ge.data().iter().zip(de.data()).map(|(a, b)| a * b).sum::<f64>();
        let ep = self.e_id.add(&de.scale(step)).unwrap();
        let em = self.e_id.sub(&de.scale(step)).unwrap();
        let fd = (self.loss(&plus, &ep) - self.loss(&minus, &em)) / (2.0 * step);
        (ad, fd)
    }
}

/// First violated adjacency invariant of a refinement chain, if any: unit
/// diagonals, entries in [0, 1], symmetric Ã, at most K nonzeros in Â and
/// supp(A^(l)) ⊆ supp(Ã^(l−1)).
pub fn stack_violation(s: &AdjacencyStack) -> Option<String> {
    let n = s.bar1.rows();
    for l in 0..s.layers() {
        let nnz = s.hat[l].data().iter().filter(|v| **v != 0.0).count();
        if nnz > s.k_sparse {
            return Some(format!("layer {l}: {nnz} nonzeros in the sparsified matrix, K = {}", s.k_sparse));
        }
        let (t, a) = (&s.tilde[l], &s.a[l]);
        for i in 0..n {
            if t.get(i, i) != 1.0 || a.get(i, i) != 1.0 {
                return Some(format!("layer {l}: diagonal {i} is not 1"));
            }
            for j in 0..n {
                if t.get(i, j) != t.get(j, i) {
                    return Some(format!("layer {l}: asymmetric at ({i}, {j})"));
                }
                if !(0.0..=1.0).contains(&t.get(i, j)) || !(0.0..=1.0).contains(&a.get(i, j)) {
                    return Some(format!("layer {l}: entry ({i}, {j}) outside [0, 1]"));
                }
                if l > 0 && a.get(i, j) != 0.0 && s.tilde[l - 1].get(i, j) == 0.0 {
                    return Some(format!("layer {l}: ({i}, {j}) outside the previous support"));
                }
            }
        }
    }
    None
}
