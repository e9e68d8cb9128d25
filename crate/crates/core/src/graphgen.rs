//! Item-specific feature graphs.
//!
//! A shared hypernetwork maps the item's feature embeddings plus a one-hot
//! node index to one row of a dense adjacency `Ā¹`. Higher layers use powers of
//! `Ā¹`, refined by min-max normalization, top-K sparsification,
//! symmetrization and masking against the previous layer's support.
//!
//! Every refinement step is built from tape primitives so that gradients reach
//! `Ā¹`; selection patterns (min/max, kept entries, masks, diagonal) are read
//! off the forward values and held constant in the backward pass.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::dataio::FeatureSchema;
use crate::diffcore::{Bound, Mlp, ParamStore, Tape, Tensor, Var};
use crate::error::{config_err, contract_err, dim_err, Error, Result};

/// Below this range `normalize` treats its input as constant.
pub const NORMALIZE_GUARD: f64 = 1e-12;

/// The adjacency hypernetwork `MLP_{W_a}` (`hyper.*` parameters).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HyperParams {
    mlp: Mlp,
    n_item: usize,
    nodes: usize,
    dim: usize,
}

impl HyperParams {
    pub const PREFIX: &'static str = "hyper";

    pub fn new(schema: &FeatureSchema, hidden: &[usize]) -> Result<Self> {
        let nodes = schema.n_features();
        let mut widths = vec![schema.n_item() * schema.embedding_dim() + nodes];
        widths.extend_from_slice(hidden);
        widths.push(nodes);
        Ok(Self {
            mlp: Mlp::new(Self::PREFIX, widths)?,
            n_item: schema.n_item(),
            nodes,
            dim: schema.embedding_dim(),
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.mlp.init(store, rng)
    }

    fn check_items(&self, item_embeds: &Tensor) -> Result<()> {
        if item_embeds.shape() != [self.n_item, self.dim] {
            return Err(dim_err!(
                "item embeddings are {:?}, expected [{}, {}]",
                item_embeds.shape(),
                self.n_item,
                self.dim
            ));
        }
        Ok(())
    }

    /// `[1, N_v * N_d]` item embeddings to the `[N, N]` dense adjacency.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, flat_items: Var) -> Result<Var> {
        let x = tape.broadcast_rows(flat_items, self.nodes)?;
        let onehot = tape.constant(Tensor::identity(self.nodes));
        let input = tape.concat_cols(&[x, onehot])?;
        self.mlp.forward(tape, bound, input)
    }
}

/// Row `m` of `Ā¹`: the hypernetwork applied to `[e_1, …, e_{N_v}, onehot(m)]`.
pub fn hyper_row(hp: &HyperParams, store: &ParamStore, item_embeds: &Tensor, m: usize) -> Result<Tensor> {
    hp.check_items(item_embeds)?;
    if m >= hp.nodes {
        return Err(contract_err!("row index {m} out of range for {} nodes", hp.nodes));
    }
    let mut x = item_embeds.data().to_vec();
    x.extend((0..hp.nodes).map(|j| if j == m { 1.0 } else { 0.0 }));
    hp.mlp.spec(store)?.apply(&Tensor::new(1, x.len(), x)?)
}

/// `Ā¹` with every row generated in one batched pass.
pub fn hyper_adjacency(hp: &HyperParams, store: &ParamStore, item_embeds: &Tensor) -> Result<Tensor> {
    hp.check_items(item_embeds)?;
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| false);
    let flat = tape.constant(item_embeds.reshape(1, item_embeds.len())?);
    let a = hp.forward(&mut tape, &bound, flat)?;
    Ok(tape.value(a).clone())
}

fn check_square(t: &Tensor, what: &str) -> Result<usize> {
    if t.rows() != t.cols() {
        return Err(dim_err!("{what} needs a square matrix, got {:?}", t.shape()));
    }
    Ok(t.rows())
}

fn off_diagonal(n: usize) -> Tensor {
    Tensor::from_fn(n, n, |r, c| if r == c { 0.0 } else { 1.0 })
}

pub fn normalize_var(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = check_square(tape.value(x), "normalize")?;
    let (lo, hi) = (tape.value(x).min(), tape.value(x).max());
    if hi - lo < NORMALIZE_GUARD {
        return Ok(tape.constant(Tensor::identity(n)));
    }
    // Gradients reach the entries that attain the minimum and maximum.
    let pick = |tape: &mut Tape, target: f64| -> Result<Var> {
        let at = tape.value(x).data().iter().position(|v| *v == target).expect("extremum present");
        let mut hot = Tensor::zeros(n, n);
        hot.data_mut()[at] = 1.0;
        let sel = tape.mul_const(x, hot)?;
        tape.sum_all(sel)
    };
    let lo_v = pick(tape, lo)?;
    let hi_v = pick(tape, hi)?;
    let range = tape.sub(hi_v, lo_v)?;
    let inv = tape.recip(range)?;
    let spread = |tape: &mut Tape, s: Var| -> Result<Var> {
        let row = tape.broadcast_cols(s, n)?;
        tape.broadcast_rows(row, n)
    };
    let lo_b = spread(tape, lo_v)?;
    let inv_b = spread(tape, inv)?;
    let shifted = tape.sub(x, lo_b)?;
    let scaled = tape.mul(shifted, inv_b)?;
    let off = tape.mul_const(scaled, off_diagonal(n))?;
    tape.add_const(off, Tensor::identity(n))
}

/// Keep-mask of the `k` largest entries. Ties prefer diagonal entries, then
/// the smallest `(row, col)`.
pub fn top_k_mask(m: &Tensor, k: usize) -> Result<Tensor> {
    let n = check_square(m, "sparsify")?;
    if k > n * n {
        return Err(config_err!("K_sparse = {k} exceeds {} entries", n * n));
    }
    let mut order: Vec<usize> = (0..n * n).collect();
    let d = m.data();
    order.sort_by(|&i, &j| {
        d[j].total_cmp(&d[i])
            .then_with(|| {
                let di = i / n == i % n;
                let dj = j / n == j % n;
                dj.cmp(&di)
            })
            .then(i.cmp(&j))
    });
    let mut mask = Tensor::zeros(n, n);
    for &i in &order[..k] {
        mask.data_mut()[i] = 1.0;
    }
    Ok(mask)
}

pub fn sparsify_var(tape: &mut Tape, x: Var, k: usize) -> Result<Var> {
    let mask = top_k_mask(tape.value(x), k)?;
    tape.mul_const(x, mask)
}

pub fn symmetrize_var(tape: &mut Tape, x: Var) -> Result<Var> {
    check_square(tape.value(x), "symmetrize")?;
    let t = tape.transpose(x)?;
    let s = tape.add(t, x)?;
    tape.scale(s, 0.5)
}

fn nonzero(t: &Tensor) -> Tensor {
    t.map(|v| if v != 0.0 { 1.0 } else { 0.0 })
}

pub fn mask_apply_var(tape: &mut Tape, p: Var, pattern: &Tensor) -> Result<Var> {
    if !tape.value(p).same_shape(pattern) {
        return Err(dim_err!(
            "mask shape {:?} against matrix {:?}",
            pattern.shape(),
            tape.value(p).shape()
        ));
    }
    tape.mul_const(p, nonzero(pattern))
}

fn eval1(x: &Tensor, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).clone())
}

/// Min-max scaling to `[0, 1]` with the diagonal forced to 1.
pub fn normalize(m: &Tensor) -> Result<Tensor> {
    eval1(m, normalize_var)
}

pub fn sparsify(m: &Tensor, k: usize) -> Result<Tensor> {
    eval1(m, |t, v| sparsify_var(t, v, k))
}

pub fn symmetrize(m: &Tensor) -> Result<Tensor> {
    eval1(m, symmetrize_var)
}

pub fn mask_apply(p: &Tensor, pattern: &Tensor) -> Result<Tensor> {
    eval1(p, |t, v| mask_apply_var(t, v, pattern))
}

/// Refinement settings. `sparsify = false` and `mask = false` are the
/// corresponding ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefineOptions {
    pub layers: usize,
    pub k_sparse: usize,
    pub sparsify: bool,
    pub mask: bool,
}

impl RefineOptions {
    pub fn new(layers: usize, k_sparse: usize) -> Self {
        Self {
            layers,
            k_sparse,
            sparsify: true,
            mask: true,
        }
    }

    pub fn validate(&self, nodes: usize) -> Result<()> {
        if self.layers == 0 {
            return Err(config_err!("gnn_layers must be >= 1"));
        }
        if self.k_sparse > nodes * nodes {
            return Err(config_err!("k_sparse = {} exceeds {} entries", self.k_sparse, nodes * nodes));
        }
        Ok(())
    }
}

/// Default sparsity budget, half of all entries rounded up.
pub fn default_k_sparse(nodes: usize) -> usize {
    (nodes * nodes).div_ceil(2)
}

/// Tape handles of one refinement chain.
#[derive(Debug, Clone)]
pub struct StackVars {
    pub hat: Vec<Var>,
    pub tilde: Vec<Var>,
    pub a: Vec<Var>,
}

pub fn build_stack_vars(tape: &mut Tape, bar1: Var, opts: &RefineOptions) -> Result<StackVars> {
    let n = check_square(tape.value(bar1), "adjacency")?;
    opts.validate(n)?;
    let mut out = StackVars {
        hat: Vec::with_capacity(opts.layers),
        tilde: Vec::with_capacity(opts.layers),
        a: Vec::with_capacity(opts.layers),
    };
    let mut bar = bar1;
    for l in 0..opts.layers {
        if l > 0 {
            bar = tape.matmul(bar, bar1)?;
        }
        let norm = normalize_var(tape, bar)?;
        let hat = if opts.sparsify {
            sparsify_var(tape, norm, opts.k_sparse)?
        } else {
            norm
        };
        let tilde = symmetrize_var(tape, hat)?;
        let a = if l == 0 {
            normalize_var(tape, tilde)?
        } else {
            let prev = out.tilde[l - 1];
            let prod = tape.matmul(prev, out.tilde[0])?;
            let masked = if opts.mask {
                let pattern = tape.value(prev).clone();
                mask_apply_var(tape, prod, &pattern)?
            } else {
                prod
            };
            normalize_var(tape, masked)?
        };
        out.hat.push(hat);
        out.tilde.push(tilde);
        out.a.push(a);
    }
    Ok(out)
}

/// All matrices of one item's refinement chain.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyStack {
    pub bar1: Tensor,
    pub hat: Vec<Tensor>,
    pub tilde: Vec<Tensor>,
    pub a: Vec<Tensor>,
    pub k_sparse: usize,
}

impl AdjacencyStack {
    pub fn layers(&self) -> usize {
        self.a.len()
    }
}

pub fn build_adjacency_stack(bar1: &Tensor, opts: &RefineOptions) -> Result<AdjacencyStack> {
    let mut tape = Tape::new();
    let v = tape.constant(bar1.clone());
    let sv = build_stack_vars(&mut tape, v, opts)?;
    let grab = |vs: &[Var]| vs.iter().map(|v| tape.value(*v).clone()).collect::<Vec<_>>();
    Ok(AdjacencyStack {
        bar1: bar1.clone(),
        hat: grab(&sv.hat),
        tilde: grab(&sv.tilde),
        a: grab(&sv.a),
        k_sparse: opts.k_sparse,
    })
}

/// Writes a matrix as CSV with feature names on both axes, after an optional
/// `# …` comment line.
pub fn write_matrix_csv(out: impl Write, names: &[String], m: &Tensor, comment: Option<&str>) -> Result<()> {
    if m.rows() != names.len() || m.cols() != names.len() {
        return Err(dim_err!("{} names for a {:?} matrix", names.len(), m.shape()));
    }
    let mut out = out;
    if let Some(c) = comment {
        writeln!(out, "# {c}").map_err(|e| Error::io("<matrix>", e))?;
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![String::new()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (r, name) in names.iter().enumerate() {
        let mut rec = vec![name.clone()];
        rec.extend(m.row(r).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<matrix>", e))?;
    Ok(())
}

/// Writes `A^(l)` as `<stem>_A<l>.csv` and, with `full`, also `Ã^(l)` and
/// `Ā¹`. Returns the paths written.
pub fn export_adjacency(
    dir: &Path,
    stem: &str,
    names: &[String],
    stack: &AdjacencyStack,
    full: bool,
    comment: Option<&str>,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<(String, &Tensor)> = Vec::new();
    for (l, a) in stack.a.iter().enumerate() {
        files.push((format!("{stem}_A{}.csv", l + 1), a));
    }
    if full {
        files.push((format!("{stem}_Abar1.csv"), &stack.bar1));
        for (l, t) in stack.tilde.iter().enumerate() {
            files.push((format!("{stem}_Atilde{}.csv", l + 1), t));
        }
    }
    let mut written = Vec::new();
    for (name, m) in files {
        let path = dir.join(name);
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_matrix_csv(std::io::BufWriter::new(f), names, m, comment)?;
        written.push(path);
    }
    Ok(written)
}
