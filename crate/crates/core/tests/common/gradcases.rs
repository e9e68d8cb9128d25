//! Random cases for every differentiable primitive.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use emerg::diffcore::{bce_mean, EwiseOp, RowMap, Tensor};
use emerg::graphgen::{mask_apply_var, normalize_var, sparsify_var, symmetrize_var};
use emerg::interactgnn::{attention_fuse_var, gnn_layer_var, residual_layer_var};

use super::{rand_away, rand_tensor, Build};

pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "max",
    "mul_const",
    "add_const",
    "scale",
    "add_scalar",
    "neg",
    "transpose",
    "reshape",
    "relu",
    "sigmoid",
    "log",
    "recip",
    "clamp",
    "softmax_rows",
    "row_sum",
    "col_sum",
    "sum_all",
    "mean_all",
    "broadcast_cols",
    "broadcast_rows",
    "add_row",
    "concat_rows",
    "concat_cols",
    "slice_cols",
    "slice_rows",
    "row_combine",
    "ewise_product",
    "ewise_sum",
    "ewise_max",
    "bce_mean",
    "normalize",
    "sparsify",
    "symmetrize",
    "mask_apply",
    "gnn_layer",
    "residual_layer",
    "attention_fuse",
];

fn dims(r: &mut ChaCha8Rng) -> (usize, usize) {
    (r.gen_range(1..=4), r.gen_range(1..=4))
}

fn u(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    rand_tensor(r, rows, cols, -1.0, 1.0)
}

/// `b` with every entry at least 0.05 away from the matching entry of `a`.
fn apart(r: &mut ChaCha8Rng, a: &Tensor) -> Tensor {
    let d = rand_away(r, a.rows(), a.cols(), 0.05, 1.0);
    a.add(&d).unwrap()
}

pub fn case(name: &str, r: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build<'static>>) {
    let (m, n) = dims(r);
    match name {
        "matmul" => {
            let k = r.gen_range(1..=4);
            (vec![u(r, m, k), u(r, k, n)], Box::new(|t, v| t.matmul(v[0], v[1])))
        }
        "add" => (vec![u(r, m, n), u(r, m, n)], Box::new(|t, v| t.add(v[0], v[1]))),
        "sub" => (vec![u(r, m, n), u(r, m, n)], Box::new(|t, v| t.sub(v[0], v[1]))),
        "mul" => (vec![u(r, m, n), u(r, m, n)], Box::new(|t, v| t.mul(v[0], v[1]))),
        "max" => {
            let a = u(r, m, n);
            let b = apart(r, &a);
            (vec![a, b], Box::new(|t, v| t.max(v[0], v[1])))
        }
        "mul_const" => {
            let c = u(r, m, n);
            (vec![u(r, m, n)], Box::new(move |t, v| t.mul_const(v[0], c.clone())))
        }
        "add_const" => {
            let c = u(r, m, n);
            (vec![u(r, m, n)], Box::new(move |t, v| t.add_const(v[0], c.clone())))
        }
        "scale" => {
            let s = r.gen_range(-2.0..2.0);
            (vec![u(r, m, n)], Box::new(move |t, v| t.scale(v[0], s)))
        }
        "add_scalar" => {
            let s = r.gen_range(-2.0..2.0);
            (vec![u(r, m, n)], Box::new(move |t, v| t.add_scalar(v[0], s)))
        }
        "neg" => (vec![u(r, m, n)], Box::new(|t, v| t.neg(v[0]))),
        "transpose" => (vec![u(r, m, n)], Box::new(|t, v| t.transpose(v[0]))),
        "reshape" => (vec![u(r, m, n)], Box::new(move |t, v| t.reshape(v[0], 1, m * n))),
        "relu" => (vec![rand_away(r, m, n, 0.05, 1.0)], Box::new(|t, v| t.relu(v[0]))),
        "sigmoid" => (vec![rand_tensor(r, m, n, -4.0, 4.0)], Box::new(|t, v| t.sigmoid(v[0]))),
        "log" => (vec![rand_tensor(r, m, n, 0.2, 3.0)], Box::new(|t, v| t.log(v[0]))),
        "recip" => (vec![rand_away(r, m, n, 0.3, 2.0)], Box::new(|t, v| t.recip(v[0]))),
        "clamp" => {
            // Entries stay clear of the bounds at ±0.5.
            let x = u(r, m, n).map(|v| if (v.abs() - 0.5).abs() < 0.05 { v * 0.5 } else { v });
            (vec![x], Box::new(|t, v| t.clamp(v[0], -0.5, 0.5)))
        }
        "softmax_rows" => (vec![rand_tensor(r, m, n, -3.0, 3.0)], Box::new(|t, v| t.softmax_rows(v[0]))),
        "row_sum" => (vec![u(r, m, n)], Box::new(|t, v| t.row_sum(v[0]))),
        "col_sum" => (vec![u(r, m, n)], Box::new(|t, v| t.col_sum(v[0]))),
        "sum_all" => (vec![u(r, m, n)], Box::new(|t, v| t.sum_all(v[0]))),
        "mean_all" => (vec![u(r, m, n)], Box::new(|t, v| t.mean_all(v[0]))),
        "broadcast_cols" => (vec![u(r, m, 1)], Box::new(move |t, v| t.broadcast_cols(v[0], n))),
        "broadcast_rows" => (vec![u(r, 1, n)], Box::new(move |t, v| t.broadcast_rows(v[0], m))),
        "add_row" => (vec![u(r, m, n), u(r, 1, n)], Box::new(|t, v| t.add_row(v[0], v[1]))),
        "concat_rows" => {
            let m2 = r.gen_range(1..=3);
            (vec![u(r, m, n), u(r, m2, n)], Box::new(|t, v| t.concat_rows(&[v[0], v[1]])))
        }
        "concat_cols" => {
            let n2 = r.gen_range(1..=3);
            (vec![u(r, m, n), u(r, m, n2)], Box::new(|t, v| t.concat_cols(&[v[0], v[1]])))
        }
        "slice_cols" => {
            let n = n + 1;
            let start = r.gen_range(0..n);
            let len = r.gen_range(1..=n - start);
            (vec![u(r, m, n)], Box::new(move |t, v| t.slice_cols(v[0], start, len)))
        }
        "slice_rows" => {
            let m = m + 1;
            let start = r.gen_range(0..m);
            let len = r.gen_range(1..=m - start);
            (vec![u(r, m, n)], Box::new(move |t, v| t.slice_rows(v[0], start, len)))
        }
        "row_combine" => {
            let out = r.gen_range(1..=4);
            let entries = (0..r.gen_range(1..=6))
                .map(|_| (r.gen_range(0..out), r.gen_range(0..m), r.gen_range(-1.0..1.0)))
                .collect();
            let map = Arc::new(RowMap::new(m, out, entries).unwrap());
            (vec![u(r, m, n)], Box::new(move |t, v| t.row_combine(v[0], map.clone())))
        }
        "ewise_product" => (vec![u(r, m, n), u(r, m, n)], Box::new(|t, v| t.ewise(v[0], v[1], EwiseOp::Product))),
        "ewise_sum" => (vec![u(r, m, n), u(r, m, n)], Box::new(|t, v| t.ewise(v[0], v[1], EwiseOp::Sum))),
        "ewise_max" => {
            let a = u(r, m, n);
            let b = apart(r, &a);
            (vec![a, b], Box::new(|t, v| t.ewise(v[0], v[1], EwiseOp::Max)))
        }
        "bce_mean" => {
            let labels: Vec<u8> = (0..m).map(|_| r.gen_range(0..2)).collect();
            (
                vec![rand_tensor(r, m, 1, -3.0, 3.0)],
                Box::new(move |t, v| {
                    let p = t.sigmoid(v[0])?;
                    bce_mean(t, p, &labels)
                }),
            )
        }
        "normalize" => {
            let k = m + 1;
            (vec![u(r, k, k)], Box::new(|t, v| normalize_var(t, v[0])))
        }
        "sparsify" => {
            let k = m + 1;
            let keep = r.gen_range(1..=k * k);
            (vec![u(r, k, k)], Box::new(move |t, v| sparsify_var(t, v[0], keep)))
        }
        "symmetrize" => (vec![u(r, m, m)], Box::new(|t, v| symmetrize_var(t, v[0]))),
        "mask_apply" => {
            let pattern = Tensor::from_fn(m, m, |_, _| if r.gen_bool(0.5) { 1.0 } else { 0.0 });
            (vec![u(r, m, m)], Box::new(move |t, v| mask_apply_var(t, v[0], &pattern)))
        }
        "gnn_layer" => {
            // Feature-major batch: rows m * B + b for N nodes and B instances.
            let (nodes, batch, d) = (r.gen_range(2..=4), r.gen_range(1..=3), r.gen_range(1..=4));
            let op = [EwiseOp::Product, EwiseOp::Sum, EwiseOp::Max][r.gen_range(0..3)];
            let inputs = vec![
                u(r, nodes * batch, d),
                u(r, nodes * batch, d),
                rand_tensor(r, nodes, nodes, 0.0, 1.0),
                u(r, d, d),
            ];
            (inputs, Box::new(move |t, v| gnn_layer_var(t, v[0], v[1], v[2], v[3], op)))
        }
        "residual_layer" => {
            let (nodes, batch, d) = (r.gen_range(2..=4), r.gen_range(1..=3), r.gen_range(1..=4));
            let inputs = vec![u(r, nodes * batch, d), rand_tensor(r, nodes, nodes, 0.0, 1.0), u(r, d, d)];
            (inputs, Box::new(|t, v| residual_layer_var(t, v[0], v[1], v[2])))
        }
        "attention_fuse" => {
            let heads = r.gen_range(1..=2);
            let d = 2 * heads;
            let rows = r.gen_range(1..=4);
            let states = r.gen_range(1..=3);
            let mut inputs: Vec<Tensor> = (0..states).map(|_| u(r, rows, d)).collect();
            for _ in 0..3 {
                inputs.push(u(r, d, d));
            }
            (
                inputs,
                Box::new(move |t, v| {
                    let fused = attention_fuse_var(t, &v[..states], v[states], v[states + 1], v[states + 2], heads)?;
                    t.concat_cols(&fused)
                }),
            )
        }
        other => panic!("no case generator for {other}"),
    }
}
