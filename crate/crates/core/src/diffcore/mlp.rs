//! Multi-layer perceptrons: affine layers with ReLU between them and an
//! affine output. Callers apply any output squashing themselves.

use rand::Rng;

use super::params::{init_uniform, Bound, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{config_err, dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
        }
    }
}

/// Concrete weights of an MLP. Weights are `in × out`, biases `1 × out`;
/// inputs are row vectors (or stacks of them).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub layers: Vec<(Tensor, Tensor)>,
    pub hidden: Activation,
}

impl MlpSpec {
    pub fn new(layers: Vec<(Tensor, Tensor)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(config_err!("an MLP needs at least one layer"));
        }
        for (i, (w, b)) in layers.iter().enumerate() {
            if b.rows() != 1 || b.cols() != w.cols() {
                return Err(dim_err!("layer {i}: bias {:?} vs weight {:?}", b.shape(), w.shape()));
            }
            if let Some((next, _)) = layers.get(i + 1) {
                if next.rows() != w.cols() {
                    return Err(dim_err!(
                        "layer {i} outputs {} but layer {} expects {}",
                        w.cols(),
                        i + 1,
                        next.rows()
                    ));
                }
            }
        }
        Ok(Self {
            layers,
            hidden: Activation::Relu,
        })
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].0.rows()];
        w.extend(self.layers.iter().map(|(w, _)| w.cols()));
        w
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            if h.cols() != w.rows() {
                return Err(dim_err!(
                    "MLP layer {i} expects width {}, got {}",
                    w.rows(),
                    h.cols()
                ));
            }
            let mut z = h.matmul(w)?;
            for r in 0..z.rows() {
                for c in 0..z.cols() {
                    let v = z.get(r, c) + b.get(0, c);
                    z.set(r, c, if i < last { self.hidden.apply(v) } else { v });
                }
            }
            h = z;
        }
        Ok(h)
    }
}

pub fn mlp_apply(spec: &MlpSpec, x: &Tensor) -> Result<Tensor> {
    spec.apply(x)
}

/// An MLP whose weights live in a [`ParamStore`] under `prefix`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    prefix: String,
    widths: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(config_err!("MLP widths {widths:?} need >= 2 positive entries"));
        }
        Ok(Self {
            prefix: prefix.into(),
            widths,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn names(&self, layer: usize) -> (String, String) {
        (
            format!("{}.{layer}.w", self.prefix),
            format!("{}.{layer}.b", self.prefix),
        )
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for (i, pair) in self.widths.windows(2).enumerate() {
            let (wn, bn) = self.names(i);
            store.insert(wn, init_uniform(pair[0], pair[1], pair[0], rng), true)?;
            store.insert(bn, Tensor::zeros(1, pair[1]), true)?;
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.input_width() {
            return Err(dim_err!(
                "{} expects width {}, got {}",
                self.prefix,
                self.input_width(),
                tape.value(x).cols()
            ));
        }
        let layers = self.widths.len() - 1;
        let mut h = x;
        for i in 0..layers {
            let (wn, bn) = self.names(i);
            let z = tape.matmul(h, bound.var(&wn)?)?;
            let z = tape.add_row(z, bound.var(&bn)?)?;
            h = if i + 1 < layers { tape.relu(z)? } else { z };
        }
        Ok(h)
    }

    pub fn spec(&self, store: &ParamStore) -> Result<MlpSpec> {
        let layers = (0..self.widths.len() - 1)
            .map(|i| {
                let (wn, bn) = self.names(i);
                Ok((store.get(&wn)?.clone(), store.get(&bn)?.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        MlpSpec::new(layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identity_layer() {
        let spec = MlpSpec::new(vec![(Tensor::identity(3), Tensor::zeros(1, 3))]).unwrap();
        let x = Tensor::row_vector(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(mlp_apply(&spec, &x).unwrap(), x);
    }

    #[test]
    fn zero_weight_layer_returns_bias() {
        let spec = MlpSpec::new(vec![(Tensor::zeros(4, 1), Tensor::scalar(5.0))]).unwrap();
        let x = Tensor::row_vector(&[1.0, 9.0, -3.0, 0.5]).unwrap();
        assert_eq!(mlp_apply(&spec, &x).unwrap().item(), 5.0);
    }

    #[test]
    fn two_layer_matches_hand_composition() {
        let w1 = Tensor::from_rows(&[&[1.0, -1.0], &[2.0, 0.5]]);
        let b1 = Tensor::from_rows(&[&[0.1, -3.0]]);
        let w2 = Tensor::from_rows(&[&[2.0], &[-1.0]]);
        let b2 = Tensor::scalar(0.25);
        let spec = MlpSpec::new(vec![(w1, b1), (w2, b2)]).unwrap();
        let (x0, x1) = (0.7, -0.2);
        let h0 = (x0 * 1.0 + x1 * 2.0 + 0.1f64).max(0.0);
        let h1 = (-x0 + x1 * 0.5 - 3.0f64).max(0.0);
        let want = 2.0 * h0 - h1 + 0.25;
        let got = mlp_apply(&spec, &Tensor::row_vector(&[x0, x1]).unwrap()).unwrap();
        assert!((got.item() - want).abs() < 1e-15);
    }

    #[test]
    fn width_mismatch() {
        let spec = MlpSpec::new(vec![(Tensor::identity(3), Tensor::zeros(1, 3))]).unwrap();
        assert!(mlp_apply(&spec, &Tensor::zeros(1, 2)).is_err());
        assert!(MlpSpec::new(vec![]).is_err());
    }

    #[test]
    fn tape_forward_matches_spec() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mlp = Mlp::new("m", vec![4, 6, 2]).unwrap();
        let mut store = ParamStore::new();
        mlp.init(&mut store, &mut rng).unwrap();
        let x = init_uniform(3, 4, 1, &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| true);
        let xv = tape.constant(x.clone());
        let y = mlp.forward(&mut tape, &bound, xv).unwrap();
        let want = mlp.spec(&store).unwrap().apply(&x).unwrap();
        assert!(tape.value(y).max_abs_diff(&want).unwrap() < 1e-14);
    }
}
