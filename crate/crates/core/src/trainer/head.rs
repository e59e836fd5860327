use rand::Rng;

use crate::error::Result;
use crate::linalg::{Matrix, Real};
use crate::simcore::{normalize_rows, EmbeddingMatrix};
use crate::tape::{Tape, Var};

/// Weight (`in × out`) and bias (`1 × out`).
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

/// Projection from frozen features onto the unit hypersphere. Layers are
/// separated by tanh; the output is always row-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderHead<T> {
    pub layers: Vec<Layer<T>>,
}

/// Parameter handles of a head recorded on a tape, in `params()` order.
pub struct RecordedHead {
    pub params: Vec<Var>,
    pub output: Var,
}

impl<T: Real> EmbedderHead<T> {
    /// Scaled-uniform initialization, `bound = sqrt(6 / (fan_in + fan_out))`,
    /// zero biases.
    pub fn new<R: Rng>(widths: &[usize], rng: &mut R) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Layer {
                    weight: Matrix::from_fn(w[0], w[1], |_, _| T::lit(rng.gen_range(-bound..bound))),
                    bias: Matrix::zeros(1, w[1]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.cols()
    }

    pub fn params(&self) -> Vec<&Matrix<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.all_finite())
    }

    pub fn record(&self, tape: &mut Tape<T>, input: Var) -> RecordedHead {
        let mut params = Vec::new();
        let mut x = input;
        for (i, l) in self.layers.iter().enumerate() {
            let w = tape.param(l.weight.clone());
            let b = tape.param(l.bias.clone());
            params.extend([w, b]);
            let xw = tape.matmul(x, w);
            x = tape.add_row(xw, b);
            if i + 1 < self.layers.len() {
                x = tape.tanh(x);
            }
        }
        let output = tape.normalize_rows(x);
        RecordedHead { params, output }
    }

    pub fn embed(&self, features: &Matrix<T>) -> Result<EmbeddingMatrix<T>> {
        let mut x = features.clone();
        for (i, l) in self.layers.iter().enumerate() {
            x = x.matmul(&l.weight)?;
            for r in 0..x.rows() {
                for (v, &b) in x.row_mut(r).iter_mut().zip(l.bias.row(0)) {
                    *v += b;
                }
            }
            if i + 1 < self.layers.len() {
                x = x.map(|v| v.tanh());
            }
        }
        normalize_rows(&x)
    }

    pub fn cast<U: Real>(&self) -> EmbedderHead<U> {
        EmbedderHead {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }
}
