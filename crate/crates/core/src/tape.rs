//! Minimal reverse-mode tape over dense matrices.
//!
//! Only the handful of ops the embedding head and the similarity pipeline
//! need are recorded. Losses plug in through [`Tape::loss`], carrying their
//! own hand-derived gradients. Constants (language targets, frozen
//! features) never receive gradient.

use crate::linalg::{Matrix, Real};
use crate::simcore::normalize_rows_backward;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type Backward<T> = Box<dyn Fn(&[&Matrix<T>], &Matrix<T>, &Matrix<T>) -> Vec<Matrix<T>>>;

struct Node<T> {
    value: Matrix<T>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<Backward<T>>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(
        &mut self,
        value: Matrix<T>,
        parents: Vec<usize>,
        backward: Option<Backward<T>>,
    ) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward: if requires_grad { backward } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that is treated as a constant (stop-gradient).
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b)).expect("matmul shapes");
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|inp, _, g| {
                vec![
                    g.matmul_t(inp[1]).expect("shapes"),
                    inp[0].t_matmul(g).expect("shapes"),
                ]
            })),
        )
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b)).expect("matmul_t shapes");
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|inp, _, g| {
                vec![
                    g.matmul(inp[1]).expect("shapes"),
                    g.t_matmul(inp[0]).expect("shapes"),
                ]
            })),
        )
    }

    /// Adds a `1 × m` bias row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias).clone();
        let mut value = self.value(x).clone();
        for i in 0..value.rows() {
            for (v, &bj) in value.row_mut(i).iter_mut().zip(b.row(0)) {
                *v += bj;
            }
        }
        self.push(
            value,
            vec![x.0, bias.0],
            Some(Box::new(|_, _, g| {
                let mut db = Matrix::zeros(1, g.cols());
                for r in g.row_iter() {
                    for (d, &gj) in db.row_mut(0).iter_mut().zip(r) {
                        *d += gj;
                    }
                }
                vec![g.clone(), db]
            })),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        self.push(
            value,
            vec![x.0],
            Some(Box::new(|_, out, g| {
                vec![g.zip_map(out, |gi, y| gi * (T::one() - y * y)).expect("shapes")]
            })),
        )
    }

    /// Projects every row onto the unit sphere. Panics on zero rows, which
    /// cannot occur for finite head parameters except on a measure-zero set.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let value = crate::simcore::normalize_rows(self.value(x))
            .expect("zero row in normalization")
            .into_inner();
        self.push(
            value,
            vec![x.0],
            Some(Box::new(|inp, out, g| {
                vec![normalize_rows_backward(inp[0], out, g)]
            })),
        )
    }

    /// Replaces entries where `mask` is true by `fill`. Gradient into those
    /// entries is dropped.
    pub fn mask_fill(&mut self, x: Var, mask: Vec<bool>, fill: T) -> Var {
        let mut value = self.value(x).clone();
        for (v, &m) in value.as_mut_slice().iter_mut().zip(&mask) {
            if m {
                *v = fill;
            }
        }
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |_, _, g| {
                let mut d = g.clone();
                for (v, &m) in d.as_mut_slice().iter_mut().zip(&mask) {
                    if m {
                        *v = T::zero();
                    }
                }
                vec![d]
            })),
        )
    }

    /// Records a scalar loss whose gradients with respect to `inputs` were
    /// computed by the loss kernel itself.
    pub fn loss(&mut self, value: T, inputs: Vec<(Var, Matrix<T>)>) -> Var {
        let (parents, grads): (Vec<usize>, Vec<Matrix<T>>) =
            inputs.into_iter().map(|(v, g)| (v.0, g)).unzip();
        for (p, g) in parents.iter().zip(&grads) {
            debug_assert_eq!(self.nodes[*p].value.shape(), g.shape());
        }
        self.push(
            Matrix::filled(1, 1, value),
            parents,
            Some(Box::new(move |_, _, up| {
                let s = up[(0, 0)];
                grads.iter().map(|g| g.scale(s)).collect()
            })),
        )
    }

    /// `Σ_i w_i · s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let value = terms
            .iter()
            .fold(T::zero(), |acc, &(v, w)| acc + w * self.scalar(v));
        let weights: Vec<T> = terms.iter().map(|&(_, w)| w).collect();
        self.push(
            Matrix::filled(1, 1, value),
            terms.iter().map(|(v, _)| v.0).collect(),
            Some(Box::new(move |_, _, up| {
                weights
                    .iter()
                    .map(|&w| Matrix::filled(1, 1, w * up[(0, 0)]))
                    .collect()
            })),
        )
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, T::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Matrix<T>> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = backward(&inputs, &node.value, &g);
            grads[idx] = Some(g);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign_scaled(&pg, T::one()).expect("grad shapes"),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`. Constants and nodes the root does not depend on
    /// get an all-zero matrix.
    pub fn get(&self, v: Var) -> Matrix<T> {
        self.grads[v.0].clone().unwrap_or_else(|| {
            let (r, c) = self.shapes[v.0];
            Matrix::zeros(r, c)
        })
    }
}
