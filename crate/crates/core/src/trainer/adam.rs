use crate::error::{Error, Result};
use crate::linalg::{Matrix, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

/// One Adam update with decoupled weight decay: `p ← p − lr·wd·p` is
/// applied first, then the bias-corrected adaptive step.
pub fn adam_step<T: Real>(
    params: &mut [&mut Matrix<T>],
    grads: &[Matrix<T>],
    state: &mut AdamState<T>,
    h: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::CountMismatch {
            what: "adam parameter groups".into(),
            expected: params.len(),
            found: grads.len().min(state.m.len()),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        p.ensure_shape(g)?;
        p.ensure_shape(m)?;
    }
    state.t += 1;
    let (b1, b2) = (T::lit(h.betas.0), T::lit(h.betas.1));
    let c1 = T::one() - T::lit(h.betas.0.powi(state.t as i32));
    let c2 = T::one() - T::lit(h.betas.1.powi(state.t as i32));
    let lr = T::lit(h.lr);
    let decay = T::lit(h.lr * h.weight_decay);
    let eps = T::lit(h.eps);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let ps = p.as_mut_slice();
        for (((x, &gi), mi), vi) in ps
            .iter_mut()
            .zip(g.as_slice())
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice())
        {
            *x -= decay * *x;
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *x -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
