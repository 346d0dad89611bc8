//! Central finite-difference gradient checking.
//!
//! Analytic gradients are computed in the precision under test; the
//! finite-difference oracle always evaluates the loss in `f64`, only ever
//! calling forward code.

use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// A scalar function of some leaf tensors, evaluable in any precision.
pub trait GradFn {
    fn eval<T: Real>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Norm-wise relative error per checked input (`None` where not checked).
    pub rel_err: Vec<Option<f64>>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().flatten().copied().fold(0.0, f64::max)
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vectors are (numerically) zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn eval_f64<F: GradFn>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = f.eval(&mut g, &vars)?;
    Ok(g.value(loss).data()[0])
}

/// Analytic gradients of `f` in precision `T`, converted to `f64`.
pub fn analytic<F: GradFn, T: Real>(f: &F, inputs: &[Tensor<f64>], wrt: &[bool]) -> Result<Vec<Option<Vec<f64>>>> {
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(wrt)
        .map(|(t, &w)| g.leaf(t.cast::<T>().with_requires_grad(w)))
        .collect();
    let loss = f.eval(&mut g, &vars)?;
    g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(wrt)
        .zip(inputs)
        .map(|((&v, &w), t)| {
            w.then(|| match g.grad(v) {
                Some(gr) => gr.iter().map(|x| x.as_f64()).collect(),
                None => vec![0.0; t.numel()],
            })
        })
        .collect())
}

/// Central differences `(f(x+h) − f(x−h)) / 2h` for every coordinate of the checked inputs.
pub fn numeric<F: GradFn>(f: &F, inputs: &[Tensor<f64>], wrt: &[bool], h: f64) -> Result<Vec<Option<Vec<f64>>>> {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for (i, &w) in wrt.iter().enumerate() {
        if !w {
            out.push(None);
            continue;
        }
        let mut grad = vec![0.0; work[i].numel()];
        for (j, gj) in grad.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval_f64(f, &work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval_f64(f, &work)?;
            work[i].data_mut()[j] = orig;
            *gj = (plus - minus) / (2.0 * h);
        }
        out.push(Some(grad));
    }
    Ok(out)
}

/// Compares analytic gradients in precision `T` against the f64 finite-difference oracle.
pub fn check<F: GradFn, T: Real>(f: &F, inputs: &[Tensor<f64>], wrt: &[bool], h: f64) -> Result<GradCheckReport> {
    if inputs.len() != wrt.len() {
        return Err(Error::Usage("one wrt flag per input required".into()));
    }
    let a = analytic::<F, T>(f, inputs, wrt)?;
    let n = numeric(f, inputs, wrt, h)?;
    let rel_err = a
        .iter()
        .zip(&n)
        .map(|(a, n)| match (a, n) {
            (Some(a), Some(n)) => Some(relative_error(a, n)),
            _ => None,
        })
        .collect();
    Ok(GradCheckReport { rel_err })
}
