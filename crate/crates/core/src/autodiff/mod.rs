//! Reverse-mode automatic differentiation with second-order support.
//!
//! Loss builders are closures `for<'t> Fn(&ParamVars<'t>) -> Var<'t>` that
//! record a scalar expression on a fresh [`Tape`]. The helpers here run a
//! builder and return flat vectors in the canonical order of the
//! [`ParamSet`], restricted to a [`ParamSubset`]:
//!
//! - [`evaluate`] returns the forward value
//! - [`gradient`] returns `∂f/∂θ`
//! - [`hvp`] returns `H v`, the gradient of `∇f · v` (double backprop)
//! - [`finite_difference_gradient`] returns central differences, used as the oracle
//!
//! Parameters an expression never touches get a zero gradient block.

mod params;
mod tape;
mod tensor;

pub use params::{ParamSet, ParamSubset, ParamVars};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Pins a closure to the higher-ranked loss-builder signature, for closures
/// stored in a `let` before use.
pub fn loss_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&ParamVars<'t>) -> Var<'t>,
{
    f
}

pub fn evaluate(params: &ParamSet, builder: impl for<'t> Fn(&ParamVars<'t>) -> Var<'t>) -> Result<Tensor> {
    let tape = Tape::new();
    let vars = params.leaves(&tape);
    let out = builder(&vars);
    tape.check()?;
    Ok(out.value())
}

pub fn gradient(
    params: &ParamSet,
    subset: &ParamSubset,
    builder: impl for<'t> Fn(&ParamVars<'t>) -> Var<'t>,
) -> Result<Vec<f64>> {
    Ok(GradientTape::record(params, subset, builder)?.gradient().to_vec())
}

pub fn hvp(
    params: &ParamSet,
    subset: &ParamSubset,
    v: &[f64],
    builder: impl for<'t> Fn(&ParamVars<'t>) -> Var<'t>,
) -> Result<Vec<f64>> {
    GradientTape::record(params, subset, builder)?.hvp(v)
}

/// Central-difference gradient, one coordinate at a time.
pub fn finite_difference_gradient(
    params: &ParamSet,
    subset: &ParamSubset,
    epsilon: f64,
    builder: impl for<'t> Fn(&ParamVars<'t>) -> Var<'t>,
) -> Result<Vec<f64>> {
    finite_difference(params, subset, epsilon, |p| {
        let t = evaluate(p, &builder)?;
        if !t.shape().is_empty() {
            return Err(Error::NotScalar(t.shape().to_vec()));
        }
        Ok(t.item())
    })
}

/// Central differences of an arbitrary scalar function of the parameters.
pub fn finite_difference(
    params: &ParamSet,
    subset: &ParamSubset,
    epsilon: f64,
    f: impl Fn(&ParamSet) -> Result<f64>,
) -> Result<Vec<f64>> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let mut work = params.clone();
    subset
        .full_indices()
        .into_iter()
        .map(|i| {
            let orig = *work.scalar_mut(i);
            *work.scalar_mut(i) = orig + epsilon;
            let up = f(&work)?;
            *work.scalar_mut(i) = orig - epsilon;
            let down = f(&work)?;
            *work.scalar_mut(i) = orig;
            Ok((up - down) / (2.0 * epsilon))
        })
        .collect()
}

/// A recorded loss with its differentiable gradient kept on the tape, so
/// several Hessian-vector products can reuse one forward/backward pass.
pub struct GradientTape {
    tape: Tape,
    leaves: Vec<usize>,
    grads: Vec<usize>,
    subset: ParamSubset,
    loss: f64,
    flat_grad: Vec<f64>,
}

impl GradientTape {
    pub fn record(
        params: &ParamSet,
        subset: &ParamSubset,
        builder: impl for<'t> Fn(&ParamVars<'t>) -> Var<'t>,
    ) -> Result<Self> {
        let tape = Tape::new();
        let (leaves, grads, loss, flat_grad) = {
            let vars = params.leaves(&tape);
            let y = builder(&vars);
            tape.check()?;
            let shape = y.shape();
            if !shape.is_empty() {
                return Err(Error::NotScalar(shape));
            }
            let gs = tape.grad(y, vars.vars())?;
            let values: Vec<Tensor> = gs.iter().map(|g| g.value()).collect();
            (
                vars.vars().iter().map(|v| v.id()).collect::<Vec<_>>(),
                gs.iter().map(|g| g.id()).collect::<Vec<_>>(),
                y.item(),
                subset.gather(&values),
            )
        };
        Ok(Self {
            tape,
            leaves,
            grads,
            subset: subset.clone(),
            loss,
            flat_grad,
        })
    }

    pub fn loss(&self) -> f64 {
        self.loss
    }

    pub fn gradient(&self) -> &[f64] {
        &self.flat_grad
    }

    /// `H v` over the subset. Entries of `v` outside the subset are implicitly zero.
    pub fn hvp(&self, v: &[f64]) -> Result<Vec<f64>> {
        let directions = self.subset.scatter(v)?;
        let tape = &self.tape;
        let mut dot: Option<Var<'_>> = None;
        for (param, (g, dir)) in self.grads.iter().zip(directions).enumerate() {
            if !self.subset.touches(param) {
                continue;
            }
            let term = tape.var(*g).dot(tape.constant(dir));
            dot = Some(match dot {
                None => term,
                Some(acc) => acc + term,
            });
        }
        let Some(dot) = dot else {
            return Ok(Vec::new());
        };
        let leaves: Vec<Var<'_>> = self.leaves.iter().map(|&i| tape.var(i)).collect();
        let hv = tape.grad(dot, &leaves)?;
        let values: Vec<Tensor> = hv.iter().map(|h| h.value()).collect();
        Ok(self.subset.gather(&values))
    }
}
