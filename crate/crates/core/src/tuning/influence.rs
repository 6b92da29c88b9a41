//! Influence losses over a tuple and their gradients.
//!
//! For a train/probe pair with gradients `g_t`, `g_p`, Hessians `H_t`, `H_p`
//! and `I = cos(g_t, g_p)`:
//!
//! ```text
//! ∇I = p + q - r - s
//! p = H_t g_p / (|g_t||g_p|)          q = H_p g_t / (|g_t||g_p|)
//! r = (g_t·g_p) H_t g_t / (|g_t|³|g_p|)   s = (g_t·g_p) H_p g_p / (|g_t||g_p|³)
//! ```
//!
//! The tuple loss `J = (mean_A I - mean_B I)²` has
//! `∇J = 2 (mean_A I - mean_B I) (mean_A ∇I - mean_B ∇I)`. Since `H_t`
//! appears only in p and r and `H_p` is shared by every pair, the tuple
//! gradient needs one HVP per train example plus one for the probe.

use crate::attribution::{cosine, dot, norm, SubsetKind, NORM_FLOOR};
use crate::autodiff::{GradientTape, ParamSubset, ParamVars, Var};
use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par::*;

use super::InfluenceTuple;

/// Signs of the p, q, r and s terms in `∇I`.
pub const TERM_SIGNS: [f64; 4] = [1.0, 1.0, -1.0, -1.0];

/// Probe followed by group A then group B.
fn members<'d>(dataset: &'d Dataset, tuple: &InfluenceTuple) -> Vec<&'d Example> {
    std::iter::once(tuple.probe)
        .chain(tuple.group_a.iter().copied())
        .chain(tuple.group_b.iter().copied())
        .map(|id| &dataset.examples[id])
        .collect()
}

fn record(model: &Model, ex: &Example, subset: &ParamSubset) -> Result<GradientTape> {
    GradientTape::record(model.params(), subset, |v: &ParamVars<'_>| model.label_loss(v, &[ex]))
}

fn tuple_delta(cosines: &[f64], k: usize) -> f64 {
    let mean_a = cosines[..k].iter().sum::<f64>() / k as f64;
    let mean_b = cosines[k..].iter().sum::<f64>() / k as f64;
    mean_a - mean_b
}

/// `J = (mean_A I - mean_B I)²` with `I` the gradient cosine over `subset`.
pub fn influence_loss(model: &Model, dataset: &Dataset, tuple: &InfluenceTuple, subset: SubsetKind) -> Result<f64> {
    let exs = members(dataset, tuple);
    let s = subset.resolve(model, exs[0].label)?;
    let grads = exs
        .par_iter()
        .map(|e| model.example_gradient(e, &s))
        .collect::<Result<Vec<_>>>()?;
    let cosines = grads[1..]
        .iter()
        .map(|g| cosine(g, &grads[0]))
        .collect::<Result<Vec<_>>>()?;
    Ok(tuple_delta(&cosines, tuple.k()).powi(2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceGradient {
    pub loss: f64,
    /// `mean_A I - mean_B I`.
    pub delta: f64,
    pub gradient: Vec<f64>,
}

/// Closed-form `∇J` over all parameters via `2k + 1` Hessian-vector products.
pub fn influence_loss_gradient(model: &Model, dataset: &Dataset, tuple: &InfluenceTuple) -> Result<InfluenceGradient> {
    influence_loss_gradient_with_signs(model, dataset, tuple, TERM_SIGNS)
}

/// [`influence_loss_gradient`] with the p, q, r, s signs given explicitly.
pub fn influence_loss_gradient_with_signs(
    model: &Model,
    dataset: &Dataset,
    tuple: &InfluenceTuple,
    signs: [f64; 4],
) -> Result<InfluenceGradient> {
    let exs = members(dataset, tuple);
    let k = tuple.k();
    let full = model.full_subset();
    let tapes = exs
        .par_iter()
        .map(|e| record(model, e, &full))
        .collect::<Result<Vec<_>>>()?;
    let gp = tapes[0].gradient();
    let np = norm(gp);
    let mut cosines = Vec::with_capacity(2 * k);
    for t in &tapes[1..] {
        cosines.push(cosine(t.gradient(), gp)?);
    }
    let delta = tuple_delta(&cosines, k);
    let loss = delta * delta;
    if delta == 0.0 {
        return Ok(InfluenceGradient {
            loss,
            delta,
            gradient: vec![0.0; full.len()],
        });
    }

    let n = gp.len();
    let mut probe_dir = vec![0.0; n];
    let mut dirs = Vec::with_capacity(2 * k);
    for (i, t) in tapes[1..].iter().enumerate() {
        let w = 2.0 * delta / k as f64 * if i < k { 1.0 } else { -1.0 };
        let gt = t.gradient();
        let nt = norm(gt);
        let d = dot(gt, gp);
        // p and r for H_t; q and s accumulate onto H_p.
        let [sp, sq, sr, ss] = signs;
        let (a, b) = (sp * w / (nt * np), sr * w * d / (nt.powi(3) * np));
        let (c, e) = (sq * w / (nt * np), ss * w * d / (nt * np.powi(3)));
        let mut u = vec![0.0; n];
        for j in 0..n {
            u[j] = a * gp[j] + b * gt[j];
            probe_dir[j] += c * gt[j] + e * gp[j];
        }
        dirs.push(u);
    }
    dirs.insert(0, probe_dir);

    let products = tapes
        .into_par_iter()
        .zip(dirs)
        .map(|(t, u)| t.hvp(&u))
        .collect::<Result<Vec<_>>>()?;
    let mut gradient = vec![0.0; n];
    for hv in &products {
        for (g, h) in gradient.iter_mut().zip(hv) {
            *g += h;
        }
    }
    Ok(InfluenceGradient { loss, delta, gradient })
}

/// The four terms of `∇cos(g_trn, g_prb)` over all parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineTerms {
    pub cosine: f64,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub s: Vec<f64>,
}

impl CosineTerms {
    /// `signs[0]·p + signs[1]·q + signs[2]·r + signs[3]·s`.
    pub fn combine(&self, signs: [f64; 4]) -> Vec<f64> {
        (0..self.p.len())
            .map(|j| signs[0] * self.p[j] + signs[1] * self.q[j] + signs[2] * self.r[j] + signs[3] * self.s[j])
            .collect()
    }

    pub fn gradient(&self) -> Vec<f64> {
        self.combine(TERM_SIGNS)
    }
}

pub fn cosine_influence_terms(model: &Model, trn: &Example, prb: &Example) -> Result<CosineTerms> {
    let full = model.full_subset();
    let (tt, tp) = (record(model, trn, &full)?, record(model, prb, &full)?);
    let (gt, gp) = (tt.gradient(), tp.gradient());
    let cos = cosine(gt, gp)?;
    let (nt, np, d) = (norm(gt), norm(gp), dot(gt, gp));
    let scaled = |v: Vec<f64>, c: f64| v.into_iter().map(|x| x * c).collect::<Vec<_>>();
    Ok(CosineTerms {
        cosine: cos,
        p: scaled(tt.hvp(gp)?, 1.0 / (nt * np)),
        q: scaled(tp.hvp(gt)?, 1.0 / (nt * np)),
        r: scaled(tt.hvp(gt)?, d / (nt.powi(3) * np)),
        s: scaled(tp.hvp(gp)?, d / (nt * np.powi(3))),
    })
}

/// `g_trn · g_prb` and its gradient `H_trn g_prb + H_prb g_trn`.
pub fn dot_influence_gradient(model: &Model, trn: &Example, prb: &Example) -> Result<(f64, Vec<f64>)> {
    let full = model.full_subset();
    let (tt, tp) = (record(model, trn, &full)?, record(model, prb, &full)?);
    let value = dot(tt.gradient(), tp.gradient());
    let a = tt.hvp(tp.gradient())?;
    let b = tp.hvp(tt.gradient())?;
    Ok((value, a.iter().zip(&b).map(|(x, y)| x + y).collect()))
}

/// `J_proj = (mean_A cos(h_A, h_prb) - mean_B cos(h_B, h_prb))²` on pooled
/// representations, recorded on the tape.
///
/// A pooled vector with norm at or below [`NORM_FLOOR`] latches
/// [`Error::DegenerateGradient`] on the tape.
pub fn embedding_loss<'t>(
    model: &Model,
    vars: &ParamVars<'t>,
    probe: &Example,
    group_a: &[&Example],
    group_b: &[&Example],
) -> Var<'t> {
    let k = group_a.len();
    let batch: Vec<&Example> = std::iter::once(probe)
        .chain(group_a.iter().copied())
        .chain(group_b.iter().copied())
        .collect();
    let pooled = model.encode(vars, &batch);
    let tape = vars.tape();
    let rows: Vec<Var<'t>> = (0..batch.len()).map(|i| pooled.row(i)).collect();
    let sq: Vec<Var<'t>> = rows.iter().map(|r| r.dot(*r)).collect();
    for s in &sq {
        let n = s.item().sqrt();
        if n.is_nan() || n <= NORM_FLOOR {
            tape.fail(Error::DegenerateGradient {
                norm: n,
                floor: NORM_FLOOR,
            });
        }
    }
    let cos = |i: usize| rows[i].dot(rows[0]) / (sq[i] * sq[0]).sqrt();
    let sum = |range: std::ops::Range<usize>| range.map(cos).reduce(|a, b| a + b).expect("groups are non-empty");
    let delta = sum(1..k + 1).scale(1.0 / k as f64) - sum(k + 1..2 * k + 1).scale(1.0 / k as f64);
    delta * delta
}

/// Value and full-parameter gradient of [`embedding_loss`] for a tuple.
pub fn embedding_loss_gradient(model: &Model, dataset: &Dataset, tuple: &InfluenceTuple) -> Result<(f64, Vec<f64>)> {
    let exs = members(dataset, tuple);
    let k = tuple.k();
    if exs.len() != 2 * k + 1 {
        return Err(Error::InvalidExample("group sizes differ".into()));
    }
    let tape = GradientTape::record(model.params(), &model.full_subset(), |v: &ParamVars<'_>| {
        embedding_loss(model, v, exs[0], &exs[1..k + 1], &exs[k + 1..])
    })?;
    Ok((tape.loss(), tape.gradient().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::grad_cosine_influence;
    use crate::autodiff::finite_difference;
    use crate::data::{Example, Split};
    use crate::model::ModelDims;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            vocab: 6,
            hidden: 3,
            labels: 2,
            confounds: 2,
            max_len: 8,
        }
    }

    fn ex(tokens: &[u32], label: usize, confound: usize) -> Example {
        Example {
            tokens: tokens.to_vec(),
            label,
            confound,
            split: Split::Train,
        }
    }

    fn dataset() -> Dataset {
        Dataset::new(vec![
            ex(&[2, 4, 5, 4], 0, 0),
            ex(&[2, 5, 5], 0, 0),
            ex(&[2, 4], 0, 0),
            ex(&[3, 4, 4, 5, 5], 0, 1),
            ex(&[3, 5], 0, 1),
        ])
    }

    fn tuple() -> InfluenceTuple {
        InfluenceTuple {
            probe: 0,
            group_a: vec![1, 2],
            group_b: vec![3, 4],
        }
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        diff / norm(b).max(1e-12)
    }

    #[test]
    fn loss_matches_pairwise_cosines() {
        let model = Model::init(3, tiny_dims()).unwrap();
        let ds = dataset();
        let t = tuple();
        let i = |id: usize| {
            grad_cosine_influence(&model, &ds.examples[id], &ds.examples[0], SubsetKind::Full)
                .unwrap()
                .value
        };
        let expected = ((i(1) + i(2)) / 2.0 - (i(3) + i(4)) / 2.0).powi(2);
        let j = influence_loss(&model, &ds, &t, SubsetKind::Full).unwrap();
        assert!((j - expected).abs() < 1e-12);
        let g = influence_loss_gradient(&model, &ds, &t).unwrap();
        assert!((g.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn equal_groups_give_zero() {
        let model = Model::init(3, tiny_dims()).unwrap();
        let ds = dataset();
        let t = InfluenceTuple {
            probe: 0,
            group_a: vec![1, 3],
            group_b: vec![1, 3],
        };
        assert_eq!(influence_loss(&model, &ds, &t, SubsetKind::Full).unwrap(), 0.0);
        let g = influence_loss_gradient(&model, &ds, &t).unwrap();
        assert!(g.gradient.iter().all(|&x| x == 0.0));
        let (j, grad) = embedding_loss_gradient(&model, &ds, &t).unwrap();
        assert_eq!(j, 0.0);
        assert!(grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn closed_form_matches_finite_differences() {
        let ds = dataset();
        let t = tuple();
        for seed in 0..3 {
            let model = Model::init(seed, tiny_dims()).unwrap();
            let g = influence_loss_gradient(&model, &ds, &t).unwrap();
            let fd = finite_difference(model.params(), &model.full_subset(), 1e-5, |p| {
                let m = Model::from_params(model.dims(), p.clone())?;
                influence_loss(&m, &ds, &t, SubsetKind::Full)
            })
            .unwrap();
            assert!(
                rel_err(&g.gradient, &fd) < 1e-4,
                "seed {seed}: {}",
                rel_err(&g.gradient, &fd)
            );
        }
    }

    #[test]
    fn tuple_gradient_is_sum_of_pairwise_terms() {
        let model = Model::init(5, tiny_dims()).unwrap();
        let ds = dataset();
        let t = tuple();
        let g = influence_loss_gradient(&model, &ds, &t).unwrap();
        let mut expected = vec![0.0; g.gradient.len()];
        for (i, &id) in t.group_a.iter().chain(&t.group_b).enumerate() {
            let terms = cosine_influence_terms(&model, &ds.examples[id], &ds.examples[0]).unwrap();
            let w = 2.0 * g.delta / 2.0 * if i < 2 { 1.0 } else { -1.0 };
            for (e, x) in expected.iter_mut().zip(terms.gradient()) {
                *e += w * x;
            }
        }
        assert!(rel_err(&g.gradient, &expected) < 1e-10);
    }

    #[test]
    fn flipped_r_term_is_wrong() {
        let model = Model::init(1, tiny_dims()).unwrap();
        let ds = dataset();
        let (a, b) = (&ds.examples[3], &ds.examples[0]);
        let terms = cosine_influence_terms(&model, a, b).unwrap();
        let fd = finite_difference(model.params(), &model.full_subset(), 1e-5, |p| {
            let m = Model::from_params(model.dims(), p.clone())?;
            Ok(grad_cosine_influence(&m, a, b, SubsetKind::Full)?.value)
        })
        .unwrap();
        assert!(rel_err(&terms.gradient(), &fd) < 1e-4);
        assert!(rel_err(&terms.combine([1.0, 1.0, 1.0, -1.0]), &fd) > 1e-2);
    }

    #[test]
    fn dot_gradient_matches_finite_differences() {
        let model = Model::init(2, tiny_dims()).unwrap();
        let ds = dataset();
        let (a, b) = (&ds.examples[1], &ds.examples[3]);
        let (_, g) = dot_influence_gradient(&model, a, b).unwrap();
        let full = model.full_subset();
        let fd = finite_difference(model.params(), &full, 1e-5, |p| {
            let m = Model::from_params(model.dims(), p.clone())?;
            Ok(dot(&m.example_gradient(a, &full)?, &m.example_gradient(b, &full)?))
        })
        .unwrap();
        assert!(rel_err(&g, &fd) < 1e-4);
    }

    #[test]
    fn embedding_loss_equals_head_row_influence_loss() {
        let ds = dataset();
        let t = tuple();
        for seed in 0..4 {
            let model = Model::init(seed, tiny_dims()).unwrap();
            let (jp, _) = embedding_loss_gradient(&model, &ds, &t).unwrap();
            let j = influence_loss(&model, &ds, &t, SubsetKind::LabelHeadRow).unwrap();
            assert!((jp - j).abs() < 1e-10);
        }
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let model = Model::init(8, tiny_dims()).unwrap();
        let ds = dataset();
        let t = tuple();
        let (_, g) = embedding_loss_gradient(&model, &ds, &t).unwrap();
        let fd = finite_difference(model.params(), &model.full_subset(), 1e-5, |p| {
            let m = Model::from_params(model.dims(), p.clone())?;
            Ok(embedding_loss_gradient(&m, &ds, &t)?.0)
        })
        .unwrap();
        assert!(rel_err(&g, &fd) < 1e-5);
    }
}
