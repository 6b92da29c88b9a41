//! Instance attribution: gradient dot (TracInCP), gradient cosine and
//! pooled-representation cosine scores, the confound influence difference
//! (CID) diagnostic, and Welch's t-test for two score groups.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::autodiff::ParamSubset;
use crate::data::{Dataset, Example, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par::*;

/// Gradients (or pooled vectors) at or below this norm are degenerate.
pub const NORM_FLOOR: f64 = 1e-12;
const COSINE_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dot,
    Cosine,
    Proj,
}

/// Which parameters a gradient-based score is taken over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetKind {
    /// Every trainable parameter.
    Full,
    /// The label-head row of the probe's label.
    LabelHeadRow,
}

impl SubsetKind {
    pub fn resolve(self, model: &Model, label: usize) -> Result<ParamSubset> {
        match self {
            SubsetKind::Full => Ok(model.full_subset()),
            SubsetKind::LabelHeadRow => model.label_head_row(label),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceScore {
    pub value: f64,
    pub method: Method,
    pub subset: SubsetKind,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `a·b / (‖a‖‖b‖)`, rejecting degenerate norms and clamping to [-1, 1]
/// after checking the value lies within rounding slack of that range.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    cosine_with_norms(a, na, b, nb)
}

fn cosine_with_norms(a: &[f64], na: f64, b: &[f64], nb: f64) -> Result<f64> {
    for n in [na, nb] {
        if n.is_nan() || n <= NORM_FLOOR {
            return Err(Error::DegenerateGradient {
                norm: n,
                floor: NORM_FLOOR,
            });
        }
    }
    let c = dot(a, b) / (na * nb);
    assert!(
        c.abs() <= 1.0 + COSINE_SLACK,
        "cosine {c} outside [-1, 1] beyond rounding slack"
    );
    Ok(c.clamp(-1.0, 1.0))
}

/// Cosine between the label-loss gradients of two examples.
///
/// With [`SubsetKind::LabelHeadRow`] the row is chosen by the probe's label.
pub fn grad_cosine_influence(
    model: &Model,
    trn: &Example,
    prb: &Example,
    subset: SubsetKind,
) -> Result<InfluenceScore> {
    let s = subset.resolve(model, prb.label)?;
    let g_trn = model.example_gradient(trn, &s)?;
    let g_prb = model.example_gradient(prb, &s)?;
    Ok(InfluenceScore {
        value: cosine(&g_trn, &g_prb)?,
        method: Method::Cosine,
        subset,
    })
}

/// Equally weighted TracInCP: `Σ_i ∇L(trn; θ_i) · ∇L(prb; θ_i)`.
pub fn grad_dot_influence(checkpoints: &[Model], trn: &Example, prb: &Example) -> Result<InfluenceScore> {
    assert!(!checkpoints.is_empty(), "at least one checkpoint is required");
    let mut total = 0.0;
    for m in checkpoints {
        let s = m.full_subset();
        total += dot(&m.example_gradient(trn, &s)?, &m.example_gradient(prb, &s)?);
    }
    Ok(InfluenceScore {
        value: total,
        method: Method::Dot,
        subset: SubsetKind::Full,
    })
}

/// Cosine between the pooled representations of two examples.
pub fn proj_influence(model: &Model, trn: &Example, prb: &Example) -> Result<InfluenceScore> {
    let pooled = model.pooled(&[trn, prb])?;
    Ok(InfluenceScore {
        value: cosine(pooled.row(0), pooled.row(1))?,
        method: Method::Proj,
        subset: SubsetKind::LabelHeadRow,
    })
}

/// Per-example vectors whose pairwise comparison gives an influence score.
struct Features {
    vecs: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

fn features(
    model: &Model,
    examples: &[&Example],
    method: Method,
    subset: SubsetKind,
    label: usize,
) -> Result<Features> {
    let vecs: Vec<Vec<f64>> = match method {
        Method::Proj => {
            let pooled = model.pooled(examples)?;
            (0..examples.len()).map(|r| pooled.row(r).to_vec()).collect()
        }
        Method::Dot | Method::Cosine => {
            let s = subset.resolve(model, label)?;
            examples
                .par_iter()
                .map(|e| model.example_gradient(e, &s))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let norms = vecs.iter().map(|v| norm(v)).collect();
    Ok(Features { vecs, norms })
}

impl Features {
    /// Whether example `i` has no usable direction for a cosine score.
    fn degenerate(&self, method: Method, i: usize) -> bool {
        method != Method::Dot && (self.norms[i].is_nan() || self.norms[i] <= NORM_FLOOR)
    }

    fn score(&self, method: Method, i: usize, j: usize) -> Result<f64> {
        match method {
            Method::Dot => Ok(dot(&self.vecs[i], &self.vecs[j])),
            Method::Cosine | Method::Proj => {
                cosine_with_norms(&self.vecs[i], self.norms[i], &self.vecs[j], self.norms[j])
            }
        }
    }
}

/// Influence of the two same-label train groups on one probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupInfluenceReport {
    pub probe: usize,
    /// Same label, same confound.
    pub group_a: Vec<f64>,
    /// Same label, different confound.
    pub group_b: Vec<f64>,
    pub mean_a: f64,
    pub mean_b: f64,
    pub mean_diff: f64,
    /// Welch t statistic and two-sided p value, when both groups allow one.
    pub t: Option<f64>,
    pub p: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CidReport {
    pub method: Method,
    pub subset: SubsetKind,
    pub probes: Vec<GroupInfluenceReport>,
    pub cid: f64,
    /// Probes left out because their own gradient is degenerate.
    pub skipped_probes: Vec<usize>,
    /// Train examples left out of the groups for the same reason.
    pub degenerate_examples: usize,
}

/// Draws `count` distinct train ids as probes.
pub fn choose_probes<R: Rng + ?Sized>(dataset: &Dataset, count: usize, rng: &mut R) -> Vec<usize> {
    let train = dataset.ids(Split::Train);
    let mut probes: Vec<usize> = train.choose_multiple(rng, count.min(train.len())).copied().collect();
    probes.sort_unstable();
    probes
}

/// Confound influence difference over `probe_count` random train probes.
pub fn cid<R: Rng + ?Sized>(
    model: &Model,
    dataset: &Dataset,
    probe_count: usize,
    rng: &mut R,
    method: Method,
    subset: SubsetKind,
) -> Result<CidReport> {
    let probes = choose_probes(dataset, probe_count, rng);
    cid_for_probes(model, dataset, &probes, method, subset)
}

/// CID for fixed probes: the mean over probes of `mean I(A) - mean I(B)`,
/// where A (B) holds every other train example with the probe's label and the
/// same (a different) confound.
///
/// For cosine scores, examples whose gradient norm is at or below
/// [`NORM_FLOOR`] (fully fit) have no direction; they are left out of the
/// groups, and such probes are skipped. Both are reported.
pub fn cid_for_probes(
    model: &Model,
    dataset: &Dataset,
    probes: &[usize],
    method: Method,
    subset: SubsetKind,
) -> Result<CidReport> {
    if probes.is_empty() {
        return Err(Error::EmptyGroup("no probes".into()));
    }
    let train = dataset.ids(Split::Train);
    let mut labels: Vec<usize> = probes.iter().map(|&p| dataset.examples[p].label).collect();
    labels.sort_unstable();
    labels.dedup();

    let mut reports = Vec::with_capacity(probes.len());
    let mut skipped_probes = Vec::new();
    let mut degenerate_examples = 0;
    for label in labels {
        // Features for all train examples carrying this label.
        let members: Vec<usize> = train
            .iter()
            .copied()
            .filter(|&i| dataset.examples[i].label == label)
            .collect();
        let exs: Vec<&Example> = members.iter().map(|&i| &dataset.examples[i]).collect();
        let feats = features(model, &exs, method, subset, label)?;
        degenerate_examples += (0..members.len()).filter(|&j| feats.degenerate(method, j)).count();
        for &probe in probes.iter().filter(|&&p| dataset.examples[p].label == label) {
            let pi = members
                .binary_search(&probe)
                .map_err(|_| Error::InvalidExample(format!("probe {probe} is not a train example")))?;
            if feats.degenerate(method, pi) {
                skipped_probes.push(probe);
                continue;
            }
            let c = dataset.examples[probe].confound;
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for (j, &id) in members.iter().enumerate() {
                if id == probe || feats.degenerate(method, j) {
                    continue;
                }
                let s = feats.score(method, j, pi)?;
                if dataset.examples[id].confound == c {
                    a.push(s);
                } else {
                    b.push(s);
                }
            }
            if a.is_empty() || b.is_empty() {
                return Err(Error::EmptyGroup(format!(
                    "probe {probe} (label {label}, confound {c}) has |A| = {}, |B| = {}",
                    a.len(),
                    b.len()
                )));
            }
            let (mean_a, mean_b) = (mean(&a), mean(&b));
            let (t, p) = match welch_t(&a, &b) {
                Ok((t, p)) => (Some(t), Some(p)),
                Err(_) => (None, None),
            };
            reports.push(GroupInfluenceReport {
                probe,
                group_a: a,
                group_b: b,
                mean_a,
                mean_b,
                mean_diff: mean_a - mean_b,
                t,
                p,
            });
        }
    }
    if reports.is_empty() {
        return Err(Error::DegenerateGradient {
            norm: 0.0,
            floor: NORM_FLOOR,
        });
    }
    if !skipped_probes.is_empty() || degenerate_examples > 0 {
        log::warn!(
            "cid: skipped {} degenerate probes and {degenerate_examples} degenerate train examples",
            skipped_probes.len()
        );
    }
    reports.sort_by_key(|r| r.probe);
    skipped_probes.sort_unstable();
    let cid = reports.iter().map(|r| r.mean_diff).sum::<f64>() / reports.len() as f64;
    Ok(CidReport {
        method,
        subset,
        probes: reports,
        cid,
        skipped_probes,
        degenerate_examples,
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Two-sided Welch t-test with Welch–Satterthwaite degrees of freedom.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let got = a.len().min(b.len());
    if got < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got });
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (variance(a) / na, variance(b) / nb);
    if va == 0.0 && vb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let t = (mean(a) - mean(b)) / (va + vb).sqrt();
    let df = (va + vb).powi(2) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok((t, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welch_identical_groups() {
        let a = [1.0, 2.0, 4.0];
        let (t, p) = welch_t(&a, &a).unwrap();
        assert_eq!(t, 0.0);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn welch_separated_groups() {
        let a = [0.0, 1e-9, -1e-9, 0.0];
        let b = [1.0, 1.0 + 1e-9, 1.0 - 1e-9, 1.0];
        let (t, p) = welch_t(&a, &b).unwrap();
        assert!(t < 0.0);
        assert!(p < 1e-6);
    }

    #[test]
    fn welch_errors() {
        assert!(matches!(
            welch_t(&[1.0], &[1.0, 2.0]),
            Err(Error::InsufficientSamples { .. })
        ));
        assert!(matches!(welch_t(&[1.0, 1.0], &[2.0, 2.0]), Err(Error::ZeroVariance)));
        assert!(welch_t(&[1.0, 1.0], &[2.0, 2.5]).is_ok());
    }

    #[test]
    fn cosine_rejects_degenerate() {
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateGradient { .. })
        ));
        assert!((cosine(&[1.0, 0.0], &[0.0, 2.0]).unwrap()).abs() < 1e-15);
        assert_eq!(cosine(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 1.0);
    }
}
