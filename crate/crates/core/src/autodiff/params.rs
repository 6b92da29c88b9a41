use std::ops::Range;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors in a fixed declaration order.
///
/// The declaration order is the canonical flattening order: every flat
/// vector (gradient, Hessian-vector product, optimizer moment) concatenates
/// the tensors in this order, each in row-major layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.index_of(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.index_of(name)?;
        Ok(&mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites every tensor from a flat vector in canonical order.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.num_scalars();
        if flat.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Mutable access to one scalar by its canonical flat index.
    pub fn scalar_mut(&mut self, mut index: usize) -> &mut f64 {
        for t in &mut self.tensors {
            if index < t.len() {
                return &mut t.data_mut()[index];
            }
            index -= t.len();
        }
        panic!("flat index out of range");
    }

    /// Records every tensor as a leaf on `tape`.
    pub fn leaves<'t>(&'t self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            names: &self.names,
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
            tape,
        }
    }
}

/// Tape leaves for a [`ParamSet`], addressable by name.
pub struct ParamVars<'t> {
    names: &'t [String],
    vars: Vec<Var<'t>>,
    tape: &'t Tape,
}

impl<'t> ParamVars<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Leaf for `name`. Panics on unknown names, which are programming errors
    /// inside loss builders.
    pub fn get(&self, name: &str) -> Var<'t> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named `{name}`"));
        self.vars[i]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Block {
    param: usize,
    range: Range<usize>,
}

/// Selection of parameter scalars that participate in a gradient.
///
/// Blocks are kept in canonical parameter order, so a subset flattening is
/// the full flattening with unselected entries dropped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSubset {
    blocks: Vec<Block>,
    shapes: Vec<Vec<usize>>,
}

impl ParamSubset {
    pub fn full(params: &ParamSet) -> Self {
        Self {
            blocks: params
                .tensors
                .iter()
                .enumerate()
                .map(|(param, t)| Block {
                    param,
                    range: 0..t.len(),
                })
                .collect(),
            shapes: shapes(params),
        }
    }

    pub fn named(params: &ParamSet, names: &[&str]) -> Result<Self> {
        let mut idx = names.iter().map(|n| params.index_of(n)).collect::<Result<Vec<_>>>()?;
        idx.sort_unstable();
        idx.dedup();
        Ok(Self {
            blocks: idx
                .into_iter()
                .map(|param| Block {
                    param,
                    range: 0..params.tensors[param].len(),
                })
                .collect(),
            shapes: shapes(params),
        })
    }

    /// Rows `rows` of the rank-2 parameter `name`.
    pub fn rows(params: &ParamSet, name: &str, rows: Range<usize>) -> Result<Self> {
        let param = params.index_of(name)?;
        let t = &params.tensors[param];
        if t.rank() != 2 || rows.end > t.shape()[0] || rows.start >= rows.end {
            return Err(Error::ShapeMismatch {
                op: "row subset",
                lhs: t.shape().to_vec(),
                rhs: vec![rows.start, rows.end],
            });
        }
        let cols = t.shape()[1];
        Ok(Self {
            blocks: vec![Block {
                param,
                range: rows.start * cols..rows.end * cols,
            }],
            shapes: shapes(params),
        })
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.range.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn touches(&self, param: usize) -> bool {
        self.blocks.iter().any(|b| b.param == param)
    }

    /// Selected entries of `tensors` (one per parameter, canonical order).
    pub fn gather(&self, tensors: &[Tensor]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for b in &self.blocks {
            out.extend_from_slice(&tensors[b.param].data()[b.range.clone()]);
        }
        out
    }

    /// Full-shape tensors holding `flat` at the selected positions and zero elsewhere.
    pub fn scatter(&self, flat: &[f64]) -> Result<Vec<Tensor>> {
        if flat.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: flat.len(),
            });
        }
        let mut out: Vec<Tensor> = self.shapes.iter().map(|s| Tensor::zeros(s)).collect();
        let mut offset = 0;
        for b in &self.blocks {
            let n = b.range.len();
            out[b.param].data_mut()[b.range.clone()].copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }

    /// Position in the full canonical flattening of each subset coordinate.
    pub fn full_indices(&self) -> Vec<usize> {
        let mut starts = Vec::with_capacity(self.shapes.len());
        let mut acc = 0;
        for s in &self.shapes {
            starts.push(acc);
            acc += s.iter().product::<usize>();
        }
        self.blocks
            .iter()
            .flat_map(|b| {
                let start = starts[b.param];
                b.range.clone().map(move |i| start + i)
            })
            .collect()
    }
}

fn shapes(params: &ParamSet) -> Vec<Vec<usize>> {
    params.tensors.iter().map(|t| t.shape().to_vec()).collect()
}
