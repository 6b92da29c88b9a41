//! Bag-of-tokens classifier: embedding sum → tanh hidden layer → pooled
//! representation → linear label head, plus a confound head that sits behind
//! a gradient-reversal boundary.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, ParamSet, ParamSubset, ParamVars, Tape, Tensor, Var};
use crate::data::Example;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const CONF_A: u32 = 2;
pub const CONF_B: u32 = 3;
/// Ids below this are reserved.
pub const FIRST_CONTENT: u32 = 4;

pub const EMBEDDING: &str = "embedding";
pub const HIDDEN_W: &str = "hidden_w";
pub const HIDDEN_B: &str = "hidden_b";
pub const LABEL_W: &str = "label_w";
pub const LABEL_B: &str = "label_b";
pub const CONFOUND_W: &str = "confound_w";
pub const CONFOUND_B: &str = "confound_b";

/// Parameters below both heads.
pub const ENCODER: [&str; 3] = [EMBEDDING, HIDDEN_W, HIDDEN_B];

const EMBED_INIT: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub hidden: usize,
    pub labels: usize,
    pub confounds: usize,
    pub max_len: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            vocab: 64,
            hidden: 32,
            labels: 2,
            confounds: 2,
            max_len: 48,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < FIRST_CONTENT as usize {
            return Err(Error::InvalidSpec(format!("vocab {} < 4 reserved ids", self.vocab)));
        }
        if self.hidden == 0 || self.labels == 0 || self.confounds == 0 || self.max_len == 0 {
            return Err(Error::InvalidSpec(format!("dims must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn check_example(&self, ex: &Example) -> Result<()> {
        if ex.tokens.is_empty() || ex.tokens.len() > self.max_len {
            return Err(Error::InvalidExample(format!(
                "length {} outside [1, {}]",
                ex.tokens.len(),
                self.max_len
            )));
        }
        if let Some(t) = ex.tokens.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(Error::InvalidExample(format!("token {t} >= vocab {}", self.vocab)));
        }
        if ex.label >= self.labels {
            return Err(Error::InvalidExample(format!("label {} >= {}", ex.label, self.labels)));
        }
        if ex.confound >= self.confounds {
            return Err(Error::InvalidExample(format!(
                "confound {} >= {}",
                ex.confound, self.confounds
            )));
        }
        Ok(())
    }
}

/// Model snapshot. Parameters are stored in canonical order:
/// embedding, hidden_w, hidden_b, label_w, label_b, confound_w, confound_b.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    dims: ModelDims,
    params: ParamSet,
    /// `(token, row)`: the token reads embedding row `row` instead of its own.
    ties: Vec<(u32, u32)>,
}

/// Forward outputs for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub pooled: Vec<f64>,
}

impl Model {
    /// Deterministic initialization: embeddings uniform on `[0, 0.3)`, other
    /// weights uniform on `±1/√d`, zero biases, zero PAD row.
    pub fn init(seed: u64, dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.hidden;
        let fan = 1.0 / (d as f64).sqrt();
        let mut uniform = |shape: &[usize], scale: f64| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches")
        };
        // Non-negative rows give the pooled sum a component that grows with length.
        let mut embedding = uniform(&[dims.vocab, d], 1.0);
        embedding
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = (*x + 1.0) / 2.0 * EMBED_INIT);
        embedding.row_mut(PAD as usize).fill(0.0);
        let hidden_w = uniform(&[d, d], fan);
        let label_w = uniform(&[dims.labels, d], fan);
        let confound_w = uniform(&[dims.confounds, d], fan);

        let mut params = ParamSet::new();
        params.push(EMBEDDING, embedding)?;
        params.push(HIDDEN_W, hidden_w)?;
        params.push(HIDDEN_B, Tensor::zeros(&[d]))?;
        params.push(LABEL_W, label_w)?;
        params.push(LABEL_B, Tensor::zeros(&[dims.labels]))?;
        params.push(CONFOUND_W, confound_w)?;
        params.push(CONFOUND_B, Tensor::zeros(&[dims.confounds]))?;
        Ok(Self {
            dims,
            params,
            ties: Vec::new(),
        })
    }

    /// Builds a model from explicit tensors; shapes are checked against `dims`.
    pub fn from_params(dims: ModelDims, params: ParamSet) -> Result<Self> {
        dims.validate()?;
        let d = dims.hidden;
        let expected: [(&str, Vec<usize>); 7] = [
            (EMBEDDING, vec![dims.vocab, d]),
            (HIDDEN_W, vec![d, d]),
            (HIDDEN_B, vec![d]),
            (LABEL_W, vec![dims.labels, d]),
            (LABEL_B, vec![dims.labels]),
            (CONFOUND_W, vec![dims.confounds, d]),
            (CONFOUND_B, vec![dims.confounds]),
        ];
        if params.len() != expected.len() {
            return Err(Error::InvalidSpec(format!("expected 7 tensors, got {}", params.len())));
        }
        for ((name, shape), (have, t)) in expected.iter().zip(params.iter()) {
            if *name != have {
                return Err(Error::InvalidSpec(format!("expected tensor `{name}`, found `{have}`")));
            }
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "model tensor",
                    lhs: t.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
        }
        Ok(Self {
            dims,
            params,
            ties: Vec::new(),
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn full_subset(&self) -> ParamSubset {
        ParamSubset::full(&self.params)
    }

    /// The single row `W_(y)` of the label head.
    pub fn label_head_row(&self, y: usize) -> Result<ParamSubset> {
        ParamSubset::rows(&self.params, LABEL_W, y..y + 1)
    }

    pub fn encoder_subset(&self) -> ParamSubset {
        ParamSubset::named(&self.params, &ENCODER).expect("encoder params exist")
    }

    pub fn confound_head_subset(&self) -> ParamSubset {
        ParamSubset::named(&self.params, &[CONFOUND_W, CONFOUND_B]).expect("head params exist")
    }

    /// Makes `token` share the embedding row of `row`. Its own row is left in
    /// place but no longer receives gradient.
    pub fn tie_embedding(&mut self, token: u32, row: u32) -> Result<()> {
        let v = self.dims.vocab as u32;
        if token >= v || row >= v || token == PAD || row == PAD {
            return Err(Error::InvalidSpec(format!("cannot tie token {token} to row {row}")));
        }
        let row = self.row_of(row);
        if row == token {
            return Err(Error::InvalidSpec(format!("tying {token} to itself")));
        }
        self.ties.retain(|&(t, _)| t != token);
        for tie in &mut self.ties {
            if tie.1 == token {
                tie.1 = row;
            }
        }
        self.ties.push((token, row));
        self.ties.sort_unstable();
        Ok(())
    }

    pub fn ties(&self) -> &[(u32, u32)] {
        &self.ties
    }

    fn row_of(&self, token: u32) -> u32 {
        self.ties.iter().find(|&&(t, _)| t == token).map_or(token, |&(_, r)| r)
    }

    /// Token counts `[batch, vocab]`; PAD is never counted.
    fn counts(&self, batch: &[&Example]) -> Tensor {
        let v = self.dims.vocab;
        let mut c = Tensor::zeros(&[batch.len(), v]);
        for (r, ex) in batch.iter().enumerate() {
            let row = c.row_mut(r);
            for &t in &ex.tokens {
                let t = self.row_of(t);
                if t != PAD && (t as usize) < v {
                    row[t as usize] += 1.0;
                }
            }
        }
        c
    }

    /// Pooled representation `[batch, hidden]`:
    /// `tanh(W_h · Σ embed(token) + b_h)`.
    pub fn encode<'t>(&self, vars: &ParamVars<'t>, batch: &[&Example]) -> Var<'t> {
        let tape = vars.tape();
        for ex in batch {
            if let Err(e) = self.dims.check_example(ex) {
                tape.fail(e);
            }
        }
        let counts = tape.constant(self.counts(batch));
        let summed = counts.matmul(vars.get(EMBEDDING));
        let pre = summed.matmul_t(vars.get(HIDDEN_W), false, true) + vars.get(HIDDEN_B).broadcast_rows(batch.len());
        pre.tanh()
    }

    pub fn label_logits<'t>(&self, vars: &ParamVars<'t>, pooled: Var<'t>) -> Var<'t> {
        let rows = pooled.shape()[0];
        pooled.matmul_t(vars.get(LABEL_W), false, true) + vars.get(LABEL_B).broadcast_rows(rows)
    }

    pub fn confound_logits<'t>(&self, vars: &ParamVars<'t>, pooled: Var<'t>) -> Var<'t> {
        let rows = pooled.shape()[0];
        pooled.matmul_t(vars.get(CONFOUND_W), false, true) + vars.get(CONFOUND_B).broadcast_rows(rows)
    }

    /// Mean label cross-entropy over the batch.
    pub fn label_loss<'t>(&self, vars: &ParamVars<'t>, batch: &[&Example]) -> Var<'t> {
        let pooled = self.encode(vars, batch);
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
        cross_entropy(self.label_logits(vars, pooled), &labels)
    }

    /// Mean confound cross-entropy without reversal.
    pub fn confound_loss<'t>(&self, vars: &ParamVars<'t>, batch: &[&Example]) -> Var<'t> {
        let pooled = self.encode(vars, batch);
        let conf: Vec<usize> = batch.iter().map(|e| e.confound).collect();
        cross_entropy(self.confound_logits(vars, pooled), &conf)
    }

    /// Confound cross-entropy whose gradient into the shared encoder is negated.
    pub fn confound_loss_reversed<'t>(&self, vars: &ParamVars<'t>, batch: &[&Example]) -> Var<'t> {
        let pooled = self.encode(vars, batch).grad_reverse();
        let conf: Vec<usize> = batch.iter().map(|e| e.confound).collect();
        cross_entropy(self.confound_logits(vars, pooled), &conf)
    }

    /// `L_label + λ·L_confound` with the confound term behind gradient reversal,
    /// sharing one encoder pass.
    pub fn adversarial_loss<'t>(&self, vars: &ParamVars<'t>, batch: &[&Example], lambda: f64) -> Var<'t> {
        let pooled = self.encode(vars, batch);
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
        let conf: Vec<usize> = batch.iter().map(|e| e.confound).collect();
        let label = cross_entropy(self.label_logits(vars, pooled), &labels);
        let confound = cross_entropy(self.confound_logits(vars, pooled.grad_reverse()), &conf);
        label + confound.scale(lambda)
    }

    pub fn forward(&self, ex: &Example) -> Result<Forward> {
        self.dims.check_example(ex)?;
        let tape = Tape::new();
        let vars = self.params.leaves(&tape);
        let pooled = self.encode(&vars, &[ex]);
        let logits = self.label_logits(&vars, pooled);
        tape.check()?;
        Ok(Forward {
            logits: logits.value().into_data(),
            pooled: pooled.value().into_data(),
        })
    }

    /// Pooled representations, one row per example.
    pub fn pooled(&self, examples: &[&Example]) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.params.leaves(&tape);
        let pooled = self.encode(&vars, examples);
        tape.check()?;
        Ok(pooled.value())
    }

    /// Label loss value of a single example.
    pub fn example_loss(&self, ex: &Example) -> Result<f64> {
        Ok(autodiff::evaluate(&self.params, |v: &ParamVars<'_>| self.label_loss(v, &[ex]))?.item())
    }

    /// Flat label-loss gradient of one example over `subset`.
    pub fn example_gradient(&self, ex: &Example, subset: &ParamSubset) -> Result<Vec<f64>> {
        autodiff::gradient(&self.params, subset, |v: &ParamVars<'_>| self.label_loss(v, &[ex]))
    }

    pub fn predict(&self, examples: &[&Example]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(256) {
            let tape = Tape::new();
            let vars = self.params.leaves(&tape);
            let logits = self.label_logits(&vars, self.encode(&vars, chunk));
            tape.check()?;
            let logits = logits.value();
            out.extend((0..chunk.len()).map(|r| argmax(logits.row(r))));
        }
        Ok(out)
    }

    pub fn accuracy(&self, examples: &[&Example]) -> Result<f64> {
        if examples.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(examples)?;
        let hits = pred.iter().zip(examples).filter(|(p, e)| **p == e.label).count();
        Ok(hits as f64 / examples.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_comments(path, &[])
    }

    /// Writes the checkpoint with `# comment` lines after the dims header.
    pub fn save_with_comments(&self, path: &Path, comments: &[String]) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let d = self.dims;
        let mut text = String::new();
        writeln!(text, "inftune-checkpoint 1").unwrap();
        writeln!(
            text,
            "dims {} {} {} {} {}",
            d.vocab, d.hidden, d.labels, d.confounds, d.max_len
        )
        .unwrap();
        for c in comments {
            writeln!(text, "# {c}").unwrap();
        }
        for (token, row) in &self.ties {
            writeln!(text, "tie {token} {row}").unwrap();
        }
        for (name, t) in self.params.iter() {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(text, "tensor {name} {}", shape.join(" ")).unwrap();
            let vals: Vec<String> = t.data().iter().map(f64::to_string).collect();
            writeln!(text, "{}", vals.join(" ")).unwrap();
        }
        w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(path, e))?;
        let perr = |line: usize, reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: line + 1,
            reason,
        };
        let num = |line: usize, tok: &str| -> Result<usize> {
            tok.parse().map_err(|_| perr(line, format!("bad integer `{tok}`")))
        };
        if lines.first().map(String::as_str) != Some("inftune-checkpoint 1") {
            return Err(perr(0, "missing checkpoint header".into()));
        }
        let dims_line: Vec<&str> = lines
            .get(1)
            .ok_or_else(|| perr(1, "missing dims".into()))?
            .split_whitespace()
            .collect();
        if dims_line.len() != 6 || dims_line[0] != "dims" {
            return Err(perr(1, "malformed dims line".into()));
        }
        let dims = ModelDims {
            vocab: num(1, dims_line[1])?,
            hidden: num(1, dims_line[2])?,
            labels: num(1, dims_line[3])?,
            confounds: num(1, dims_line[4])?,
            max_len: num(1, dims_line[5])?,
        };
        let mut params = ParamSet::new();
        let mut ties = Vec::new();
        let mut i = 2;
        while i < lines.len() {
            if lines[i].trim().is_empty() || lines[i].starts_with('#') {
                i += 1;
                continue;
            }
            let head: Vec<&str> = lines[i].split_whitespace().collect();
            if head.first() == Some(&"tie") {
                if head.len() != 3 {
                    return Err(perr(i, "expected `tie <token> <row>`".into()));
                }
                ties.push((num(i, head[1])? as u32, num(i, head[2])? as u32, i));
                i += 1;
                continue;
            }
            if head.len() < 2 || head[0] != "tensor" {
                return Err(perr(i, "expected `tensor <name> <shape..>`".into()));
            }
            let shape = head[2..].iter().map(|t| num(i, t)).collect::<Result<Vec<_>>>()?;
            let body = lines
                .get(i + 1)
                .ok_or_else(|| perr(i + 1, "missing tensor values".into()))?;
            let data = body
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| perr(i + 1, format!("bad float `{t}`"))))
                .collect::<Result<Vec<_>>>()?;
            let tensor = Tensor::new(shape, data).map_err(|e| perr(i + 1, e.to_string()))?;
            params.push(head[1], tensor).map_err(|e| perr(i, e.to_string()))?;
            i += 2;
        }
        let mut model = Self::from_params(dims, params)?;
        for (token, row, line) in ties {
            model.tie_embedding(token, row).map_err(|e| perr(line, e.to_string()))?;
        }
        Ok(model)
    }
}

/// Mean softmax cross-entropy of `logits [batch, classes]` at `targets`.
pub fn cross_entropy<'t>(logits: Var<'t>, targets: &[usize]) -> Var<'t> {
    let tape = logits.tape();
    let value = logits.value();
    let (rows, classes) = (value.shape()[0], value.shape()[1]);
    // per-row max shift, held constant: the log-sum-exp gradient is shift invariant
    let shift: Vec<f64> = (0..rows)
        .map(|r| value.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut onehot = Tensor::zeros(&[rows, classes]);
    for (r, &t) in targets.iter().enumerate() {
        if t < classes {
            onehot.row_mut(r)[t] = 1.0;
        }
    }
    let shifted = logits - tape.constant(Tensor::vector(shift)).broadcast_cols(classes);
    let lse = shifted.exp().sum_cols().ln();
    let picked = (shifted * tape.constant(onehot)).sum_cols();
    (lse - picked).sum().scale(1.0 / rows as f64)
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Softmax probabilities.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}
