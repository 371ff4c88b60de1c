//! Leading Hessian eigenvalues of a training loss with respect to the
//! parameters, from Hessian-vector products, power iteration and implicit
//! deflation.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelError};
use crate::numerics::{flatten, hvp_exact, hvp_finite_difference, unflatten, NumericsError, Objective, Tensor};
use crate::training::{sample_negatives, BatchObjective, RecBatch, StepBatch, TaskData, TrainError};
use crate::util::rng_for;

#[derive(Debug, Error)]
pub enum CurvatureError {
    #[error("k must lie in 1..={dim}, got {k}")]
    BadK { k: usize, dim: usize },
    #[error("vector of length {got} for an operator of dimension {dim}")]
    Dim { got: usize, dim: usize },
    #[error("parameters contain non-finite values")]
    NonFiniteParams,
    #[error("no held-out pairs to build a batch from")]
    EmptyBatch,
    #[error("eigen report: {0}")]
    Format(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A symmetric linear operator available only through products.
pub trait HvpOperator {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>, CurvatureError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HvpMethod {
    /// Forward-over-reverse differentiation.
    Exact,
    /// Central difference of gradients.
    FiniteDifference,
}

/// Hessian of an [`Objective`] at fixed parameters.
pub struct ObjectiveHvp<'a, O: Objective> {
    pub objective: &'a O,
    pub params: &'a [Tensor],
    pub method: HvpMethod,
}

impl<'a, O: Objective> ObjectiveHvp<'a, O> {
    pub fn new(objective: &'a O, params: &'a [Tensor]) -> Result<Self, CurvatureError> {
        if !params.iter().all(|p| p.all_finite()) {
            return Err(CurvatureError::NonFiniteParams);
        }
        Ok(Self {
            objective,
            params,
            method: HvpMethod::Exact,
        })
    }
}

impl<O: Objective> HvpOperator for ObjectiveHvp<'_, O> {
    fn dim(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>, CurvatureError> {
        let dir = unflatten(v, self.params)?;
        let hv = match self.method {
            HvpMethod::Exact => hvp_exact(self.objective, self.params, &dir)?,
            HvpMethod::FiniteDifference => hvp_finite_difference(self.objective, self.params, &dir)?,
        };
        Ok(flatten(&hv))
    }
}

/// A dense symmetric matrix in row-major order.
pub struct DenseSymmetric {
    pub n: usize,
    pub data: Vec<f64>,
}

impl DenseSymmetric {
    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        let mut data = vec![0.0; n * n];
        for (i, v) in values.iter().enumerate() {
            data[i * n + i] = *v;
        }
        Self { n, data }
    }
}

impl HvpOperator for DenseSymmetric {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>, CurvatureError> {
        check_len(v, self.n)?;
        Ok(self.data.chunks(self.n).map(|row| dot(row, v)).collect())
    }
}

fn check_len(v: &[f64], dim: usize) -> Result<(), CurvatureError> {
    if v.len() != dim {
        return Err(CurvatureError::Dim { got: v.len(), dim });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Applies the operator to every basis vector and symmetrizes the result.
/// Row-major `dim × dim`.
pub fn materialize(op: &dyn HvpOperator) -> Result<Vec<f64>, CurvatureError> {
    let n = op.dim();
    let mut cols = Vec::with_capacity(n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        cols.push(op.apply(&e)?);
        e[j] = 0.0;
    }
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] = 0.5 * (cols[j][i] + cols[i][j]);
        }
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTag {
    /// Language-model loss alone.
    L1,
    /// Downstream recommendation loss alone.
    L2,
    /// `L1 + λ·L2`.
    Total,
}

impl LossTag {
    pub fn as_str(self) -> &'static str {
        match self {
            LossTag::L1 => "l1",
            LossTag::L2 => "l2",
            LossTag::Total => "total",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "l1" => Some(LossTag::L1),
            "l2" => Some(LossTag::L2),
            "total" => Some(LossTag::Total),
            _ => None,
        }
    }

    /// Keeps the parts of `batch` this loss reads.
    pub fn select(self, batch: &StepBatch) -> StepBatch {
        match self {
            LossTag::L1 => StepBatch {
                lm: batch.lm.clone(),
                rec: Vec::new(),
            },
            LossTag::L2 => StepBatch {
                lm: Vec::new(),
                rec: batch.rec.clone(),
            },
            LossTag::Total => batch.clone(),
        }
    }
}

/// A fixed batch from test-split items: each user's full training and
/// validation history as LM text, plus its test item against `negatives`
/// sampled non-positives for the rec loss.
pub fn held_out_batch(task: &TaskData, head: usize, max_users: usize, negatives: usize, seed: u64) -> Result<StepBatch, CurvatureError> {
    let mut order: Vec<usize> = (0..task.users.len()).filter(|&u| task.users[u].test.is_some()).collect();
    order.shuffle(&mut rng_for(seed, &[b"curvature-users", task.name.as_bytes()]));
    order.truncate(max_users);
    order.sort_unstable();
    if order.is_empty() {
        return Err(CurvatureError::EmptyBatch);
    }
    let mut rec = RecBatch::new(head);
    let mut lm = Vec::new();
    let mut seen = HashMap::new();
    for u in order {
        let user = &task.users[u];
        let test = user.test.expect("filtered");
        let items: Vec<usize> = user.train.iter().chain(&user.val).copied().collect();
        if items.is_empty() {
            continue;
        }
        let history = task.history_tokens(&items)?;
        lm.push(history.clone());
        rec.push(history.clone(), test, &task.item_tokens[test], 1.0, &mut seen);
        for n in sample_negatives(&user.user_id, negatives, task.n_items(), &user.positives(), seed, u64::MAX - 1)? {
            rec.push(history.clone(), n, &task.item_tokens[n], 0.0, &mut seen);
        }
    }
    if rec.is_empty() {
        return Err(CurvatureError::EmptyBatch);
    }
    Ok(StepBatch { lm: vec![lm], rec: vec![rec] })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigPair {
    pub value: f64,
    /// Unit eigenvector estimate.
    pub vector: Vec<f64>,
    /// `‖Hv − λv‖` for the undeflated operator.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigReport {
    pub loss: LossTag,
    /// Sorted by value, largest first.
    pub pairs: Vec<EigPair>,
    pub param_count: usize,
    pub checkpoint_hash: String,
    pub seed: u64,
}

impl EigReport {
    pub fn eigenvalues(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.value).collect()
    }

    /// Set when any estimate hit `max_iters` before converging.
    pub fn warning(&self) -> bool {
        self.pairs.iter().any(|p| !p.converged)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("# loss,index,eigenvalue,residual,iterations,converged,seed,param_count,checkpoint_hash\n");
        for (i, p) in self.pairs.iter().enumerate() {
            writeln!(
                s,
                "{},{i},{:?},{:?},{},{},{},{},{}",
                self.loss.as_str(),
                p.value,
                p.residual,
                p.iterations,
                p.converged,
                self.seed,
                self.param_count,
                self.checkpoint_hash
            )
            .expect("string write");
        }
        s
    }

    /// Reads the records back; eigenvectors are not stored.
    pub fn from_csv(text: &str) -> Result<Self, CurvatureError> {
        let bad = |m: String| CurvatureError::Format(m);
        let mut report: Option<EigReport> = None;
        for line in text.lines().filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad(format!("expected 9 fields: {line}")));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(format!("field {i}: {}", f[i])));
            let int = |i: usize| f[i].parse::<u64>().map_err(|_| bad(format!("field {i}: {}", f[i])));
            let loss = LossTag::parse(f[0]).ok_or_else(|| bad(format!("loss {}", f[0])))?;
            let r = report.get_or_insert_with(|| EigReport {
                loss,
                pairs: Vec::new(),
                param_count: 0,
                checkpoint_hash: f[8].to_string(),
                seed: 0,
            });
            r.seed = int(6)?;
            r.param_count = int(7)? as usize;
            r.pairs.push(EigPair {
                value: num(2)?,
                vector: Vec::new(),
                residual: num(3)?,
                iterations: int(4)? as usize,
                converged: f[5] == "true",
            });
        }
        report.ok_or_else(|| bad("no records".into()))
    }

    pub fn save(&self, path: &Path) -> Result<(), CurvatureError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Power iteration with implicit deflation `H − Σ λᵢ vᵢvᵢᵀ`. Each round
/// finds the largest-magnitude eigenvalue of the deflated operator and
/// stops when successive Rayleigh quotients differ by less than
/// `tol·max(1, |λ|)`. Rounds that run out of iterations keep their last
/// estimate with `converged = false`. The result is sorted by value.
pub fn top_k_eigs(op: &dyn HvpOperator, k: usize, max_iters: usize, tol: f64, seed: u64) -> Result<Vec<EigPair>, CurvatureError> {
    let n = op.dim();
    if k == 0 || k > n {
        return Err(CurvatureError::BadK { k, dim: n });
    }
    let mut rng = rng_for(seed, &[b"power-iteration"]);
    let mut found: Vec<EigPair> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        orthogonalize(&mut v, &found);
        normalize(&mut v);
        let mut lambda = f64::NAN;
        let mut hv_raw = Vec::new();
        let mut converged = false;
        let mut iterations = 0;
        while iterations < max_iters {
            iterations += 1;
            hv_raw = op.apply(&v)?;
            let mut w = hv_raw.clone();
            for p in &found {
                let c = p.value * dot(&p.vector, &v);
                w.iter_mut().zip(&p.vector).for_each(|(x, y)| *x -= c * y);
            }
            let rq = dot(&v, &w);
            let done = (rq - lambda).abs() < tol * rq.abs().max(1.0);
            lambda = rq;
            orthogonalize(&mut w, &found);
            if norm(&w) == 0.0 {
                converged = true;
                break;
            }
            normalize(&mut w);
            if done {
                converged = true;
                break;
            }
            v = w;
        }
        // One more product at the final vector so value and residual agree.
        hv_raw = if iterations > 0 { op.apply(&v)? } else { hv_raw };
        let value = dot(&v, &hv_raw);
        let residual = norm(&hv_raw.iter().zip(&v).map(|(a, b)| a - value * b).collect::<Vec<_>>());
        found.push(EigPair {
            value,
            vector: v,
            residual,
            iterations,
            converged,
        });
    }
    if found.iter().any(|p| !p.converged) {
        log::warn!("power iteration stopped at {max_iters} iterations before converging");
    }
    found.sort_by(|a, b| b.value.total_cmp(&a.value));
    Ok(found)
}

fn orthogonalize(v: &mut [f64], basis: &[EigPair]) {
    for p in basis {
        let c = dot(&p.vector, v);
        v.iter_mut().zip(&p.vector).for_each(|(x, y)| *x -= c * y);
    }
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurvaturePlan {
    pub loss: LossTag,
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    /// Users in the held-out batch.
    pub batch_users: usize,
    pub negatives_per_positive: usize,
    /// Weight on the rec loss for [`LossTag::Total`].
    pub lambda: f64,
    pub head: usize,
    pub seed: u64,
}

impl Default for CurvaturePlan {
    fn default() -> Self {
        Self {
            loss: LossTag::L2,
            k: 5,
            max_iters: 300,
            tol: 1e-6,
            batch_users: 16,
            negatives_per_positive: 1,
            lambda: 1.0,
            head: 0,
            seed: 0,
        }
    }
}

/// Top eigenvalues of the selected loss of `model` on a fixed held-out
/// batch of `task`, with respect to every model parameter.
pub fn model_eigs(model: &Model, task: &TaskData, plan: &CurvaturePlan, checkpoint_hash: &str) -> Result<EigReport, CurvatureError> {
    let batch = held_out_batch(task, plan.head, plan.batch_users, plan.negatives_per_positive, plan.seed)?;
    let batch = plan.loss.select(&batch);
    let objective = BatchObjective {
        config: model.config(),
        batch: &batch,
        lambda: plan.lambda,
    };
    let op = ObjectiveHvp::new(&objective, model.params())?;
    let pairs = top_k_eigs(&op, plan.k, plan.max_iters, plan.tol, plan.seed)?;
    Ok(EigReport {
        loss: plan.loss,
        pairs,
        param_count: op.dim(),
        checkpoint_hash: checkpoint_hash.to_string(),
        seed: plan.seed,
    })
}
