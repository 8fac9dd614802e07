//! Compilation of expression trees into trainable models and the inner
//! gradient-descent loop.
//!
//! Each shape placeholder becomes a small MLP (5 hidden layers of width 10,
//! ELU activations, linear output) preceded by an input standardizer that
//! uses batch statistics while training and running statistics at
//! evaluation time. Gradients are exact reverse-mode derivatives of the batch
//! MSE, including the flow through batch means and variances.

use crate::expr::{validate_transparent, BinaryOp, ExprNode, ExprTree, Violation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const LAYER_WIDTHS: [usize; 7] = [1, 10, 10, 10, 10, 10, 1];
pub const DIV_EPSILON: f64 = 1e-6;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("tree contains a constant node; search trees are constant-free")]
    ConstantInTree,
    #[error("non-finite output in forward pass")]
    NonFiniteOutput,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("training diverged: non-finite loss")]
    TrainingDiverged,
    #[error("degenerate target: validation variance is zero")]
    DegenerateTarget,
    #[error("input has {got} columns, model expects {want}")]
    ColumnMismatch { got: usize, want: usize },
    #[error("unknown shape id {0}")]
    UnknownShape(usize),
    #[error("model file error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `[n_out x n_in]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    fn init(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Layer {
        let a = (1.0 / n_in as f64).sqrt();
        let w = (0..n_in * n_out).map(|_| rng.gen_range(-a..a)).collect();
        let b = (0..n_out).map(|_| rng.gen_range(-a..a)).collect();
        Layer { n_in, n_out, w, b }
    }
}

/// Univariate neural shape function.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeFunctionModel {
    pub layers: Vec<Layer>,
}

fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp() - 1.0
    }
}

fn elu_deriv(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        z.exp()
    }
}

/// Per-row forward cache: inputs and pre-activations per layer.
#[derive(Debug, Clone)]
struct MlpRowCache {
    /// inputs[l] is the input vector of layer l
    inputs: Vec<Vec<f64>>,
    /// preacts[l] is the pre-activation output of layer l
    preacts: Vec<Vec<f64>>,
}

impl ShapeFunctionModel {
    fn init(rng: &mut ChaCha8Rng) -> ShapeFunctionModel {
        let layers = LAYER_WIDTHS
            .windows(2)
            .map(|w| Layer::init(w[0], w[1], rng))
            .collect();
        ShapeFunctionModel { layers }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn forward_row(&self, x: f64, cache: Option<&mut MlpRowCache>) -> f64 {
        let mut a = vec![x];
        let mut inputs = Vec::new();
        let mut preacts = Vec::new();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.n_out];
            for o in 0..layer.n_out {
                let mut acc = layer.b[o];
                let row = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                for (wi, ai) in row.iter().zip(&a) {
                    acc += wi * ai;
                }
                z[o] = acc;
            }
            if cache.is_some() {
                inputs.push(a.clone());
                preacts.push(z.clone());
            }
            a = if l == last {
                z
            } else {
                z.iter().map(|&v| elu(v)).collect()
            };
        }
        if let Some(c) = cache {
            c.inputs = inputs;
            c.preacts = preacts;
        }
        a[0]
    }

    /// Backward through the MLP for one row. `g` is dL/d(output); returns
    /// dL/d(input) and accumulates parameter gradients into `grad`.
    fn backward_row(&self, cache: &MlpRowCache, g: f64, grad: &mut [f64]) -> f64 {
        let last = self.layers.len() - 1;
        let mut d = vec![g];
        let mut offset = grad.len();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            offset -= layer.w.len() + layer.b.len();
            // d currently holds dL/d(activation output of layer l)
            let dz: Vec<f64> = if l == last {
                d.clone()
            } else {
                cache.preacts[l]
                    .iter()
                    .zip(&d)
                    .map(|(&z, &dv)| dv * elu_deriv(z))
                    .collect()
            };
            let (gw, gb) = grad[offset..offset + layer.w.len() + layer.b.len()]
                .split_at_mut(layer.w.len());
            let input = &cache.inputs[l];
            let mut dinput = vec![0.0; layer.n_in];
            for o in 0..layer.n_out {
                gb[o] += dz[o];
                let wrow = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                let grow = &mut gw[o * layer.n_in..(o + 1) * layer.n_in];
                for i in 0..layer.n_in {
                    grow[i] += dz[o] * input[i];
                    dinput[i] += dz[o] * wrow[i];
                }
            }
            d = dinput;
        }
        d[0]
    }

    fn params_mut(&mut self) -> Vec<&mut f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in &mut self.layers {
            out.extend(layer.w.iter_mut());
            out.extend(layer.b.iter_mut());
        }
        out
    }

}

/// Input normalization: batch statistics while training, running statistics
/// at evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub running_mean: f64,
    pub running_var: f64,
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for Standardizer {
    fn default() -> Self {
        Standardizer {
            running_mean: 0.0,
            running_var: 1.0,
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledModel {
    pub tree: ExprTree,
    pub shapes: Vec<(Standardizer, ShapeFunctionModel)>,
    pub div_epsilon: f64,
}

/// Sign-preserving denominator clamp; sign(0) counts as positive.
fn protect(d: f64, eps: f64) -> f64 {
    let s = if d < 0.0 { -1.0 } else { 1.0 };
    s * d.abs().max(eps)
}

struct ShapeCache {
    shape_id: usize,
    node_idx: usize,
    sigma: f64,
    /// standardized inputs
    u: Vec<f64>,
    rows: Vec<MlpRowCache>,
    mode: Mode,
    batch_n: usize,
}

/// Forward tape: per-node output vectors plus shape-node internals.
pub struct Tape {
    vals: Vec<Vec<f64>>,
    shape_caches: Vec<ShapeCache>,
    n_rows: usize,
}

impl Tape {
    pub fn predictions(&self) -> &[f64] {
        &self.vals[0]
    }
}

/// Compile a tree into a freshly initialized model; deterministic in `seed`.
pub fn compile(tree: &ExprTree, seed: u64) -> Result<CompiledModel, EvalError> {
    let mut has_constant = false;
    tree.root.for_each(&mut |n| {
        if matches!(n, ExprNode::Constant(_)) {
            has_constant = true;
        }
    });
    if has_constant {
        return Err(EvalError::ConstantInTree);
    }
    let n_shapes = tree.n_shapes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = (0..n_shapes)
        .map(|_| (Standardizer::default(), ShapeFunctionModel::init(&mut rng)))
        .collect();
    Ok(CompiledModel { tree: tree.clone(), shapes, div_epsilon: DIV_EPSILON })
}

impl CompiledModel {
    pub fn n_shapes(&self) -> usize {
        self.shapes.len()
    }

    pub fn n_params(&self) -> usize {
        self.shapes.iter().map(|(_, m)| m.n_params()).sum()
    }

    /// Forward pass over a batch, recording the tape needed for backward.
    /// Train mode uses batch statistics and updates running statistics.
    pub fn forward_tape(&mut self, x: &[Vec<f64>], mode: Mode) -> Result<Tape, EvalError> {
        let n_vars = self.tree.n_vars();
        for row in x {
            if row.len() != n_vars {
                return Err(EvalError::ColumnMismatch { got: row.len(), want: n_vars });
            }
        }
        let n_rows = x.len();
        let mut tape = Tape { vals: Vec::new(), shape_caches: Vec::new(), n_rows };
        let root = self.tree.root.clone();
        self.eval_node(&root, x, mode, &mut tape)?;
        if tape.vals[0].iter().any(|v| !v.is_finite()) {
            return Err(EvalError::NonFiniteOutput);
        }
        Ok(tape)
    }

    fn eval_node(
        &mut self,
        node: &ExprNode,
        x: &[Vec<f64>],
        mode: Mode,
        tape: &mut Tape,
    ) -> Result<usize, EvalError> {
        let idx = tape.vals.len();
        tape.vals.push(Vec::new());
        let vals = match node {
            ExprNode::Variable(v) => x.iter().map(|row| row[v.0]).collect(),
            ExprNode::Constant(c) => vec![*c; x.len()],
            ExprNode::Binary(op, l, r) => {
                let li = self.eval_node(l, x, mode, tape)?;
                let ri = self.eval_node(r, x, mode, tape)?;
                let (lv, rv) = (&tape.vals[li], &tape.vals[ri]);
                let eps = self.div_epsilon;
                lv.iter()
                    .zip(rv)
                    .map(|(&a, &b)| match op {
                        BinaryOp::Add => a + b,
                        BinaryOp::Sub => a - b,
                        BinaryOp::Mul => a * b,
                        BinaryOp::Div => a / protect(b, eps),
                    })
                    .collect()
            }
            ExprNode::Shape(id, c) => {
                let ci = self.eval_node(c, x, mode, tape)?;
                let z = tape.vals[ci].clone();
                let n = z.len().max(1);
                let (std, mlp) = &mut self.shapes[*id];
                let (mu, var) = match mode {
                    Mode::Train => {
                        let mu = z.iter().sum::<f64>() / n as f64;
                        let var = z.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                        std.running_mean = (1.0 - std.momentum) * std.running_mean + std.momentum * mu;
                        std.running_var = (1.0 - std.momentum) * std.running_var + std.momentum * var;
                        (mu, var)
                    }
                    Mode::Eval => (std.running_mean, std.running_var),
                };
                let sigma = (var + std.epsilon).sqrt();
                let u: Vec<f64> = z.iter().map(|&v| (v - mu) / sigma).collect();
                let mut rows = Vec::with_capacity(u.len());
                let out: Vec<f64> = u
                    .iter()
                    .map(|&ui| {
                        let mut cache = MlpRowCache { inputs: Vec::new(), preacts: Vec::new() };
                        let o = mlp.forward_row(ui, Some(&mut cache));
                        rows.push(cache);
                        o
                    })
                    .collect();
                tape.shape_caches.push(ShapeCache {
                    shape_id: *id,
                    node_idx: ci,
                    sigma,
                    u,
                    rows,
                    mode,
                    batch_n: n,
                });
                out
            }
        };
        tape.vals[idx] = vals;
        Ok(idx)
    }

    /// Predictions in evaluation mode (running statistics; no state change).
    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<f64>, EvalError> {
        let mut clone = self.clone();
        let tape = clone.forward_tape(x, Mode::Eval)?;
        Ok(tape.vals[0].clone())
    }

    /// Raw (pre-standardization) argument values of every shape over a
    /// batch, evaluation mode; outer index is the shape id.
    pub fn shape_arguments(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, EvalError> {
        let mut clone = self.clone();
        let tape = clone.forward_tape(x, Mode::Eval)?;
        let mut out = vec![Vec::new(); self.shapes.len()];
        for sc in &tape.shape_caches {
            out[sc.shape_id] = tape.vals[sc.node_idx].clone();
        }
        Ok(out)
    }

    /// Evaluate one shape function on raw inputs: standardize with running
    /// statistics, then apply the MLP.
    pub fn eval_shape(&self, shape_id: usize, xs: &[f64]) -> Result<Vec<f64>, EvalError> {
        let (std, mlp) = self
            .shapes
            .get(shape_id)
            .ok_or(EvalError::UnknownShape(shape_id))?;
        let sigma = (std.running_var + std.epsilon).sqrt();
        let out: Vec<f64> = xs
            .iter()
            .map(|&v| mlp.forward_row((v - std.running_mean) / sigma, None))
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::NonFiniteOutput);
        }
        Ok(out)
    }

    /// Exact gradients of the batch MSE with respect to every shape
    /// parameter, using the tape from a preceding training-mode forward.
    pub fn backward(&self, tape: &Tape, y: &[f64]) -> Result<Vec<Vec<f64>>, EvalError> {
        assert_eq!(y.len(), tape.n_rows);
        let mut grads: Vec<Vec<f64>> = self
            .shapes
            .iter()
            .map(|(_, m)| vec![0.0; m.n_params()])
            .collect();
        let n = tape.n_rows.max(1) as f64;
        let preds = &tape.vals[0];
        let dl: Vec<f64> = preds.iter().zip(y).map(|(&p, &t)| 2.0 * (p - t) / n).collect();

        // node gradients, indexed like tape.vals; accumulated root-down
        let mut node_grads: Vec<Option<Vec<f64>>> = vec![None; tape.vals.len()];
        node_grads[0] = Some(dl);

        // walk in the same preorder as the forward pass
        let mut idx = 0usize;
        let mut shape_cursor = 0usize;
        let root = self.tree.root.clone();
        self.backward_node(&root, tape, &mut idx, &mut shape_cursor, &mut node_grads, &mut grads);

        for g in &grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(EvalError::NonFiniteGradient);
            }
        }
        Ok(grads)
    }

    fn backward_node(
        &self,
        node: &ExprNode,
        tape: &Tape,
        idx: &mut usize,
        shape_cursor: &mut usize,
        node_grads: &mut Vec<Option<Vec<f64>>>,
        grads: &mut Vec<Vec<f64>>,
    ) {
        let here = *idx;
        *idx += 1;
        let g = match node_grads[here].take() {
            Some(g) => g,
            None => vec![0.0; tape.n_rows],
        };
        match node {
            ExprNode::Variable(_) | ExprNode::Constant(_) => {}
            ExprNode::Binary(op, l, r) => {
                let li = *idx;
                let (lg, rg): (Vec<f64>, Vec<f64>) = {
                    let lv = &tape.vals[li];
                    // right child index is li + size(l)
                    let ri = li + l.size();
                    let rv = &tape.vals[ri];
                    let eps = self.div_epsilon;
                    match op {
                        BinaryOp::Add => (g.clone(), g.clone()),
                        BinaryOp::Sub => (g.clone(), g.iter().map(|v| -v).collect()),
                        BinaryOp::Mul => (
                            g.iter().zip(rv).map(|(gv, &b)| gv * b).collect(),
                            g.iter().zip(lv).map(|(gv, &a)| gv * a).collect(),
                        ),
                        BinaryOp::Div => {
                            let lg = g
                                .iter()
                                .zip(rv)
                                .map(|(gv, &b)| gv / protect(b, eps))
                                .collect();
                            let rg = g
                                .iter()
                                .zip(lv.iter().zip(rv))
                                .map(|(gv, (&a, &b))| {
                                    let pd = protect(b, eps);
                                    // inside the guard the protected value is
                                    // constant in b
                                    let dpd = if b.abs() >= eps { 1.0 } else { 0.0 };
                                    gv * (-a / (pd * pd)) * dpd
                                })
                                .collect();
                            (lg, rg)
                        }
                    }
                };
                let ri = li + l.size();
                node_grads[li] = Some(lg);
                node_grads[ri] = Some(rg);
                self.backward_node(l, tape, idx, shape_cursor, node_grads, grads);
                self.backward_node(r, tape, idx, shape_cursor, node_grads, grads);
            }
            ExprNode::Shape(id, c) => {
                // shape caches were pushed child-first (postorder); find ours
                // by matching the child node index
                let ci = *idx;
                let cache = tape
                    .shape_caches
                    .iter()
                    .find(|sc| sc.node_idx == ci)
                    .expect("tape mismatch");
                let (_, mlp) = &self.shapes[*id];
                // through the MLP, per row
                let du: Vec<f64> = cache
                    .rows
                    .iter()
                    .zip(&g)
                    .map(|(rc, &gv)| mlp.backward_row(rc, gv, &mut grads[*id]))
                    .collect();
                // through the standardizer
                let dz: Vec<f64> = match cache.mode {
                    Mode::Eval => du.iter().map(|&d| d / cache.sigma).collect(),
                    Mode::Train => {
                        let n = cache.batch_n as f64;
                        let sum_du: f64 = du.iter().sum();
                        let sum_duu: f64 =
                            du.iter().zip(&cache.u).map(|(&d, &u)| d * u).sum();
                        du.iter()
                            .zip(&cache.u)
                            .map(|(&d, &u)| (n * d - sum_du - u * sum_duu) / (n * cache.sigma))
                            .collect()
                    }
                };
                node_grads[ci] = Some(dz);
                self.backward_node(c, tape, idx, shape_cursor, node_grads, grads);
            }
        }
    }

    fn snapshot(&self) -> Vec<(Standardizer, ShapeFunctionModel)> {
        self.shapes.clone()
    }

    fn restore(&mut self, snap: &[(Standardizer, ShapeFunctionModel)]) {
        self.shapes = snap.to_vec();
    }
}

/// Inner-loop optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub learning_rates: Vec<f64>,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 1000,
            learning_rates: vec![1e-3, 1e-2, 1e-1],
            weight_decay: 1e-4,
            batch_size: 1024,
            early_stop_patience: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Reduced budget: 200 epochs, used by the paper-appendix preset.
    pub fn appendix() -> Self {
        TrainConfig { max_epochs: 200, ..Default::default() }
    }
}

/// Datasets at or below this row count train full-batch.
pub const FULL_BATCH_LIMIT: usize = 4096;

pub fn r2_score(y: &[f64], y_hat: &[f64]) -> Result<f64, EvalError> {
    assert_eq!(y.len(), y_hat.len());
    assert!(y.len() >= 2);
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|&v| (v - mean) * (v - mean)).sum();
    if ss_tot == 0.0 {
        return Err(EvalError::DegenerateTarget);
    }
    let ss_res: f64 = y.iter().zip(y_hat).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub val_mse: f64,
    pub val_r2: f64,
    pub chosen_lr: f64,
    pub epochs_run: usize,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl Adam {
    fn new(model: &CompiledModel) -> Adam {
        let zeros: Vec<Vec<f64>> = model
            .shapes
            .iter()
            .map(|(_, m)| vec![0.0; m.n_params()])
            .collect();
        Adam { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, model: &mut CompiledModel, grads: &[Vec<f64>], lr: f64, wd: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for (si, (_, mlp)) in model.shapes.iter_mut().enumerate() {
            for (pi, p) in mlp.params_mut().into_iter().enumerate() {
                let g = grads[si][pi] + wd * *p;
                let m = &mut self.m[si][pi];
                let v = &mut self.v[si][pi];
                *m = B1 * *m + (1.0 - B1) * g;
                *v = B2 * *v + (1.0 - B2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + EPS);
            }
        }
    }
}

fn mse(y: &[f64], y_hat: &[f64]) -> f64 {
    y.iter()
        .zip(y_hat)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / y.len().max(1) as f64
}

fn run_epochs(
    model: &mut CompiledModel,
    x_train: &[Vec<f64>],
    y_train: &[f64],
    x_val: &[Vec<f64>],
    y_val: &[f64],
    lr: f64,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<(f64, Vec<(Standardizer, ShapeFunctionModel)>, usize), EvalError> {
    let mut adam = Adam::new(model);
    let mut best_mse = f64::INFINITY;
    let mut best_snap = model.snapshot();
    let mut since_best = 0usize;
    let mut epochs_run = 0usize;
    let full_batch = x_train.len() <= FULL_BATCH_LIMIT;
    let mut order: Vec<usize> = (0..x_train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);

    for _epoch in 0..epochs {
        if full_batch {
            let tape = model.forward_tape(x_train, Mode::Train)?;
            let loss = mse(y_train, tape.predictions());
            if !loss.is_finite() {
                return Err(EvalError::TrainingDiverged);
            }
            let grads = model.backward(&tape, y_train)?;
            adam.step(model, &grads, lr, cfg.weight_decay);
        } else {
            use rand::seq::SliceRandom;
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let bx: Vec<Vec<f64>> = chunk.iter().map(|&i| x_train[i].clone()).collect();
                let by: Vec<f64> = chunk.iter().map(|&i| y_train[i]).collect();
                let tape = model.forward_tape(&bx, Mode::Train)?;
                let loss = mse(&by, tape.predictions());
                if !loss.is_finite() {
                    return Err(EvalError::TrainingDiverged);
                }
                let grads = model.backward(&tape, &by)?;
                adam.step(model, &grads, lr, cfg.weight_decay);
            }
        }
        epochs_run += 1;
        let preds = model.predict(x_val)?;
        let vmse = mse(y_val, &preds);
        if !vmse.is_finite() {
            return Err(EvalError::TrainingDiverged);
        }
        if vmse < best_mse {
            best_mse = vmse;
            best_snap = model.snapshot();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.early_stop_patience {
                break;
            }
        }
    }
    Ok((best_mse, best_snap, epochs_run))
}

/// Separates the shuffle stream from parameter initialization.
const SHUFFLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Train a compiled model: pick the best learning rate on a short trial, then
/// train fully with early stopping and best-parameter restoration.
pub fn train(
    model: &CompiledModel,
    x_train: &[Vec<f64>],
    y_train: &[f64],
    x_val: &[Vec<f64>],
    y_val: &[f64],
    cfg: &TrainConfig,
) -> Result<(CompiledModel, TrainReport), EvalError> {
    assert!(!cfg.learning_rates.is_empty());
    if x_train.is_empty() || x_val.is_empty() {
        return Err(EvalError::DegenerateTarget);
    }
    // reject degenerate validation targets up front: R^2 is undefined
    let mean = y_val.iter().sum::<f64>() / y_val.len() as f64;
    if y_val.iter().all(|&v| v == mean) {
        return Err(EvalError::DegenerateTarget);
    }

    if model.n_params() == 0 {
        let preds = model.predict(x_val)?;
        let val_mse = mse(y_val, &preds);
        let val_r2 = r2_score(y_val, &preds)?;
        return Ok((
            model.clone(),
            TrainReport { val_mse, val_r2, chosen_lr: 0.0, epochs_run: 0 },
        ));
    }

    let trial_epochs = (cfg.max_epochs / 10).max(1);
    let mut best_lr = cfg.learning_rates[0];
    let mut best_trial = f64::INFINITY;
    if cfg.learning_rates.len() > 1 {
        for &lr in &cfg.learning_rates {
            let mut m = model.clone();
            match run_epochs(&mut m, x_train, y_train, x_val, y_val, lr, cfg, trial_epochs) {
                Ok((vmse, _, _)) => {
                    if vmse < best_trial {
                        best_trial = vmse;
                        best_lr = lr;
                    }
                }
                Err(EvalError::TrainingDiverged) | Err(EvalError::NonFiniteOutput)
                | Err(EvalError::NonFiniteGradient) => continue,
                Err(e) => return Err(e),
            }
        }
        if !best_trial.is_finite() {
            return Err(EvalError::TrainingDiverged);
        }
    }

    let mut fitted = model.clone();
    let (best_mse, best_snap, epochs_run) =
        run_epochs(&mut fitted, x_train, y_train, x_val, y_val, best_lr, cfg, cfg.max_epochs)?;
    fitted.restore(&best_snap);
    let preds = fitted.predict(x_val)?;
    let val_mse = mse(y_val, &preds);
    let val_r2 = r2_score(y_val, &preds)?;
    debug_assert!((val_mse - best_mse).abs() <= 1e-12 * best_mse.max(1.0));
    Ok((fitted, TrainReport { val_mse, val_r2, chosen_lr: best_lr, epochs_run }))
}

/// Train with several seeds and keep the best validation MSE.
pub fn train_restarts(
    tree: &ExprTree,
    x_train: &[Vec<f64>],
    y_train: &[f64],
    x_val: &[Vec<f64>],
    y_val: &[f64],
    cfg: &TrainConfig,
    restarts: usize,
) -> Result<(CompiledModel, TrainReport), EvalError> {
    let mut best: Option<(CompiledModel, TrainReport)> = None;
    let mut last_err = None;
    for r in 0..restarts.max(1) {
        let seed = cfg.seed.wrapping_add(r as u64);
        let model = compile(tree, seed)?;
        let mut cfg_r = cfg.clone();
        cfg_r.seed = seed;
        match train(&model, x_train, y_train, x_val, y_val, &cfg_r) {
            Ok((m, rep)) => {
                if best.as_ref().map_or(true, |(_, b)| rep.val_mse < b.val_mse) {
                    best = Some((m, rep));
                }
            }
            Err(e @ EvalError::DegenerateTarget) => return Err(e),
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or(EvalError::TrainingDiverged))
}

// ---------------------------------------------------------------------------
// serialization: JSON with bit-exact floats (hex of the little-endian u64)

fn f64_to_hex(v: f64) -> String {
    format!("{:016x}", u64::from_le_bytes(v.to_le_bytes()).to_le())
}

fn f64_from_hex(s: &str) -> Result<f64, EvalError> {
    let bits = u64::from_str_radix(s, 16)
        .map_err(|_| EvalError::Format(format!("bad float hex '{s}'")))?;
    Ok(f64::from_le_bytes(bits.to_le_bytes()))
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    n_in: usize,
    n_out: usize,
    w: Vec<String>,
    b: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ShapeFile {
    running_mean: String,
    running_var: String,
    momentum: String,
    epsilon: String,
    layers: Vec<LayerFile>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    tree: String,
    columns: Vec<String>,
    div_epsilon: String,
    shapes: Vec<ShapeFile>,
}

pub fn save_model(model: &CompiledModel, path: &Path) -> Result<(), EvalError> {
    let file = ModelFile {
        tree: crate::expr::render(&model.tree),
        columns: model.tree.var_names.clone(),
        div_epsilon: f64_to_hex(model.div_epsilon),
        shapes: model
            .shapes
            .iter()
            .map(|(std, mlp)| ShapeFile {
                running_mean: f64_to_hex(std.running_mean),
                running_var: f64_to_hex(std.running_var),
                momentum: f64_to_hex(std.momentum),
                epsilon: f64_to_hex(std.epsilon),
                layers: mlp
                    .layers
                    .iter()
                    .map(|l| LayerFile {
                        n_in: l.n_in,
                        n_out: l.n_out,
                        w: l.w.iter().map(|&v| f64_to_hex(v)).collect(),
                        b: l.b.iter().map(|&v| f64_to_hex(v)).collect(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| EvalError::Format(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<CompiledModel, EvalError> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile =
        serde_json::from_str(&text).map_err(|e| EvalError::Format(e.to_string()))?;
    let eq = crate::closedform::parse(&file.tree)
        .map_err(|e| EvalError::Format(format!("tree text: {e}")))?;
    let tree = crate::closedform::to_expr_tree(&eq.node, &file.columns)
        .map_err(|e| EvalError::Format(format!("tree text: {e}")))?;
    let mut shapes = Vec::new();
    for s in &file.shapes {
        let std = Standardizer {
            running_mean: f64_from_hex(&s.running_mean)?,
            running_var: f64_from_hex(&s.running_var)?,
            momentum: f64_from_hex(&s.momentum)?,
            epsilon: f64_from_hex(&s.epsilon)?,
        };
        let mut layers = Vec::new();
        for l in &s.layers {
            let w = l.w.iter().map(|h| f64_from_hex(h)).collect::<Result<_, _>>()?;
            let b = l.b.iter().map(|h| f64_from_hex(h)).collect::<Result<_, _>>()?;
            layers.push(Layer { n_in: l.n_in, n_out: l.n_out, w, b });
        }
        shapes.push((std, ShapeFunctionModel { layers }));
    }
    if shapes.len() != tree.n_shapes() {
        return Err(EvalError::Format("shape count mismatch".into()));
    }
    Ok(CompiledModel { tree, shapes, div_epsilon: f64_from_hex(&file.div_epsilon)? })
}

/// Compile preconditions: the tree must be transparent unless the caller
/// explicitly allows a fixed structure (still constant-free).
pub fn compile_checked(tree: &ExprTree, seed: u64) -> Result<CompiledModel, EvalError> {
    let verdict = validate_transparent(tree);
    if verdict
        .violations
        .iter()
        .any(|v| matches!(v, Violation::ConstantNode(_)))
    {
        return Err(EvalError::ConstantInTree);
    }
    compile(tree, seed)
}
