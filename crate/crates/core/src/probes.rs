//! Network-behavior probes: per-block gradient norms, block parameter shift,
//! and linear CKA between feature matrices.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::netblocks::{BackboneState, BoundModel, ExpandableModel, ForwardPass};

/// Which parameter group a block belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum BlockOwner {
    Trunk,
    Branch(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockGradNorm {
    pub owner: BlockOwner,
    pub depth: usize,
    pub norm: f64,
}

/// L2 norm of every backbone block's parameter gradient after one backward
/// pass of `loss_fn`. Frozen blocks report 0.
pub fn grad_norm_per_block<F>(model: &ExpandableModel, x: &Tensor, loss_fn: F) -> Result<Vec<BlockGradNorm>>
where
    F: FnOnce(&mut Tape, &ForwardPass) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.constant(x);
    let pass = model.forward(&mut tape, &bound, xv)?;
    let loss = loss_fn(&mut tape, &pass)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::NonFinite("probe loss".into()));
    }
    tape.backward(loss)?;
    Ok(block_grad_norms(model, &tape, &bound))
}

/// Per-block gradient norms read from a tape on which `backward` has run.
pub fn block_grad_norms(model: &ExpandableModel, tape: &Tape, bound: &BoundModel) -> Vec<BlockGradNorm> {
    let mut vars = bound.params().iter();
    let mut out = Vec::new();
    let mut visit = |owner: BlockOwner, state: &BackboneState, vars: &mut std::slice::Iter<'_, Var>| {
        for (block, depth) in state.blocks.iter().zip(state.depths()) {
            let (w, b) = (vars.next().expect("weight var"), vars.next().expect("bias var"));
            let norm = if block.is_frozen() {
                0.0
            } else {
                [*w, *b]
                    .iter()
                    .filter_map(|v| tape.grad(*v))
                    .flatten()
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt()
            };
            out.push(BlockGradNorm { owner, depth, norm });
        }
    };
    if let Some(trunk) = model.trunk() {
        visit(BlockOwner::Trunk, trunk, &mut vars);
    }
    for (j, br) in model.branches().iter().enumerate() {
        visit(BlockOwner::Branch(j), br, &mut vars);
    }
    out
}

/// Norms along the newest branch's path (trunk blocks, then the newest
/// branch), indexed by depth.
pub fn newest_path_norms(norms: &[BlockGradNorm], newest_branch: usize) -> Vec<f64> {
    let mut path: Vec<&BlockGradNorm> = norms
        .iter()
        .filter(|n| n.owner == BlockOwner::Trunk || n.owner == BlockOwner::Branch(newest_branch))
        .collect();
    path.sort_by_key(|n| n.depth);
    path.into_iter().map(|n| n.norm).collect()
}

/// Per-block mean squared parameter change between two snapshots; each
/// snapshot is a list of per-block flat parameter vectors.
pub fn block_shift_mse(first: &[Vec<f64>], last: &[Vec<f64>]) -> Result<Vec<f64>> {
    if first.len() != last.len() {
        return Err(Error::shape(format!(
            "snapshots hold {} and {} blocks",
            first.len(),
            last.len()
        )));
    }
    first
        .iter()
        .zip(last)
        .enumerate()
        .map(|(i, (a, b))| {
            if a.len() != b.len() || a.is_empty() {
                return Err(Error::shape(format!(
                    "block {i} has {} and {} parameters",
                    a.len(),
                    b.len()
                )));
            }
            Ok(a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum::<f64>() / a.len() as f64)
        })
        .collect()
}

fn centered(x: &Tensor) -> Vec<f64> {
    let (n, p) = (x.rows(), x.cols());
    let mut means = vec![0.0; p];
    for i in 0..n {
        for (m, v) in means.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let mut out = Vec::with_capacity(n * p);
    for i in 0..n {
        out.extend(x.row(i).iter().zip(&means).map(|(v, m)| v - m));
    }
    out
}

/// `‖Aᵀ B‖²_F` for column-centered `A: n×p`, `B: n×q`.
fn cross_frobenius_sq(a: &[f64], p: usize, b: &[f64], q: usize, n: usize) -> f64 {
    let mut total = 0.0;
    for j in 0..p {
        for k in 0..q {
            let s: f64 = (0..n).map(|i| a[i * p + j] * b[i * q + k]).sum();
            total += s * s;
        }
    }
    total
}

/// Linear CKA: `‖Yᵀ_c X_c‖²_F / (‖Xᵀ_c X_c‖_F · ‖Yᵀ_c Y_c‖_F)`, 0 when
/// either feature matrix is constant.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let n = x.rows();
    if x.shape().len() != 2 || y.shape().len() != 2 || y.rows() != n {
        return Err(Error::shape(format!(
            "CKA inputs {:?} and {:?} must be matrices with equal rows",
            x.shape(),
            y.shape()
        )));
    }
    if n < 2 {
        return Err(Error::contract("CKA needs at least two samples"));
    }
    let (p, q) = (x.cols(), y.cols());
    let (xc, yc) = (centered(x), centered(y));
    let xx = cross_frobenius_sq(&xc, p, &xc, p, n).sqrt();
    let yy = cross_frobenius_sq(&yc, q, &yc, q, n).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Ok(0.0);
    }
    let xy = cross_frobenius_sq(&xc, p, &yc, q, n);
    Ok(xy / (xx * yy))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockDepth {
    /// The first block.
    Shallow,
    /// The last block.
    Deep,
    Index(usize),
}

impl BlockDepth {
    pub fn resolve(self, num_blocks: usize) -> Result<usize> {
        let d = match self {
            BlockDepth::Shallow => 0,
            BlockDepth::Deep => num_blocks.saturating_sub(1),
            BlockDepth::Index(i) => i,
        };
        if d >= num_blocks {
            return Err(Error::contract(format!(
                "block depth {d} outside a {num_blocks}-block backbone"
            )));
        }
        Ok(d)
    }
}

/// Pairwise linear CKA of the chosen block's output across the model's
/// branches (each branch read along its own path through the trunk).
pub fn cka_matrix(model: &ExpandableModel, depth: BlockDepth, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
    let t = model.task_count();
    if t < 2 {
        return Err(Error::contract("CKA matrix needs at least two backbones"));
    }
    let d = depth.resolve(model.spec().num_blocks)?;
    let feats = (0..t)
        .map(|j| model.block_features(batch, j, d))
        .collect::<Result<Vec<_>>>()?;
    let mut m = vec![vec![0.0; t]; t];
    for i in 0..t {
        for j in i..t {
            let v = linear_cka(&feats[i], &feats[j])?;
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    Ok(m)
}

/// Mean of the strictly off-diagonal entries.
pub fn mean_off_diagonal(m: &[Vec<f64>]) -> f64 {
    let t = m.len();
    let mut sum = 0.0;
    let mut count = 0;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                sum += v;
                count += 1;
            }
        }
    }
    if count == 0 || t == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Probe series recorded during a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeTrace {
    /// `grad_norms[stage][depth]`: gradient norm along the trained path,
    /// averaged over every optimizer step of the stage.
    pub grad_norms: Vec<Vec<f64>>,
    /// `shift_mse[stage][depth]`: parameter MSE between the end of the first
    /// and the end of the last epoch.
    pub shift_mse: Vec<Vec<f64>>,
    /// CKA across backbones at the end of the run, shallow block.
    pub cka_shallow: Option<Vec<Vec<f64>>>,
    /// CKA across backbones at the end of the run, deep block.
    pub cka_deep: Option<Vec<Vec<f64>>>,
}
