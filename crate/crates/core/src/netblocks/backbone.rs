use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::harness::prng::SplitMix64;

/// Shape of a block-structured backbone.
///
/// Block 0 embeds `input_dim → hidden_dim`; every later block is
/// `hidden_dim → hidden_dim`. Each block is an affine map followed by ReLU.
/// Blocks before `decomposition_index` form the generalized trunk, the rest
/// the specialized suffix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub decomposition_index: usize,
}

impl BackboneSpec {
    /// Spec with the decomposition at the last block.
    pub fn new(input_dim: usize, hidden_dim: usize, num_blocks: usize) -> Result<Self> {
        let spec = BackboneSpec {
            input_dim,
            hidden_dim,
            num_blocks,
            decomposition_index: num_blocks.saturating_sub(1),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_decomposition(mut self, index: usize) -> Result<Self> {
        self.decomposition_index = index;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        if self.num_blocks < 2 {
            return Err(Error::Config(format!(
                "a backbone needs at least 2 blocks, got {}",
                self.num_blocks
            )));
        }
        if !(1..self.num_blocks).contains(&self.decomposition_index) {
            return Err(Error::Config(format!(
                "decomposition index {} outside [1, {})",
                self.decomposition_index, self.num_blocks
            )));
        }
        Ok(())
    }

    pub fn block_fan_in(&self, depth: usize) -> usize {
        if depth == 0 {
            self.input_dim
        } else {
            self.hidden_dim
        }
    }

    pub fn block_param_count(&self, depth: usize) -> usize {
        (self.block_fan_in(depth) + 1) * self.hidden_dim
    }

    pub fn range_param_count(&self, range: Range<usize>) -> usize {
        range.map(|d| self.block_param_count(d)).sum()
    }

    pub fn full_param_count(&self) -> usize {
        self.range_param_count(0..self.num_blocks)
    }

    pub fn trunk_param_count(&self) -> usize {
        self.range_param_count(0..self.decomposition_index)
    }

    pub fn suffix_param_count(&self) -> usize {
        self.range_param_count(self.decomposition_index..self.num_blocks)
    }
}

/// Uniform `(−√(6/fan_in), +√(6/fan_in))` bound.
pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// One affine + ReLU block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub weight: Tensor,
    pub bias: Tensor,
    frozen: bool,
}

impl Block {
    fn init(fan_in: usize, width: usize, rng: &mut SplitMix64) -> Self {
        let bound = init_bound(fan_in);
        let w: Vec<f64> = (0..fan_in * width).map(|_| rng.uniform_symmetric(bound)).collect();
        Block {
            weight: Tensor::new(vec![fan_in, width], w)
                .expect("block shape is consistent")
                .with_requires_grad(true),
            bias: Tensor::zeros(vec![width])
                .expect("block width is positive")
                .with_requires_grad(true),
            frozen: false,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        self.weight.set_requires_grad(!frozen);
        self.bias.set_requires_grad(!frozen);
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// A contiguous run of blocks `first_depth..first_depth + blocks.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneState {
    pub blocks: Vec<Block>,
    pub first_depth: usize,
    pub creation_stage: usize,
}

impl BackboneState {
    pub fn depths(&self) -> Range<usize> {
        self.first_depth..self.first_depth + self.blocks.len()
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(Block::param_count).sum()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for b in &mut self.blocks {
            b.set_frozen(frozen);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.blocks.iter().all(Block::is_frozen)
    }

    /// Flat copy of every parameter value, block by block.
    pub fn flat_params(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| b.weight.data().iter().chain(b.bias.data()).copied())
            .collect()
    }

    pub(crate) fn bind(&self, tape: &mut Tape) -> Vec<BoundBlock> {
        self.blocks
            .iter()
            .map(|b| BoundBlock {
                weight: tape.leaf(&b.weight),
                bias: tape.leaf(&b.bias),
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BoundBlock {
    pub weight: Var,
    pub bias: Var,
}

/// Runs bound blocks in order, returning every block's output.
pub(crate) fn run_blocks(tape: &mut Tape, blocks: &[BoundBlock], input: Var) -> Result<Vec<Var>> {
    let mut outputs = Vec::with_capacity(blocks.len());
    let mut h = input;
    for b in blocks {
        let z = tape.affine(h, b.weight, b.bias)?;
        h = tape.relu(z);
        outputs.push(h);
    }
    Ok(outputs)
}

/// Blocks `range` of `spec`, initialized from `seed`.
pub fn build_range(spec: &BackboneSpec, range: Range<usize>, seed: u64) -> BackboneState {
    let mut rng = SplitMix64::new(seed);
    let first_depth = range.start;
    let blocks = range
        .map(|d| Block::init(spec.block_fan_in(d), spec.hidden_dim, &mut rng))
        .collect();
    BackboneState {
        blocks,
        first_depth,
        creation_stage: 0,
    }
}

/// A full backbone: weights uniform on `±√(6/fan_in)`, biases zero.
pub fn build(spec: &BackboneSpec, seed: u64) -> Result<BackboneState> {
    spec.validate()?;
    Ok(build_range(spec, 0..spec.num_blocks, seed))
}
