use serde::{Deserialize, Serialize};

use super::backbone::{build_range, init_bound, run_blocks, BackboneSpec, BackboneState, BoundBlock};
use crate::diffcore::{NamedParam, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::harness::prng::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// One backbone, retrained every stage.
    Single,
    /// A full new backbone per task; older backbones frozen.
    FullExpand,
    /// A shared generalized trunk with a new specialized suffix per task.
    DecoupledExpand,
}

/// How classifier entries that cannot be inherited are initialized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInit {
    #[default]
    Random,
    Zero,
}

/// When the shared trunk is frozen for stages after the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    Always,
    Never,
    Auto { threshold: usize },
}

impl Default for FreezePolicy {
    fn default() -> Self {
        FreezePolicy::Auto { threshold: 20 }
    }
}

impl FreezePolicy {
    pub fn freezes(&self, base_class_count: usize) -> bool {
        match *self {
            FreezePolicy::Always => true,
            FreezePolicy::Never => false,
            FreezePolicy::Auto { threshold } => base_class_count >= threshold,
        }
    }
}

/// Backbone(s) plus a linear classifier over the concatenated features.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpandableModel {
    strategy: Strategy,
    spec: BackboneSpec,
    trunk: Option<BackboneState>,
    branches: Vec<BackboneState>,
    classifier: Tensor,
    aux_classifier: Option<Tensor>,
    classifier_init: ClassifierInit,
}

/// Tape handles for every parameter of a model, in [`ExpandableModel::params_mut`] order.
pub struct BoundModel {
    trunk: Vec<BoundBlock>,
    branches: Vec<Vec<BoundBlock>>,
    classifier: Var,
    aux: Option<Var>,
    params: Vec<Var>,
}

impl BoundModel {
    pub fn params(&self) -> &[Var] {
        &self.params
    }
}

/// Nodes produced by one forward pass.
pub struct ForwardPass {
    /// Concatenated features `[N × t·d]`.
    pub features: Var,
    pub logits: Var,
    /// Auxiliary logits from the newest branch's features, if an auxiliary head exists.
    pub aux_logits: Option<Var>,
    pub trunk_outputs: Vec<Var>,
    /// Per-branch block outputs, in creation order.
    pub branch_outputs: Vec<Vec<Var>>,
}

impl ForwardPass {
    /// Outputs of every block along the newest branch's path (trunk first).
    pub fn newest_path(&self) -> Vec<Var> {
        let mut path = self.trunk_outputs.clone();
        if let Some(last) = self.branch_outputs.last() {
            path.extend(last);
        }
        path
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut SplitMix64) -> Vec<f64> {
    let bound = init_bound(rows);
    (0..rows * cols).map(|_| rng.uniform_symmetric(bound)).collect()
}

impl ExpandableModel {
    /// A model with one backbone (or trunk + one suffix) and `class_count` outputs.
    pub fn new(
        strategy: Strategy,
        spec: BackboneSpec,
        class_count: usize,
        seed: u64,
        classifier_init: ClassifierInit,
    ) -> Result<Self> {
        spec.validate()?;
        if class_count == 0 {
            return Err(Error::contract("a classifier needs at least one class"));
        }
        let mut rng = SplitMix64::new(seed);
        let (trunk, branch) = match strategy {
            Strategy::DecoupledExpand => {
                let k = spec.decomposition_index;
                (
                    Some(build_range(&spec, 0..k, rng.sub_seed())),
                    build_range(&spec, k..spec.num_blocks, rng.sub_seed()),
                )
            }
            _ => (None, build_range(&spec, 0..spec.num_blocks, rng.sub_seed())),
        };
        let d = spec.hidden_dim;
        let classifier =
            Tensor::new(vec![d, class_count], random_matrix(d, class_count, &mut rng))?.with_requires_grad(true);
        Ok(ExpandableModel {
            strategy,
            spec,
            trunk,
            branches: vec![branch],
            classifier,
            aux_classifier: None,
            classifier_init,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn trunk(&self) -> Option<&BackboneState> {
        self.trunk.as_ref()
    }

    pub fn branches(&self) -> &[BackboneState] {
        &self.branches
    }

    pub fn classifier(&self) -> &Tensor {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut Tensor {
        &mut self.classifier
    }

    pub fn aux_classifier(&self) -> Option<&Tensor> {
        self.aux_classifier.as_ref()
    }

    pub fn drop_aux_classifier(&mut self) {
        self.aux_classifier = None;
    }

    pub fn task_count(&self) -> usize {
        self.branches.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.branches.len() * self.spec.hidden_dim
    }

    pub fn class_count(&self) -> usize {
        self.classifier.cols()
    }

    /// Scalar parameters in trunk, branches and classifier. The auxiliary
    /// head is excluded since it is discarded after each stage.
    pub fn param_count(&self) -> usize {
        self.trunk.as_ref().map_or(0, BackboneState::param_count)
            + self.branches.iter().map(BackboneState::param_count).sum::<usize>()
            + self.classifier.numel()
    }

    fn grown_classifier(&self, rows: usize, cols: usize, rng: &mut SplitMix64) -> Result<Tensor> {
        let mut data = match self.classifier_init {
            ClassifierInit::Random => random_matrix(rows, cols, rng),
            ClassifierInit::Zero => vec![0.0; rows * cols],
        };
        let (old_rows, old_cols) = (self.classifier.rows(), self.classifier.cols());
        for r in 0..old_rows {
            data[r * cols..r * cols + old_cols].copy_from_slice(self.classifier.row(r));
        }
        Ok(Tensor::new(vec![rows, cols], data)?.with_requires_grad(true))
    }

    /// Adds output columns for new classes without touching the backbone.
    pub fn add_classes(&mut self, new_class_count: usize, seed: u64) -> Result<()> {
        if new_class_count == 0 {
            return Err(Error::contract("no new classes to add"));
        }
        let mut rng = SplitMix64::new(seed);
        let rows = self.feature_dim();
        let cols = self.class_count() + new_class_count;
        self.classifier = self.grown_classifier(rows, cols, &mut rng)?;
        Ok(())
    }

    /// Creates a branch for a new task, freezes all older branches, grows the
    /// classifier (inheriting the old sub-block) and attaches a fresh
    /// auxiliary head of shape `d × (new_class_count + 1)`.
    pub fn expand_for_task(&mut self, new_class_count: usize, seed: u64) -> Result<()> {
        if self.strategy == Strategy::Single {
            return Err(Error::contract("single-backbone models cannot expand"));
        }
        if new_class_count == 0 {
            return Err(Error::contract("no new classes to add"));
        }
        let mut rng = SplitMix64::new(seed);
        let range = match self.strategy {
            Strategy::DecoupledExpand => self.spec.decomposition_index..self.spec.num_blocks,
            _ => 0..self.spec.num_blocks,
        };
        let mut branch = build_range(&self.spec, range, rng.sub_seed());
        branch.creation_stage = self.branches.len();
        for b in &mut self.branches {
            b.set_frozen(true);
        }
        self.branches.push(branch);

        let rows = self.feature_dim();
        let cols = self.class_count() + new_class_count;
        self.classifier = self.grown_classifier(rows, cols, &mut rng)?;

        let d = self.spec.hidden_dim;
        let aux = random_matrix(d, new_class_count + 1, &mut rng);
        self.aux_classifier = Some(Tensor::new(vec![d, new_class_count + 1], aux)?.with_requires_grad(true));
        Ok(())
    }

    /// Freezes or thaws the shared trunk according to `policy`.
    pub fn set_generalized_freeze(&mut self, policy: FreezePolicy, base_class_count: usize) -> Result<()> {
        let trunk = self
            .trunk
            .as_mut()
            .ok_or_else(|| Error::contract("generalized freezing needs a decoupled model"))?;
        trunk.set_frozen(policy.freezes(base_class_count));
        Ok(())
    }

    /// Mutable parameters in binding order: trunk, branches, classifier, auxiliary head.
    pub fn params_mut(&mut self) -> Vec<NamedParam<'_>> {
        let mut out = Vec::new();
        if let Some(trunk) = &mut self.trunk {
            for (b, depth) in trunk.blocks.iter_mut().zip(trunk.first_depth..) {
                out.push(NamedParam {
                    name: format!("trunk.block{depth}.weight"),
                    tensor: &mut b.weight,
                });
                out.push(NamedParam {
                    name: format!("trunk.block{depth}.bias"),
                    tensor: &mut b.bias,
                });
            }
        }
        for (j, br) in self.branches.iter_mut().enumerate() {
            let first = br.first_depth;
            for (b, depth) in br.blocks.iter_mut().zip(first..) {
                out.push(NamedParam {
                    name: format!("branch{j}.block{depth}.weight"),
                    tensor: &mut b.weight,
                });
                out.push(NamedParam {
                    name: format!("branch{j}.block{depth}.bias"),
                    tensor: &mut b.bias,
                });
            }
        }
        out.push(NamedParam {
            name: "classifier.weight".into(),
            tensor: &mut self.classifier,
        });
        if let Some(aux) = &mut self.aux_classifier {
            out.push(NamedParam {
                name: "aux_classifier.weight".into(),
                tensor: aux,
            });
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let trunk = self.trunk.as_ref().map(|t| t.bind(tape)).unwrap_or_default();
        let branches: Vec<_> = self.branches.iter().map(|b| b.bind(tape)).collect();
        let classifier = tape.leaf(&self.classifier);
        let aux = self.aux_classifier.as_ref().map(|a| tape.leaf(a));
        let mut params = Vec::new();
        for b in trunk.iter().chain(branches.iter().flatten()) {
            params.push(b.weight);
            params.push(b.bias);
        }
        params.push(classifier);
        params.extend(aux);
        BoundModel {
            trunk,
            branches,
            classifier,
            aux,
            params,
        }
    }

    /// Forward pass: the trunk (if any) runs once and feeds every branch;
    /// branch outputs are concatenated in creation order.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundModel, x: Var) -> Result<ForwardPass> {
        match tape.shape(x) {
            [_, c] if *c == self.spec.input_dim => {}
            s => {
                return Err(Error::shape(format!(
                    "model input {s:?}, expected [N, {}]",
                    self.spec.input_dim
                )))
            }
        }
        let trunk_outputs = run_blocks(tape, &bound.trunk, x)?;
        let branch_input = trunk_outputs.last().copied().unwrap_or(x);
        let branch_outputs = bound
            .branches
            .iter()
            .map(|b| run_blocks(tape, b, branch_input))
            .collect::<Result<Vec<_>>>()?;
        let finals: Vec<Var> = branch_outputs
            .iter()
            .map(|o| *o.last().expect("branches are never empty"))
            .collect();
        let features = tape.concat_cols(&finals)?;
        let logits = tape.linear(features, bound.classifier)?;
        let aux_logits = match bound.aux {
            Some(a) => Some(tape.linear(*finals.last().expect("at least one branch"), a)?),
            None => None,
        };
        Ok(ForwardPass {
            features,
            logits,
            aux_logits,
            trunk_outputs,
            branch_outputs,
        })
    }

    /// Concatenated features, without gradient tracking.
    pub fn forward_features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape);
        let xv = tape.constant(x);
        let pass = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.tensor(pass.features))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape);
        let xv = tape.constant(x);
        let pass = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.tensor(pass.logits))
    }

    /// Output of block `depth` along `branch`'s path.
    pub fn block_features(&self, x: &Tensor, branch: usize, depth: usize) -> Result<Tensor> {
        if branch >= self.branches.len() || depth >= self.spec.num_blocks {
            return Err(Error::contract(format!("no block {depth} on branch {branch}")));
        }
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape);
        let xv = tape.constant(x);
        let pass = self.forward(&mut tape, &bound, xv)?;
        let mut path = pass.trunk_outputs.clone();
        path.extend(&pass.branch_outputs[branch]);
        Ok(tape.tensor(path[depth]))
    }

    /// Copies tape gradients into the parameters' gradient slots.
    pub fn load_grads(&mut self, tape: &Tape, bound: &BoundModel) -> Result<()> {
        for (p, &v) in self.params_mut().into_iter().zip(bound.params()) {
            let g = if p.tensor.requires_grad() {
                tape.grad(v).map(<[f64]>::to_vec)
            } else {
                None
            };
            p.tensor.set_grad(g)?;
        }
        Ok(())
    }
}

/// Parameter count of a model after `task_count` tasks over `class_count` classes.
pub fn projected_param_count(spec: &BackboneSpec, strategy: Strategy, task_count: usize, class_count: usize) -> usize {
    let d = spec.hidden_dim;
    match strategy {
        Strategy::Single => spec.full_param_count() + d * class_count,
        Strategy::FullExpand => task_count * (spec.full_param_count() + d * class_count),
        Strategy::DecoupledExpand => {
            spec.trunk_param_count() + task_count * (spec.suffix_param_count() + d * class_count)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> BackboneSpec {
        BackboneSpec::new(4, 8, 3).unwrap()
    }

    fn input(n: usize) -> Tensor {
        let mut rng = SplitMix64::new(5);
        let data = (0..n * 4).map(|_| rng.next_normal()).collect();
        Tensor::new(vec![n, 4], data).unwrap()
    }

    #[test]
    fn feature_dims_by_strategy() {
        let m = ExpandableModel::new(Strategy::Single, spec(), 3, 1, ClassifierInit::Random).unwrap();
        assert_eq!(m.forward_features(&input(2)).unwrap().shape(), &[2, 8]);

        let mut m = ExpandableModel::new(Strategy::DecoupledExpand, spec(), 3, 1, ClassifierInit::Random).unwrap();
        m.expand_for_task(2, 2).unwrap();
        assert_eq!(m.forward_features(&input(3)).unwrap().shape(), &[3, 16]);
        assert_eq!(m.logits(&input(3)).unwrap().shape(), &[3, 5]);
    }

    #[test]
    fn copied_branches_give_identical_halves() {
        let mut m = ExpandableModel::new(Strategy::DecoupledExpand, spec(), 3, 1, ClassifierInit::Random).unwrap();
        m.expand_for_task(2, 2).unwrap();
        let mut copy = m.branches[0].clone();
        copy.creation_stage = 1;
        m.branches[1] = copy;
        let f = m.forward_features(&input(5)).unwrap();
        for i in 0..5 {
            let r = f.row(i);
            assert_eq!(&r[..8], &r[8..]);
        }
    }

    #[test]
    fn expansion_inherits_classifier_and_freezes() {
        let mut m = ExpandableModel::new(Strategy::FullExpand, spec(), 5, 1, ClassifierInit::Random).unwrap();
        let old_w = m.classifier.clone();
        m.expand_for_task(5, 2).unwrap();
        assert_eq!(m.classifier.shape(), &[16, 10]);
        for r in 0..8 {
            for c in 0..5 {
                assert_eq!(m.classifier.at(r, c).to_bits(), old_w.at(r, c).to_bits());
            }
        }
        assert!(m.branches[0].is_frozen());
        assert!(!m.branches[1].is_frozen());
        assert_eq!(m.aux_classifier().unwrap().shape(), &[8, 6]);
    }

    #[test]
    fn zero_init_leaves_new_entries_empty() {
        let mut m = ExpandableModel::new(Strategy::FullExpand, spec(), 2, 1, ClassifierInit::Zero).unwrap();
        m.expand_for_task(2, 2).unwrap();
        for r in 0..16 {
            for c in 0..4 {
                if r >= 8 || c >= 2 {
                    assert_eq!(m.classifier.at(r, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn single_cannot_expand() {
        let mut m = ExpandableModel::new(Strategy::Single, spec(), 2, 1, ClassifierInit::Random).unwrap();
        assert!(matches!(m.expand_for_task(2, 1), Err(Error::Contract(_))));
        m.add_classes(3, 4).unwrap();
        assert_eq!(m.classifier.shape(), &[8, 5]);
    }

    #[test]
    fn generalized_freeze_policy() {
        let mut m = ExpandableModel::new(Strategy::DecoupledExpand, spec(), 2, 1, ClassifierInit::Random).unwrap();
        m.set_generalized_freeze(FreezePolicy::Auto { threshold: 20 }, 50)
            .unwrap();
        assert!(m.trunk().unwrap().is_frozen());
        m.set_generalized_freeze(FreezePolicy::Auto { threshold: 20 }, 10)
            .unwrap();
        assert!(!m.trunk().unwrap().is_frozen());
        m.set_generalized_freeze(FreezePolicy::Always, 0).unwrap();
        assert!(m.trunk().unwrap().is_frozen());
        m.set_generalized_freeze(FreezePolicy::Never, 100).unwrap();
        assert!(!m.trunk().unwrap().is_frozen());

        let mut s = ExpandableModel::new(Strategy::Single, spec(), 2, 1, ClassifierInit::Random).unwrap();
        assert!(s.set_generalized_freeze(FreezePolicy::Always, 0).is_err());
    }

    #[test]
    fn param_counts_are_additive() {
        let s = spec();
        let (pg, ps, p) = (s.trunk_param_count(), s.suffix_param_count(), s.full_param_count());
        assert_eq!(pg + ps, p);
        let mut der = ExpandableModel::new(Strategy::FullExpand, s.clone(), 2, 1, ClassifierInit::Random).unwrap();
        let mut memo =
            ExpandableModel::new(Strategy::DecoupledExpand, s.clone(), 2, 1, ClassifierInit::Random).unwrap();
        for t in 2..=4 {
            der.expand_for_task(2, t as u64).unwrap();
            memo.expand_for_task(2, t as u64).unwrap();
            let cls = t * 8 * 2 * t;
            assert_eq!(der.param_count(), t * p + cls);
            assert_eq!(memo.param_count(), pg + t * ps + cls);
            assert_eq!(der.param_count() - memo.param_count(), (t - 1) * pg);
            assert_eq!(
                der.param_count(),
                projected_param_count(&s, Strategy::FullExpand, t, 2 * t)
            );
            assert_eq!(
                memo.param_count(),
                projected_param_count(&s, Strategy::DecoupledExpand, t, 2 * t)
            );
        }
    }

    #[test]
    fn params_and_binding_align() {
        let mut m = ExpandableModel::new(Strategy::DecoupledExpand, spec(), 2, 1, ClassifierInit::Random).unwrap();
        m.expand_for_task(2, 3).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let shapes: Vec<Vec<usize>> = bound.params().iter().map(|&v| tape.shape(v).to_vec()).collect();
        let names: Vec<String> = m.params_mut().iter().map(|p| p.name.clone()).collect();
        let pshapes: Vec<Vec<usize>> = m.params_mut().iter().map(|p| p.tensor.shape().to_vec()).collect();
        assert_eq!(shapes, pshapes);
        assert_eq!(names.first().unwrap(), "trunk.block0.weight");
        assert_eq!(names.last().unwrap(), "aux_classifier.weight");
    }
}
