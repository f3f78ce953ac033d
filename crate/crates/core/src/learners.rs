//! The five incremental learners behind one stage protocol: receive the new
//! task's training data plus the exemplar set, train, refresh exemplars, and
//! evaluate over every class seen so far.
//!
//! Labels handed to a learner are incremental: classes of the first task are
//! `0..n₁`, the next task's `n₁..n₁+n₂`, and so on.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffcore::{kernels, LrSchedule, OptimState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::exemplars::{class_quota, herding_select, Exemplar, ExemplarSet};
use crate::harness::data::LabeledSet;
use crate::harness::prng::SplitMix64;
use crate::netblocks::{BackboneSpec, Block, ClassifierInit, ExpandableModel, FreezePolicy, Strategy};
use crate::probes::{self, BlockOwner, ProbeTrace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Replay,
    Icarl,
    Wa,
    Der,
    Memo,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Replay, Method::Icarl, Method::Wa, Method::Der, Method::Memo];

    pub fn strategy(self) -> Strategy {
        match self {
            Method::Replay | Method::Icarl | Method::Wa => Strategy::Single,
            Method::Der => Strategy::FullExpand,
            Method::Memo => Strategy::DecoupledExpand,
        }
    }

    pub fn uses_distillation(self) -> bool {
        matches!(self, Method::Icarl | Method::Wa)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Replay => "replay",
            Method::Icarl => "icarl",
            Method::Wa => "wa",
            Method::Der => "der",
            Method::Memo => "memo",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Weight of the distillation term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPolicy {
    Fixed(f64),
    /// `|old classes| / |all seen classes|`.
    #[default]
    ClassRatio,
}

pub fn lambda_value(policy: LambdaPolicy, old_classes: usize, seen_classes: usize) -> f64 {
    match policy {
        LambdaPolicy::Fixed(l) => l,
        LambdaPolicy::ClassRatio => old_classes as f64 / seen_classes as f64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    pub lambda_policy: LambdaPolicy,
    /// Trunk freezing for decoupled expansion.
    pub freeze_policy: FreezePolicy,
    pub aux_weight: f64,
    /// Align classifier norms after each stage of decoupled expansion.
    pub memo_weight_norm: bool,
    /// Align classifier norms after every epoch instead of once per stage.
    pub wa_every_epoch: bool,
    /// Re-run herding over stored exemplars with current features each stage
    /// instead of only truncating.
    pub reherd_each_stage: bool,
    pub classifier_init: ClassifierInit,
    /// Seeds initialization and mini-batch order. Not part of the serialized
    /// form; the harness derives it from the experiment seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig::desk(Method::Replay)
    }
}

impl LearnerConfig {
    /// Short schedule for small synthetic benchmarks.
    pub fn desk(method: Method) -> Self {
        LearnerConfig {
            method,
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.1,
            momentum: 0.9,
            lr_schedule: LrSchedule(vec![(15, 0.1), (25, 0.1)]),
            lambda_policy: LambdaPolicy::ClassRatio,
            freeze_policy: FreezePolicy::default(),
            aux_weight: 1.0,
            memo_weight_norm: true,
            wa_every_epoch: false,
            reherd_each_stage: true,
            classifier_init: ClassifierInit::Random,
            seed: 0,
        }
    }

    /// The full-scale CIFAR schedule: 170 epochs, batch 128, ×0.1 at 80 and 150.
    pub fn full_scale(method: Method) -> Self {
        LearnerConfig {
            epochs: 170,
            batch_size: 128,
            lr_schedule: LrSchedule(vec![(80, 0.1), (150, 0.1)]),
            ..LearnerConfig::desk(method)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if let LambdaPolicy::Fixed(l) = self.lambda_policy {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("fixed lambda {l} outside [0, 1]")));
            }
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::Config(format!("aux weight {} must be ≥ 0", self.aux_weight)));
        }
        OptimState::new(self.learning_rate, self.momentum, self.lr_schedule.clone(), [])?;
        Ok(())
    }
}

/// `(1−λ)·CE + λ·KD`. With λ = 0 the distillation term is not built at all.
pub fn loss_icarl(
    tape: &mut Tape,
    logits: Var,
    old_logits: Option<&Tensor>,
    labels: &[usize],
    lambda: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!("lambda {lambda} outside [0, 1]")));
    }
    if lambda == 0.0 {
        return tape.softmax_cross_entropy(logits, labels);
    }
    let old = old_logits.ok_or_else(|| Error::contract("distillation needs a previous model"))?;
    let kd = tape.kd_term(logits, old)?;
    if lambda == 1.0 {
        return Ok(kd);
    }
    let ce = tape.softmax_cross_entropy(logits, labels)?;
    let ce = tape.scale(ce, 1.0 - lambda);
    let kd = tape.scale(kd, lambda);
    tape.add(ce, kd)
}

/// Auxiliary-head labels: position within `new_classes`, or `new_classes.len()`
/// for any older seen class.
pub fn aux_remap_labels(labels: &[usize], new_classes: &[usize], seen_classes: usize) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&y| {
            if y >= seen_classes {
                return Err(Error::Label {
                    label: y,
                    classes: seen_classes,
                });
            }
            Ok(new_classes.iter().position(|&c| c == y).unwrap_or(new_classes.len()))
        })
        .collect()
}

/// `CE(logits, labels) + aux_weight·CE(aux_logits, aux_labels)`; the
/// auxiliary term is skipped when there is no head or the weight is 0.
pub fn loss_expand(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    aux: Option<(Var, &[usize])>,
    aux_weight: f64,
) -> Result<Var> {
    let main = tape.softmax_cross_entropy(logits, labels)?;
    match aux {
        Some((aux_logits, aux_labels)) if aux_weight > 0.0 => {
            let a = tape.softmax_cross_entropy(aux_logits, aux_labels)?;
            let a = tape.scale(a, aux_weight);
            tape.add(main, a)
        }
        _ => Ok(main),
    }
}

fn column_norms(w: &Tensor, cols: Range<usize>) -> Vec<f64> {
    cols.map(|c| (0..w.rows()).map(|r| w.at(r, c).powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// Scales the `new` classifier columns by `γ = mean‖w_old‖ / mean‖w_new‖`
/// and returns γ.
pub fn weight_align(w: &mut Tensor, old: Range<usize>, new: Range<usize>) -> Result<f64> {
    if old.is_empty() || new.is_empty() || old.end > w.cols() || new.end > w.cols() {
        return Err(Error::contract(format!(
            "weight alignment needs non-empty column ranges within {} columns, got {old:?} and {new:?}",
            w.cols()
        )));
    }
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let old_mean = mean(column_norms(w, old));
    let new_mean = mean(column_norms(w, new.clone()));
    if new_mean == 0.0 {
        return Err(Error::contract("new-class columns have zero norm"));
    }
    let gamma = old_mean / new_mean;
    let cols = w.cols();
    let data = w.data_mut();
    for r in 0..data.len() / cols {
        for c in new.clone() {
            data[r * cols + c] *= gamma;
        }
    }
    Ok(gamma)
}

/// Read access to a training pool restricted to an allow-list of instance
/// ids. Every successful fetch is recorded.
pub struct DataHandle<'a> {
    pool: &'a LabeledSet,
    allowed: BTreeSet<usize>,
    accessed: RefCell<BTreeSet<usize>>,
}

impl<'a> DataHandle<'a> {
    pub fn new(pool: &'a LabeledSet, allowed: impl IntoIterator<Item = usize>) -> Self {
        DataHandle {
            pool,
            allowed: allowed.into_iter().collect(),
            accessed: RefCell::new(BTreeSet::new()),
        }
    }

    pub fn fetch(&self, ids: &[usize]) -> Result<LabeledSet> {
        if let Some(bad) = ids.iter().find(|i| !self.allowed.contains(i)) {
            return Err(Error::Protocol(format!(
                "instance {bad} is outside the current task's data"
            )));
        }
        let set = self.pool.subset(ids)?;
        self.accessed.borrow_mut().extend(ids);
        Ok(set)
    }

    pub fn accessed(&self) -> BTreeSet<usize> {
        self.accessed.borrow().clone()
    }

    pub fn allowed(&self) -> &BTreeSet<usize> {
        &self.allowed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: usize,
    pub seen_classes: usize,
    /// Top-1 accuracy in percent over every seen class.
    pub accuracy: f64,
    /// Accuracy on each task's classes, in task order.
    pub per_task_accuracy: Vec<f64>,
    /// Mean training loss over the last epoch.
    pub final_loss: f64,
    pub exemplar_count: usize,
    pub model_param_count: usize,
    pub wall_time_ms: u64,
}

/// One learner's state across the task stream.
#[derive(Clone, Debug)]
pub struct Learner {
    config: LearnerConfig,
    spec: BackboneSpec,
    exemplar_budget: usize,
    model: Option<ExpandableModel>,
    exemplars: ExemplarSet,
    tasks: Vec<Range<usize>>,
    rng: SplitMix64,
    record_probes: bool,
    trace: ProbeTrace,
}

fn percent(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total as f64
}

fn path_blocks(model: &ExpandableModel) -> Vec<&Block> {
    let mut blocks: Vec<&Block> = model.trunk().map(|t| t.blocks.iter().collect()).unwrap_or_default();
    if let Some(b) = model.branches().last() {
        blocks.extend(&b.blocks);
    }
    blocks
}

fn path_snapshot(model: &ExpandableModel) -> Vec<Vec<f64>> {
    path_blocks(model)
        .into_iter()
        .map(|b| b.weight.data().iter().chain(b.bias.data()).copied().collect())
        .collect()
}

impl Learner {
    pub fn new(config: LearnerConfig, spec: BackboneSpec, exemplar_budget: usize) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        let rng = SplitMix64::new(config.seed);
        Ok(Learner {
            config,
            spec,
            exemplar_budget,
            model: None,
            exemplars: ExemplarSet::new(exemplar_budget),
            tasks: Vec::new(),
            rng,
            record_probes: false,
            trace: ProbeTrace::default(),
        })
    }

    /// Records per-stage gradient norms and parameter shift along the
    /// trained path.
    pub fn with_probes(mut self, enabled: bool) -> Self {
        self.record_probes = enabled;
        self
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn model(&self) -> Option<&ExpandableModel> {
        self.model.as_ref()
    }

    pub fn exemplars(&self) -> &ExemplarSet {
        &self.exemplars
    }

    pub fn seen_classes(&self) -> usize {
        self.tasks.last().map_or(0, |t| t.end)
    }

    pub fn trace(&self) -> &ProbeTrace {
        &self.trace
    }

    /// Trains one stage on `new_ids` (fetched through `data`) plus the stored
    /// exemplars, refreshes the exemplar set and evaluates on `test`, which
    /// may only contain seen classes.
    pub fn train_stage(&mut self, data: &DataHandle<'_>, new_ids: &[usize], test: &LabeledSet) -> Result<StageResult> {
        let start = Instant::now();
        let stage = self.tasks.len();
        if new_ids.is_empty() {
            return Err(Error::contract("a stage needs training data"));
        }
        let fresh = data.fetch(new_ids)?;
        let old_seen = self.seen_classes();
        let classes: BTreeSet<usize> = fresh.labels.iter().copied().collect();
        if let Some(&c) = classes.iter().find(|&&c| c < old_seen) {
            return Err(Error::Protocol(format!(
                "class {c} was already learned in an earlier task"
            )));
        }
        let first = *classes.first().expect("non-empty");
        let last = *classes.last().expect("non-empty");
        if first != old_seen || last + 1 - first != classes.len() {
            return Err(Error::contract(format!(
                "task classes {first}..={last} must continue the incremental labels from {old_seen}"
            )));
        }
        let n_new = classes.len();
        let seen = old_seen + n_new;
        if let Some(&y) = test.labels.iter().find(|&&y| y >= seen) {
            return Err(Error::Protocol(format!("test instance of unseen class {y}")));
        }
        if test.is_empty() {
            return Err(Error::contract("evaluation needs test data"));
        }
        let method = self.config.method;

        let (mut model, old_model) = match self.model.take() {
            None => {
                let m = ExpandableModel::new(
                    method.strategy(),
                    self.spec.clone(),
                    n_new,
                    self.rng.sub_seed(),
                    self.config.classifier_init,
                )?;
                (m, None)
            }
            Some(mut m) => {
                let old = method.uses_distillation().then(|| m.clone());
                match method.strategy() {
                    Strategy::Single => m.add_classes(n_new, self.rng.sub_seed())?,
                    _ => m.expand_for_task(n_new, self.rng.sub_seed())?,
                }
                if method.strategy() == Strategy::DecoupledExpand {
                    let base = self.tasks[0].len();
                    m.set_generalized_freeze(self.config.freeze_policy, base)?;
                }
                (m, old)
            }
        };

        // Training pool: the new task's instances followed by the exemplars.
        let mut rows: Vec<f64> = fresh.features.data().to_vec();
        let mut labels = fresh.labels.clone();
        for e in self.exemplars.iter() {
            rows.extend(&e.features);
            labels.push(e.label);
        }
        let train_x = Tensor::new(vec![labels.len(), fresh.dim()], rows)?;
        let new_classes: Vec<usize> = (old_seen..seen).collect();
        let aux_labels = aux_remap_labels(&labels, &new_classes, seen)?;
        let lambda = match &old_model {
            Some(_) => lambda_value(self.config.lambda_policy, old_seen, seen),
            None => 0.0,
        };

        let mut optim = {
            let sizes: Vec<usize> = model.params_mut().iter().map(|p| p.tensor.numel()).collect();
            OptimState::new(
                self.config.learning_rate,
                self.config.momentum,
                self.config.lr_schedule.clone(),
                sizes,
            )?
        };
        let depth = self.spec.num_blocks;
        let newest = model.task_count() - 1;
        let mut norm_sum = vec![0.0; depth];
        let mut steps = 0usize;
        let mut first_snapshot = None;
        let mut final_loss = 0.0;
        let mut order: Vec<usize> = (0..labels.len()).collect();

        for epoch in 0..self.config.epochs {
            self.rng.shuffle(&mut order);
            let mut loss_sum = 0.0;
            for batch in order.chunks(self.config.batch_size) {
                let xb = train_x.select_rows(batch)?;
                let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape);
                let xv = tape.constant(&xb);
                let pass = model.forward(&mut tape, &bound, xv)?;
                let loss = match method {
                    Method::Replay => tape.softmax_cross_entropy(pass.logits, &yb)?,
                    Method::Icarl | Method::Wa => {
                        let old_logits = match (&old_model, lambda > 0.0) {
                            (Some(old), true) => Some(old.logits(&xb)?),
                            _ => None,
                        };
                        loss_icarl(&mut tape, pass.logits, old_logits.as_ref(), &yb, lambda)?
                    }
                    Method::Der | Method::Memo => {
                        let ab: Vec<usize> = batch.iter().map(|&i| aux_labels[i]).collect();
                        let aux = pass.aux_logits.map(|a| (a, ab.as_slice()));
                        loss_expand(&mut tape, pass.logits, &yb, aux, self.config.aux_weight)?
                    }
                };
                loss_sum += tape.scalar(loss) * batch.len() as f64;
                tape.backward(loss)?;
                if self.record_probes {
                    let norms = probes::block_grad_norms(&model, &tape, &bound);
                    for n in norms {
                        if n.owner == BlockOwner::Trunk || n.owner == BlockOwner::Branch(newest) {
                            norm_sum[n.depth] += n.norm;
                        }
                    }
                    steps += 1;
                }
                model.load_grads(&tape, &bound)?;
                optim.step(&mut model.params_mut(), epoch)?;
            }
            final_loss = loss_sum / labels.len() as f64;
            if method == Method::Wa && self.config.wa_every_epoch && old_seen > 0 {
                weight_align(model.classifier_mut(), 0..old_seen, old_seen..seen)?;
            }
            if self.record_probes && epoch == 0 {
                first_snapshot = Some(path_snapshot(&model));
            }
        }

        model.drop_aux_classifier();
        let align_once = (method == Method::Wa && !self.config.wa_every_epoch)
            || (method == Method::Memo && self.config.memo_weight_norm);
        if align_once && old_seen > 0 {
            weight_align(model.classifier_mut(), 0..old_seen, old_seen..seen)?;
        }
        if self.record_probes {
            self.trace
                .grad_norms
                .push(norm_sum.iter().map(|s| s / steps.max(1) as f64).collect());
            let first = first_snapshot.expect("at least one epoch ran");
            self.trace
                .shift_mse
                .push(probes::block_shift_mse(&first, &path_snapshot(&model))?);
        }

        self.exemplars = self.refresh_exemplars(&model, &fresh, new_ids, seen)?;
        self.tasks.push(old_seen..seen);

        let predictions = model.logits(&test.features)?;
        let predicted: Vec<usize> = (0..test.len()).map(|i| kernels::argmax(predictions.row(i))).collect();
        let correct = |keep: &dyn Fn(usize) -> bool| {
            let ids: Vec<usize> = (0..test.len()).filter(|&i| keep(test.labels[i])).collect();
            let hits = ids.iter().filter(|&&i| predicted[i] == test.labels[i]).count();
            (hits, ids.len())
        };
        let (hits, total) = correct(&|_| true);
        let per_task_accuracy = self
            .tasks
            .iter()
            .map(|t| {
                let (h, n) = correct(&|y| t.contains(&y));
                if n == 0 {
                    0.0
                } else {
                    percent(h, n)
                }
            })
            .collect();
        let result = StageResult {
            stage,
            seen_classes: seen,
            accuracy: percent(hits, total),
            per_task_accuracy,
            final_loss,
            exemplar_count: self.exemplars.len(),
            model_param_count: model.param_count(),
            wall_time_ms: start.elapsed().as_millis() as u64,
        };
        self.model = Some(model);
        Ok(result)
    }

    /// Quota `⌊K / seen⌋` per class: old classes keep (re-herded or
    /// truncated) stored instances, new classes are herded from the task data
    /// with the trained model's features.
    fn refresh_exemplars(
        &self,
        model: &ExpandableModel,
        fresh: &LabeledSet,
        new_ids: &[usize],
        seen: usize,
    ) -> Result<ExemplarSet> {
        let mut next = ExemplarSet::new(self.exemplar_budget);
        if self.exemplar_budget == 0 {
            return Ok(next);
        }
        let m = class_quota(self.exemplar_budget, seen)?;
        let herd =
            |rows: &Tensor, take: usize| -> Result<Vec<usize>> { herding_select(&model.forward_features(rows)?, take) };
        for label in self.exemplars.class_labels() {
            let stored = self.exemplars.class(label).expect("listed class");
            let take = m.min(stored.len());
            let kept = if self.config.reherd_each_stage {
                let rows: Vec<&[f64]> = stored.iter().map(|e| e.features.as_slice()).collect();
                herd(&Tensor::from_rows(&rows)?, take)?
                    .into_iter()
                    .map(|i| stored[i].clone())
                    .collect()
            } else {
                stored[..take].to_vec()
            };
            next.set_class(label, kept)?;
        }
        let classes: BTreeSet<usize> = fresh.labels.iter().copied().collect();
        for label in classes {
            let ids = fresh.ids_where(|y| y == label);
            let rows = fresh.features.select_rows(&ids)?;
            let picked = herd(&rows, m.min(ids.len()))?;
            let chosen = picked
                .into_iter()
                .map(|i| Exemplar {
                    id: new_ids[ids[i]],
                    label,
                    features: rows.row(i).to_vec(),
                })
                .collect();
            next.set_class(label, chosen)?;
        }
        Ok(next)
    }

    /// CKA between task backbones at the shallow and deep block, recorded in
    /// the probe trace. Needs at least two backbones.
    pub fn record_cka(&mut self, batch: &Tensor) -> Result<()> {
        let model = self.model.as_ref().ok_or_else(|| Error::contract("no trained model"))?;
        self.trace.cka_shallow = Some(probes::cka_matrix(model, probes::BlockDepth::Shallow, batch)?);
        self.trace.cka_deep = Some(probes::cka_matrix(model, probes::BlockDepth::Deep, batch)?);
        Ok(())
    }
}
