//! End-to-end runs: data, stream, budget alignment, stage loop, record.
//!
//! Seed derivation from the experiment seed `s`: the class order is
//! `shuffle_class_order(C, s)`; a SplitMix64 seeded with `s` then yields, in
//! order, the synthetic-data seed and the learner seed.

use rayon::prelude::*;

use super::config::{BudgetTarget, DatasetSource, ExperimentConfig};
use super::data::{load_dataset, synth_dataset, Dataset};
use super::prng::SplitMix64;
use super::record::RunRecord;
use super::stream::{make_stream, SplitSpec};
use crate::error::{Error, Result};
use crate::learners::{DataHandle, Learner, Method};
use crate::membudget::{align_budget, mb_to_bytes, BudgetLedger};
use crate::metrics::average_accuracy;
use crate::netblocks::{projected_param_count, BackboneSpec};

struct Seeds {
    data: u64,
    learner: u64,
}

fn derive_seeds(seed: u64) -> Seeds {
    let mut master = SplitMix64::new(seed);
    Seeds {
        data: master.sub_seed(),
        learner: master.sub_seed(),
    }
}

pub fn load_data(config: &ExperimentConfig) -> Result<Dataset> {
    match &config.dataset {
        DatasetSource::Synthetic(s) => synth_dataset(
            s.classes,
            s.train_per_class,
            s.test_per_class,
            s.dim,
            s.spread,
            derive_seeds(config.seed).data,
        ),
        DatasetSource::Files { train, test } => Dataset::new(load_dataset(train)?, load_dataset(test)?),
    }
}

/// Budget resolved against a concrete dataset and backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResolvedBudget {
    pub target_bytes: u64,
    pub exemplars: usize,
    pub bytes_per_param: u64,
    pub bytes_per_exemplar: u64,
}

/// Final-stage model bytes of `method`, which bound every earlier stage.
pub fn final_model_bytes(method: Method, spec: &BackboneSpec, split: &SplitSpec, bytes_per_param: u64) -> u64 {
    projected_param_count(spec, method.strategy(), split.stage_count(), split.classes) as u64 * bytes_per_param
}

pub fn resolve_budget(config: &ExperimentConfig, spec: &BackboneSpec, split: &SplitSpec) -> Result<ResolvedBudget> {
    let bpp = config.budget.bytes_per_param;
    let bpe = config.budget.bytes_per_exemplar.unwrap_or(4 * spec.input_dim as u64);
    let model = final_model_bytes(config.method, spec, split, bpp);
    let (target, exemplars) = match config.budget.target {
        BudgetTarget::Exemplars(k) => (model + k as u64 * bpe, k as u64),
        BudgetTarget::TargetMb(mb) => {
            let t = mb_to_bytes(mb);
            (t, align_budget(t, model, bpe, 0)?)
        }
        BudgetTarget::AlignTo { method, exemplars } => {
            let t = final_model_bytes(method, spec, split, bpp) + exemplars as u64 * bpe;
            (t, align_budget(t, model, bpe, 0)?)
        }
    };
    Ok(ResolvedBudget {
        target_bytes: target,
        exemplars: exemplars as usize,
        bytes_per_param: bpp,
        bytes_per_exemplar: bpe,
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunRecord> {
    config.validate()?;
    let dataset = load_data(config)?;
    run_on(config, &dataset)
}

/// Runs `config` on an already loaded dataset.
pub fn run_on(config: &ExperimentConfig, dataset: &Dataset) -> Result<RunRecord> {
    let split = SplitSpec::new(config.split.base, config.split.increment, dataset.n_classes())?;
    let stream = make_stream(dataset, split, config.seed)?;
    let rank = stream.incremental_labels();
    let train = dataset.train.relabel(&rank)?;
    let test = dataset.test.relabel(&rank)?;

    let spec = config.backbone.spec(dataset.dim())?;
    let budget = resolve_budget(config, &spec, &split)?;
    let mut learner_cfg = config.learner.clone();
    learner_cfg.seed = derive_seeds(config.seed).learner;
    let mut learner = Learner::new(learner_cfg, spec, budget.exemplars)?.with_probes(config.probes.enabled);

    let mut stages = Vec::with_capacity(stream.stage_count());
    let mut ledgers = Vec::with_capacity(stream.stage_count());
    for b in 0..stream.stage_count() {
        let ids = &stream.train_ids[b];
        let handle = DataHandle::new(&train, ids.iter().copied());
        let seen_test = test.subset(&stream.seen_test_ids(b)).map_err(|e| e.at_stage(b))?;
        let result = learner
            .train_stage(&handle, ids, &seen_test)
            .map_err(|e| e.at_stage(b))?;
        let model = learner.model().expect("trained");
        let ledger = BudgetLedger::new(
            model.param_count() as u64,
            budget.bytes_per_param,
            learner.exemplars().len() as u64,
            budget.bytes_per_exemplar,
        )?;
        if ledger.total_bytes() > budget.target_bytes {
            return Err(Error::Budget(format!(
                "{} B used, target {} B",
                ledger.total_bytes(),
                budget.target_bytes
            ))
            .at_stage(b));
        }
        ledgers.push(ledger);
        stages.push(result);
    }

    if config.probes.enabled && learner.model().is_some_and(|m| m.task_count() >= 2) {
        let n = config.probes.cka_samples.min(test.len());
        let ids: Vec<usize> = (0..n).collect();
        learner.record_cka(&test.subset(&ids)?.features)?;
    }

    let accs: Vec<f64> = stages.iter().map(|s| s.accuracy).collect();
    Ok(RunRecord {
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        config_hash: config.hash()?,
        seed: config.seed,
        class_order: stream.class_order.clone(),
        target_bytes: budget.target_bytes,
        exemplar_budget: budget.exemplars,
        ledgers,
        average_accuracy: average_accuracy(&accs)?,
        last_accuracy: *accs.last().expect("at least one stage"),
        stages,
        probes: config.probes.enabled.then(|| learner.trace().clone()),
    })
}

/// One run per memory point (MB), executed in parallel; results follow the
/// order of `memory_points`.
pub fn sweep(config: &ExperimentConfig, memory_points: &[f64]) -> Result<Vec<RunRecord>> {
    let dataset = load_data(config)?;
    memory_points
        .par_iter()
        .map(|&mb| {
            let mut c = config.clone();
            c.budget.target = BudgetTarget::TargetMb(mb);
            c.validate()?;
            run_on(&c, &dataset)
        })
        .collect()
}
