//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use cil_core::diffcore::{Tape, Tensor, Var};
use cil_core::harness::data::{synth_dataset, LabeledSet};
use cil_core::harness::prng::SplitMix64;
use cil_core::harness::stream::{make_stream, SplitSpec};
use cil_core::learners::{DataHandle, Learner, LearnerConfig, Method};
use cil_core::netblocks::BackboneSpec;

/// Shape and wiring of one randomized graph.
#[derive(Clone, Debug)]
pub struct GraphPlan {
    extra_layer: bool,
    side_branch: Option<usize>,
    skip: bool,
    kd: Option<(usize, f64)>,
    labels: Vec<usize>,
    old_logits: Option<Tensor>,
}

fn random_tensor(rng: &mut SplitMix64, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_symmetric(1.0)).collect();
    Tensor::new(shape, data).unwrap().with_requires_grad(true)
}

fn pick(rng: &mut SplitMix64, lo: usize, hi: usize) -> usize {
    lo + (rng.next_u64() % (hi - lo + 1) as u64) as usize
}

/// A random graph over affine, linear, relu, concat, add, scale,
/// cross-entropy and distillation nodes, plus its leaf tensors.
pub fn random_graph(seed: u64) -> (GraphPlan, Vec<Tensor>) {
    let mut rng = SplitMix64::new(seed);
    let n = pick(&mut rng, 2, 5);
    let din = pick(&mut rng, 2, 5);
    let hidden = pick(&mut rng, 2, 6);
    let classes = pick(&mut rng, 2, 5);
    let extra_layer = rng.next_f64() < 0.5;
    let side_branch = (rng.next_f64() < 0.5).then(|| pick(&mut rng, 1, 3));
    let skip = rng.next_f64() < 0.5;
    let kd = (rng.next_f64() < 0.6).then(|| (pick(&mut rng, 1, classes), rng.next_f64()));
    let labels = (0..n).map(|_| pick(&mut rng, 0, classes - 1)).collect();

    let mut leaves = vec![
        random_tensor(&mut rng, vec![n, din]),
        random_tensor(&mut rng, vec![din, hidden]),
        random_tensor(&mut rng, vec![hidden]),
    ];
    if extra_layer {
        leaves.push(random_tensor(&mut rng, vec![hidden, hidden]));
        leaves.push(random_tensor(&mut rng, vec![hidden]));
    }
    let width = hidden + side_branch.unwrap_or(0);
    if let Some(s) = side_branch {
        leaves.push(random_tensor(&mut rng, vec![din, s]));
    }
    leaves.push(random_tensor(&mut rng, vec![width, classes]));
    leaves.push(random_tensor(&mut rng, vec![classes]));
    if skip {
        leaves.push(random_tensor(&mut rng, vec![din, classes]));
    }
    let old_logits = kd.map(|(c_old, _)| {
        let t = random_tensor(&mut rng, vec![n, c_old]);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| 3.0 * v).collect()).unwrap()
    });
    let plan = GraphPlan {
        extra_layer,
        side_branch,
        skip,
        kd,
        labels,
        old_logits,
    };
    (plan, leaves)
}

/// Loss of the planned graph and the tape it was recorded on.
pub fn evaluate(plan: &GraphPlan, leaves: &[Tensor]) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let mut it = vars.iter().copied();
    let mut next = || it.next().expect("leaf count matches the plan");
    let x = next();
    let (w1, b1) = (next(), next());
    let mut h = tape.affine(x, w1, b1).unwrap();
    h = tape.relu(h);
    if plan.extra_layer {
        let (w, b) = (next(), next());
        h = tape.affine(h, w, b).unwrap();
        h = tape.relu(h);
    }
    if plan.side_branch.is_some() {
        let ws = next();
        let s = tape.linear(x, ws).unwrap();
        let s = tape.relu(s);
        h = tape.concat_cols(&[h, s]).unwrap();
    }
    let (w2, b2) = (next(), next());
    let mut logits = tape.affine(h, w2, b2).unwrap();
    if plan.skip {
        let wk = next();
        let k = tape.linear(x, wk).unwrap();
        let k = tape.scale(k, 0.5);
        logits = tape.add(logits, k).unwrap();
    }
    let ce = tape.softmax_cross_entropy(logits, &plan.labels).unwrap();
    let loss = match (&plan.old_logits, plan.kd) {
        (Some(old), Some((_, lambda))) => {
            let kd = tape.kd_term(logits, old).unwrap();
            let ce = tape.scale(ce, 1.0 - lambda);
            let kd = tape.scale(kd, lambda);
            tape.add(ce, kd).unwrap()
        }
        _ => ce,
    };
    (tape, vars, loss)
}

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over every leaf of
/// the graph, with central differences of step `h`.
pub fn gradient_relative_error(seed: u64, h: f64) -> f64 {
    let (plan, leaves) = random_graph(seed);
    let (mut tape, vars, loss) = evaluate(&plan, &leaves);
    tape.backward(loss).unwrap();
    let analytic: Vec<f64> = vars.iter().flat_map(|&v| tape.grad(v).unwrap().to_vec()).collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    for (li, leaf) in leaves.iter().enumerate() {
        for k in 0..leaf.numel() {
            let probe = |delta: f64| {
                let mut ls = leaves.to_vec();
                ls[li].data_mut()[k] += delta;
                let (tape, _, loss) = evaluate(&plan, &ls);
                tape.scalar(loss)
            };
            numeric.push((probe(h) - probe(-h)) / (2.0 * h));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// A small incremental stream with labels already in presentation rank.
pub struct SmallStream {
    pub train: LabeledSet,
    pub test: LabeledSet,
    pub stage_train: Vec<Vec<usize>>,
    pub stage_test: Vec<Vec<usize>>,
}

pub fn small_stream(classes: usize, increment: usize, dim: usize, seed: u64) -> SmallStream {
    let ds = synth_dataset(classes, 30, 10, dim, 0.35, seed).unwrap();
    let split = SplitSpec::new(0, increment, classes).unwrap();
    let stream = make_stream(&ds, split, seed).unwrap();
    let rank = stream.incremental_labels();
    SmallStream {
        train: ds.train.relabel(&rank).unwrap(),
        test: ds.test.relabel(&rank).unwrap(),
        stage_test: (0..stream.stage_count()).map(|b| stream.seen_test_ids(b)).collect(),
        stage_train: stream.train_ids,
    }
}

pub fn small_learner(method: Method, spec: &BackboneSpec, budget: usize) -> Learner {
    let mut cfg = LearnerConfig::desk(method);
    cfg.epochs = 3;
    cfg.lr_schedule = cil_core::diffcore::LrSchedule(vec![(2, 0.1)]);
    cfg.seed = 11;
    Learner::new(cfg, spec.clone(), budget).unwrap()
}

/// Trains one stage of `learner` on `stream`, returning the data handle's audit.
pub fn train_stage<'a>(learner: &mut Learner, stream: &'a SmallStream, b: usize) -> DataHandle<'a> {
    let ids = &stream.stage_train[b];
    let handle = DataHandle::new(&stream.train, ids.iter().copied());
    let test = stream.test.subset(&stream.stage_test[b]).unwrap();
    learner.train_stage(&handle, ids, &test).unwrap();
    handle
}

/// Failed checks of the decoupled-expansion invariants over a 5-stage run
/// against a full-expansion run on the same stream; empty when all hold.
pub fn expansion_invariant_failures() -> Vec<String> {
    let stream = small_stream(10, 2, 6, 5);
    let spec = BackboneSpec::new(6, 8, 3).unwrap();
    let mut memo = small_learner(Method::Memo, &spec, 20);
    let mut der = small_learner(Method::Der, &spec, 20);
    let probe = stream.test.subset(&[0, 1, 2]).unwrap().features;
    let mut failures = Vec::new();
    for b in 0..stream.stage_train.len() {
        let before: Vec<Vec<u64>> = memo
            .model()
            .map(|m| {
                m.branches()
                    .iter()
                    .map(|br| br.flat_params().iter().map(|v| v.to_bits()).collect())
                    .collect()
            })
            .unwrap_or_default();
        train_stage(&mut memo, &stream, b);
        train_stage(&mut der, &stream, b);
        let (mm, dm) = (memo.model().unwrap(), der.model().unwrap());
        let t = b + 1;
        for (i, old) in before.iter().enumerate() {
            let now: Vec<u64> = mm.branches()[i].flat_params().iter().map(|v| v.to_bits()).collect();
            if &now != old {
                failures.push(format!("stage {b}: specialized branch {i} changed"));
            }
        }
        for (name, m) in [("memo", mm), ("der", dm)] {
            let width = m.forward_features(&probe).unwrap().cols();
            if width != t * spec.hidden_dim {
                failures.push(format!(
                    "stage {b}: {name} feature dim {width}, expected {}",
                    t * spec.hidden_dim
                ));
            }
        }
        let expected = dm.param_count() - (t - 1) * spec.trunk_param_count();
        if mm.param_count() != expected {
            failures.push(format!(
                "stage {b}: memo has {} params, expected {expected}",
                mm.param_count()
            ));
        }
    }
    failures
}
