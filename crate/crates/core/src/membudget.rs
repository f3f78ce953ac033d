//! Byte-exact memory accounting and model↔exemplar budget alignment.
//!
//! Accounting is a cost model: parameters are charged `bytes_per_param`
//! (4 by default, a 32-bit float) regardless of the in-memory precision, and
//! each stored instance is charged `bytes_per_exemplar` (3072 for a 3×32×32
//! 8-bit image). Megabytes are binary, 2²⁰ bytes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BYTES_PER_MB: u64 = 1 << 20;
pub const DEFAULT_BYTES_PER_PARAM: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub model_param_count: u64,
    pub bytes_per_param: u64,
    pub exemplar_count: u64,
    pub bytes_per_exemplar: u64,
}

impl BudgetLedger {
    pub fn new(
        model_param_count: u64,
        bytes_per_param: u64,
        exemplar_count: u64,
        bytes_per_exemplar: u64,
    ) -> Result<Self> {
        if bytes_per_param == 0 || bytes_per_exemplar == 0 {
            return Err(Error::Config("byte costs must be at least 1".into()));
        }
        Ok(BudgetLedger {
            model_param_count,
            bytes_per_param,
            exemplar_count,
            bytes_per_exemplar,
        })
    }

    pub fn model_bytes(&self) -> u64 {
        self.model_param_count * self.bytes_per_param
    }

    pub fn exemplar_bytes(&self) -> u64 {
        self.exemplar_count * self.bytes_per_exemplar
    }

    pub fn total_bytes(&self) -> u64 {
        self.model_bytes() + self.exemplar_bytes()
    }

    /// Total size in MB, rounded to two decimals.
    pub fn total_megabytes(&self) -> f64 {
        round2(megabytes(self.total_bytes()))
    }

    /// `ρ = model bytes / total bytes`.
    pub fn model_ratio(&self) -> Result<f64> {
        let total = self.total_bytes();
        if total == 0 {
            return Err(Error::contract("model ratio of an empty ledger"));
        }
        Ok(self.model_bytes() as f64 / total as f64)
    }
}

pub fn megabytes(bytes: u64) -> f64 {
    bytes as f64 / BYTES_PER_MB as f64
}

/// Whole bytes in `mb` binary megabytes, rounded down.
pub fn mb_to_bytes(mb: f64) -> u64 {
    (mb * BYTES_PER_MB as f64).floor() as u64
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Number of whole exemplars occupying the same bytes as `param_count` parameters.
pub fn exemplar_equivalent(param_count: u64, bytes_per_param: u64, bytes_per_exemplar: u64) -> u64 {
    (param_count * bytes_per_param) / bytes_per_exemplar
}

/// Exemplar count that fills `target_total_bytes` after paying for the model
/// and `base_exemplars`, never exceeding the target.
pub fn align_budget(
    target_total_bytes: u64,
    model_bytes: u64,
    bytes_per_exemplar: u64,
    base_exemplars: u64,
) -> Result<u64> {
    if bytes_per_exemplar == 0 {
        return Err(Error::Config("bytes per exemplar must be at least 1".into()));
    }
    let floor = model_bytes + base_exemplars * bytes_per_exemplar;
    if target_total_bytes < floor {
        return Err(Error::Budget(format!(
            "target {target_total_bytes} B is below the {floor} B needed for the model and {base_exemplars} exemplars"
        )));
    }
    Ok(base_exemplars + (target_total_bytes - floor) / bytes_per_exemplar)
}

/// Parameter counts of the CIFAR ResNet family (depth `6n + 2`, option-A
/// shortcuts, batch-norm affine parameters, no classifier).
/// ResNet32 has 463,504 parameters.
pub mod cifar_resnet {
    /// Stages of `n` basic blocks at widths 16, 32, 64.
    fn stage(cin: u64, cout: u64, n: u64) -> u64 {
        let conv = |i: u64, o: u64| 9 * i * o;
        let bn = |c: u64| 2 * c;
        let first = conv(cin, cout) + conv(cout, cout) + 2 * bn(cout);
        let rest = conv(cout, cout) * 2 + 2 * bn(cout);
        first + (n - 1) * rest
    }

    fn blocks_per_stage(depth: u64) -> u64 {
        assert!(depth >= 8 && (depth - 2).is_multiple_of(6), "CIFAR ResNet depth must be 6n+2");
        (depth - 2) / 6
    }

    /// Stem plus the first two stages: the generalized part when the last
    /// stage is specialized.
    pub fn generalized_params(depth: u64) -> u64 {
        let n = blocks_per_stage(depth);
        9 * 3 * 16 + 2 * 16 + stage(16, 16, n) + stage(16, 32, n)
    }

    /// The last stage.
    pub fn specialized_params(depth: u64) -> u64 {
        stage(32, 64, blocks_per_stage(depth))
    }

    pub fn params(depth: u64) -> u64 {
        generalized_params(depth) + specialized_params(depth)
    }

    /// One full backbone per task.
    pub fn full_expand_params(depth: u64, tasks: u64) -> u64 {
        tasks * params(depth)
    }

    /// Shared generalized part plus one specialized stage per task.
    pub fn decoupled_params(depth: u64, tasks: u64) -> u64 {
        generalized_params(depth) + tasks * specialized_params(depth)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exemplar_equivalent_examples() {
        assert_eq!(exemplar_equivalent(463_504, 4, 3072), 603);
        assert_eq!(exemplar_equivalent(11_176_512, 4, 150_528), 296);
        assert_eq!(exemplar_equivalent(768, 4, 3072), 1);
    }

    #[test]
    fn megabyte_examples() {
        let model = BudgetLedger::new(463_504, 4, 0, 3072).unwrap();
        assert!((model.total_megabytes() - 1.76).abs() <= 0.02);
        let ex = BudgetLedger::new(0, 4, 2000, 3072).unwrap();
        assert!((ex.total_megabytes() - 5.85).abs() <= 0.02);
        let empty = BudgetLedger::new(0, 4, 0, 3072).unwrap();
        assert_eq!(empty.total_megabytes(), 0.0);
    }

    #[test]
    fn align_budget_examples() {
        let target = 4_635_040 * 4 + 2000 * 3072;
        assert_eq!(align_budget(target, 463_504 * 4, 3072, 2000).unwrap(), 7431);
        assert_eq!(align_budget(1000 + 5 * 16, 1000, 16, 5).unwrap(), 5);
        assert_eq!(align_budget(1000 + 6 * 16, 1000, 16, 5).unwrap(), 6);
        assert!(matches!(align_budget(1000, 1000, 16, 1), Err(Error::Budget(_))));
    }

    #[test]
    fn model_ratio_examples() {
        assert_eq!(BudgetLedger::new(10, 4, 0, 16).unwrap().model_ratio().unwrap(), 1.0);
        assert_eq!(BudgetLedger::new(0, 4, 3, 16).unwrap().model_ratio().unwrap(), 0.0);
        assert!(BudgetLedger::new(0, 4, 0, 16).unwrap().model_ratio().is_err());
        // 463,504 params and 2000 CIFAR images: 1.77 MB of 7.63 MB.
        let l = BudgetLedger::new(463_504, 4, 2000, 3072).unwrap();
        assert!((l.model_ratio().unwrap() - 0.231).abs() < 0.005);
    }

    #[test]
    fn zero_byte_costs_rejected() {
        assert!(BudgetLedger::new(1, 0, 1, 1).is_err());
        assert!(BudgetLedger::new(1, 1, 1, 0).is_err());
    }

    #[test]
    fn resnet_family_sizes() {
        assert_eq!(cifar_resnet::params(32), 463_504);
        assert_eq!(cifar_resnet::params(20), 269_072);
        assert_eq!(cifar_resnet::full_expand_params(32, 10), 4_635_040);
        assert_eq!(cifar_resnet::decoupled_params(32, 10), 3_626_896);
    }

    proptest! {
        #[test]
        fn align_round_trips(params in 0u64..10_000_000, count in 0u64..20_000, bpe in 1u64..200_000, base in 0u64..20_000) {
            let ledger = BudgetLedger::new(params, 4, count, bpe).unwrap();
            let base = base.min(count);
            prop_assert_eq!(align_budget(ledger.total_bytes(), ledger.model_bytes(), bpe, base).unwrap(), count);
        }

        #[test]
        fn conversions_are_monotone(p in 0u64..10_000_000, dp in 0u64..1_000_000, bpe in 1u64..200_000, t in 0u64..1_000_000_000, dt in 0u64..1_000_000) {
            prop_assert!(exemplar_equivalent(p, 4, bpe) <= exemplar_equivalent(p + dp, 4, bpe));
            if let Ok(a) = align_budget(t, 0, bpe, 0) {
                prop_assert!(a <= align_budget(t + dt, 0, bpe, 0).unwrap());
            }
        }
    }
}
