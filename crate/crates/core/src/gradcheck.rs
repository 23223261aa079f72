//! Finite-difference checks: the exact routing surrogate against
//! differences of the expected retrieval, and the memory branch's main-path
//! gradients against differences of its output.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lngram::{lngram_forward, LngramConfig, LngramParams};
use crate::numerics::{dot, finite_difference_grad, max_relative_error};
use crate::surrogate::{exact_surrogate_grad, expected_retrieval, LocalBitLogits};

pub const SURROGATE_THRESHOLD: f64 = 1e-6;
pub const MAIN_PATH_THRESHOLD: f64 = 1e-5;
const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckGroup {
    pub threshold: f64,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub pass: bool,
    pub results: Vec<CheckResult>,
}

impl CheckGroup {
    fn new(threshold: f64, results: Vec<CheckResult>) -> Self {
        let max_rel_err = results.iter().map(|r| r.rel_err).fold(0.0, f64::max);
        let mean_rel_err = results.iter().map(|r| r.rel_err).sum::<f64>() / results.len().max(1) as f64;
        Self { threshold, max_rel_err, mean_rel_err, pass: max_rel_err < threshold, results }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub bits: usize,
    pub memory_dim: usize,
    pub surrogate: CheckGroup,
    pub main_path: CheckGroup,
    pub pass: bool,
}

/// Random `(z, g, E, tau)` cases at `bits` bits and `memory_dim` columns.
pub fn surrogate_cases(bits: usize, memory_dim: usize, cases: usize, seed: u64) -> Result<CheckGroup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::with_capacity(cases);
    for i in 0..cases {
        let e = Array2::from_shape_fn((1 << bits, memory_dim), |_| rng.random_range(-1.0..1.0));
        let g: Vec<f64> = (0..memory_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..bits).map(|_| rng.random_range(-3.0..3.0)).collect();
        let tau = rng.random_range(0.25..2.0);
        let analytic = exact_surrogate_grad(&LocalBitLogits(z.clone()), tau, &g, e.view())?;
        let mut failure = None;
        let fd = finite_difference_grad(
            |zz| match expected_retrieval(&LocalBitLogits(zz.to_vec()), tau, e.view()) {
                Ok(mu) => dot(&g, &mu),
                Err(err) => {
                    failure = Some(err);
                    f64::NAN
                }
            },
            &z,
            STEP,
        );
        if let Some(err) = failure {
            return Err(err);
        }
        results.push(CheckResult { name: format!("case{i}"), rel_err: max_relative_error(&analytic, &fd?, FLOOR) });
    }
    Ok(CheckGroup::new(SURROGATE_THRESHOLD, results))
}

/// Every table, readout and conv tensor of a small randomized branch built
/// from `config`, checked through `sum(lngram_forward(h) * g)`.
pub fn main_path_checks(config: &LngramConfig, seed: u64) -> Result<CheckGroup> {
    let d = 2 * config.bits;
    let config = LngramConfig { memory_dim: config.memory_dim.min(3), ..config.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = LngramParams::<f64>::init(d, &config, &mut rng)?;
    for (_, _, t) in p.tensors_mut() {
        t.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    let rows = 3 * config.max_order() + 2;
    let h = Array2::from_shape_fn((rows, d), |_| rng.random_range(-1.0..1.0));
    let g = Array2::from_shape_fn((rows, d), |_| rng.random_range(-1.0..1.0));
    let (_, cache) = p.forward(h.view(), rows)?;
    let mut grads = p.zeros_like();
    p.backward(&cache, g.view(), &mut grads)?;
    let names: Vec<String> = p.tensors().into_iter().map(|(n, _, _)| n).filter(|n| !n.starts_with("codec")).collect();
    let mut results = Vec::with_capacity(names.len());
    for name in names {
        let pick = |m: &LngramParams<f64>| -> Vec<f64> { m.tensors().into_iter().find(|(n, _, _)| *n == name).expect("named tensor").2.iter().copied().collect() };
        let analytic = pick(&grads);
        let base = pick(&p);
        let fd = finite_difference_grad(
            |z| {
                let mut q = p.clone();
                let t = q.tensors_mut().into_iter().find(|(n, _, _)| *n == name).expect("named tensor").2;
                t.iter_mut().zip(z).for_each(|(x, &v)| *x = v);
                lngram_forward(h.view(), &q).map_or(f64::NAN, |out| (out * &g).sum())
            },
            &base,
            STEP,
        )?;
        results.push(CheckResult { rel_err: max_relative_error(&fd, &analytic, FLOOR), name });
    }
    Ok(CheckGroup::new(MAIN_PATH_THRESHOLD, results))
}

pub fn gradcheck(config: &LngramConfig, cases: usize, seed: u64) -> Result<GradcheckReport> {
    config.validate(config.bits * 2)?;
    let surrogate = surrogate_cases(config.bits, config.memory_dim, cases, seed)?;
    let main_path = main_path_checks(config, seed.wrapping_add(1))?;
    let pass = surrogate.pass && main_path.pass;
    Ok(GradcheckReport { bits: config.bits, memory_dim: config.memory_dim, surrogate, main_path, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::readout::GateMode;

    #[test]
    fn default_branch_passes() {
        let r = gradcheck(&LngramConfig::default(), 100, 1).unwrap();
        assert_eq!(r.surrogate.results.len(), 100);
        assert!(r.pass, "{} {}", r.surrogate.max_rel_err, r.main_path.max_rel_err);
        assert!(r.main_path.results.iter().any(|c| c.name.starts_with("table")));
    }

    #[test]
    fn softmax_multi_table_passes() {
        let cfg = LngramConfig { bits: 2, subtables: 2, gate: GateMode::Softmax, ..Default::default() };
        assert!(gradcheck(&cfg, 10, 2).unwrap().pass);
    }

    #[test]
    fn group_statistics() {
        let g = CheckGroup::new(0.5, vec![CheckResult { name: "a".into(), rel_err: 0.2 }, CheckResult { name: "b".into(), rel_err: 0.6 }]);
        assert_eq!(g.max_rel_err, 0.6);
        assert!((g.mean_rel_err - 0.4).abs() < 1e-15);
        assert!(!g.pass);
    }
}
