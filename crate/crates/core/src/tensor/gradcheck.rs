//! Central finite-difference verification of reverse-mode gradients.
//!
//! Only forward evaluations are used on the numeric side, so the check is
//! independent of every backward rule it audits.

use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::noise::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Central-difference step `h`.
    pub step: f64,
    /// Allowed `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub rel_tol: f64,
    /// Magnitude below which errors are judged in absolute terms.
    pub floor: f64,
    /// Number of randomly chosen scalar entries to probe.
    pub probes: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-5, rel_tol: 1e-4, floor: 1e-6, probes: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.worst().map_or(0.0, |p| p.rel_err)
    }

    pub fn passed(&self) -> bool {
        self.probes.iter().all(|p| p.rel_err <= self.rel_tol)
    }
}

/// Compare the gradient of a scalar function against central differences.
///
/// `build` receives the current parameter values, records the computation
/// in the given graph and returns the scalar loss together with the graph
/// handles standing for each parameter (same order as `params`). A handle
/// may be a constant, in which case its analytic gradient is zero.
///
/// Probes are drawn uniformly over all scalar entries when there are more
/// entries than `cfg.probes`; otherwise every entry is checked once.
pub fn check_gradients<F>(params: &[Tensor<f64>], cfg: &GradCheck, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>], &mut Graph<f64>) -> Result<(Var, Vec<Var>)>,
{
    let mut g = Graph::new();
    let (loss, handles) = build(params, &mut g)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = handles.iter().map(|&v| grads.get(v)).collect();
    drop(g);

    let sizes: Vec<usize> = params.iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    let picks: Vec<usize> = if total <= cfg.probes {
        (0..total).collect()
    } else {
        let mut rng = seeded_rng(cfg.seed);
        (0..cfg.probes).map(|_| rng.random_range(0..total)).collect()
    };

    let mut eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let (loss, _) = build(values, &mut g)?;
        Ok(g.value(loss).item())
    };

    let mut work = params.to_vec();
    let mut probes = Vec::with_capacity(picks.len());
    for flat in picks {
        let (mut param, mut index) = (0, flat);
        while index >= sizes[param] {
            index -= sizes[param];
            param += 1;
        }
        let orig = work[param].data()[index];
        work[param].data_mut()[index] = orig + cfg.step;
        let up = eval(&work)?;
        work[param].data_mut()[index] = orig - cfg.step;
        let down = eval(&work)?;
        work[param].data_mut()[index] = orig;
        let numeric = (up - down) / (2.0 * cfg.step);
        let analytic = analytic[param].data()[index];
        let scale = analytic.abs().max(numeric.abs()).max(cfg.floor);
        probes.push(Probe { param, index, analytic, numeric, rel_err: (analytic - numeric).abs() / scale });
    }
    Ok(GradCheckReport { probes, rel_tol: cfg.rel_tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx sum(x·x) = 2x, but we hand the checker a graph where one
        // factor is a constant, so the analytic side only sees x.
        let x = Tensor::from_f64(vec![3], &[0.5, -1.0, 2.0]).unwrap();
        let report = check_gradients(&[x], &GradCheck::default(), |ps, g| {
            let a = g.param(ps[0].clone());
            let b = g.constant(ps[0].clone());
            let y = g.mul(a, b)?;
            Ok((g.sum(y)?, vec![a]))
        })
        .unwrap();
        assert!(!report.passed());
        assert!((report.max_rel_err() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn accepts_a_correct_gradient() {
        let x = Tensor::from_f64(vec![3], &[0.5, -1.0, 2.0]).unwrap();
        let report = check_gradients(&[x], &GradCheck::default(), |ps, g| {
            let a = g.param(ps[0].clone());
            let y = g.mul(a, a)?;
            Ok((g.sum(y)?, vec![a]))
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
        assert_eq!(report.probes.len(), 3);
    }
}
