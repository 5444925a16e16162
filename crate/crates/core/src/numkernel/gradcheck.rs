//! Central finite-difference gradient oracle.

use super::rng::SeededRng;
use super::{Grads, KernelError, ParamStore};

#[derive(Debug, Clone)]
pub struct FdConfig {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many randomly chosen coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
    /// Restrict the check to these parameter ids.
    pub only: Option<Vec<String>>,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            step: 1e-5,
            max_coords_per_tensor: None,
            only: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdWorst {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    /// Max over checked coordinates of `|analytic − numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    pub worst: Option<FdWorst>,
    pub coords_checked: usize,
}

/// Compares `grad`'s analytic gradient against central differences of
/// `value`. Missing analytic entries count as zero. Works with any error
/// type that can carry a [`KernelError`].
pub fn finite_diff_check<V, G, E>(
    value: V,
    grad: G,
    params: &ParamStore,
    cfg: &FdConfig,
) -> std::result::Result<FdReport, E>
where
    V: Fn(&ParamStore) -> std::result::Result<f64, E>,
    G: Fn(&ParamStore) -> std::result::Result<(f64, Grads), E>,
    E: From<KernelError>,
{
    let (f0, analytic) = grad(params)?;
    if !f0.is_finite() {
        return Err(KernelError::NonFiniteObjective(f0).into());
    }
    analytic.check_shapes(params)?;
    let mut rng = SeededRng::new(cfg.seed);
    let mut probe = params.clone();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let ids: Vec<String> = match &cfg.only {
        Some(only) => only.clone(),
        None => params.ids().cloned().collect(),
    };
    for id in ids {
        let n = params.get(&id)?.len();
        let coords: Vec<usize> = match cfg.max_coords_per_tensor {
            Some(limit) if limit < n => (0..limit).map(|_| rng.index(n)).collect(),
            _ => (0..n).collect(),
        };
        for idx in coords {
            let orig = params.get(&id)?.data()[idx];
            probe.get_mut(&id)?.data_mut()[idx] = orig + cfg.step;
            let fp = value(&probe)?;
            probe.get_mut(&id)?.data_mut()[idx] = orig - cfg.step;
            let fm = value(&probe)?;
            probe.get_mut(&id)?.data_mut()[idx] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                let bad = if fp.is_finite() { fm } else { fp };
                return Err(KernelError::NonFiniteObjective(bad).into());
            }
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = analytic.get(&id).map_or(0.0, |g| g.data()[idx]);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some(FdWorst {
                        param: id.clone(),
                        index: idx,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{Result, Tensor};

    fn square_objective() -> (ParamStore, impl Fn(&ParamStore) -> Result<f64>) {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![3.0]));
        (p, |p: &ParamStore| Ok(p.get("x")?.data()[0].powi(2)))
    }

    #[test]
    fn square_at_three() {
        let (p, f) = square_objective();
        let report = finite_diff_check(
            &f,
            |p: &ParamStore| {
                let x = p.get("x")?.data()[0];
                let mut g = Grads::new();
                g.accumulate("x", Tensor::vector(vec![2.0 * x]))?;
                Ok((x * x, g))
            },
            &p,
            &FdConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert!((report.worst.unwrap().numeric - 6.0).abs() < 1e-8);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let (p, f) = square_objective();
        let report = finite_diff_check(
            &f,
            |p: &ParamStore| {
                let x = p.get("x")?.data()[0];
                let mut g = Grads::new();
                g.accumulate("x", Tensor::vector(vec![2.0 * x * 1.1]))?;
                Ok((x * x, g))
            },
            &p,
            &FdConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error > 1e-2);
    }

    #[test]
    fn non_finite_objective_propagates() {
        let (p, _) = square_objective();
        let err = finite_diff_check(
            |_: &ParamStore| Ok::<_, KernelError>(f64::NAN),
            |_: &ParamStore| Ok((f64::NAN, Grads::new())),
            &p,
            &FdConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, KernelError::NonFiniteObjective(_)));
    }
}
