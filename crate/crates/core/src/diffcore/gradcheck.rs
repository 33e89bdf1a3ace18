//! Finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::par;
use crate::rng;

use super::tensor::{ParameterSet, Tensor};

/// Which coordinates of each trainable parameter to probe.
#[derive(Debug, Clone, Copy)]
pub enum CoordSelection {
    /// Every coordinate of every trainable parameter (tiny configs only).
    All,
    /// A seeded random sample of at most this many coordinates per parameter.
    Sample(usize),
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Denominator floor: errors on gradients smaller than this are measured
    /// against the floor, i.e. absolutely at `floor * tol`.
    pub floor: f64,
    pub selection: CoordSelection,
    /// Seed for coordinate sampling (ignored under `CoordSelection::All`).
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-4,
            tol: 1e-4,
            floor: 0.01,
            selection: CoordSelection::All,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoordReport {
    pub path: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub path: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamReport>,
    pub worst: Option<CoordReport>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `analytic` gradients of `loss_fn` at `params` by fourth-order
/// central differences at step `h`, probing `θ ± h` and `θ ± 2h` per
/// coordinate: `(−f(θ+2h) + 8f(θ+h) − 8f(θ−h) + f(θ−2h)) / 12h`. The
/// second-order two-point stencil leaves `f‴h²/6` of truncation, which for
/// losses with a `1/τ`-scaled softmax sits near 1e-4 at h = 1e-4 — the same
/// order as the tolerance; the five-point stencil pushes truncation to
/// `f⁽⁵⁾h⁴/30` so any remaining mismatch is the analytic gradient's fault.
///
/// `loss_fn` must be a pure function of the parameters; this is verified by
/// evaluating it twice at the unperturbed point and demanding bitwise equal
/// results. Only trainable parameters are probed; `analytic` must hold a
/// gradient tensor of matching shape for each.
pub fn grad_check(
    loss_fn: &(dyn Fn(&ParameterSet) -> Result<f64> + Sync),
    params: &ParameterSet,
    analytic: &BTreeMap<String, Tensor>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(opts.h > 0.0) || !(opts.tol > 0.0) {
        return Err(Error::config("grad_check needs h > 0 and tol > 0"));
    }
    let base_a = loss_fn(params)?;
    let base_b = loss_fn(params)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::numeric(format!(
            "loss function is not deterministic: {base_a} vs {base_b} at the same point"
        )));
    }

    // (path, coordinate) pairs to probe, in sorted-path order.
    let mut jobs: Vec<(String, usize)> = Vec::new();
    for (pi, (path, param)) in params.iter().enumerate() {
        if !param.trainable {
            continue;
        }
        let grad = analytic.get(path).ok_or_else(|| {
            Error::config(format!("no analytic gradient supplied for {path:?}"))
        })?;
        if grad.shape() != param.tensor.shape() {
            return Err(Error::shape(format!(
                "analytic gradient for {path:?} has shape {:?}, parameter has {:?}",
                grad.shape(),
                param.tensor.shape()
            )));
        }
        let n = param.tensor.numel();
        match opts.selection {
            CoordSelection::All => jobs.extend((0..n).map(|i| (path.clone(), i))),
            CoordSelection::Sample(k) => {
                if n <= k {
                    jobs.extend((0..n).map(|i| (path.clone(), i)));
                } else {
                    let mut r = rng::stream(opts.seed, "gradcheck-coords", &[pi as u64]);
                    let mut picked: Vec<usize> = sample(&mut r, n, k).into_iter().collect();
                    picked.sort_unstable();
                    jobs.extend(picked.into_iter().map(|i| (path.clone(), i)));
                }
            }
        }
    }

    let h = opts.h;
    let reports: Vec<Result<CoordReport>> = par::map_slice(&jobs, |(path, coord)| {
        let mut probe = params.clone();
        let original = probe.tensor(path)?.data()[*coord];
        let eval = |p: &mut ParameterSet, v: f64| -> Result<f64> {
            p.get_mut(path)
                .expect("path came from this set")
                .tensor
                .data_mut()[*coord] = v;
            loss_fn(p)
        };
        let plus2 = eval(&mut probe, original + 2.0 * h)?;
        let plus = eval(&mut probe, original + h)?;
        let minus = eval(&mut probe, original - h)?;
        let minus2 = eval(&mut probe, original - 2.0 * h)?;
        let numeric = (-plus2 + 8.0 * plus - 8.0 * minus + minus2) / (12.0 * h);
        let analytic_v = analytic[path].data()[*coord];
        Ok(CoordReport {
            path: path.clone(),
            coord: *coord,
            analytic: analytic_v,
            numeric,
            rel_err: relative_error(analytic_v, numeric, opts.floor),
        })
    });

    let mut per_param: BTreeMap<String, ParamReport> = BTreeMap::new();
    let mut worst: Option<CoordReport> = None;
    for r in reports {
        let r = r?;
        let entry = per_param.entry(r.path.clone()).or_insert(ParamReport {
            path: r.path.clone(),
            checked: 0,
            max_rel_err: 0.0,
        });
        entry.checked += 1;
        entry.max_rel_err = entry.max_rel_err.max(r.rel_err);
        if worst.as_ref().is_none_or(|w| r.rel_err > w.rel_err) {
            worst = Some(r);
        }
    }
    let max_rel_err = worst.as_ref().map_or(0.0, |w| w.rel_err);
    Ok(GradCheckReport {
        per_param: per_param.into_values().collect(),
        worst,
        max_rel_err,
        tol: opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_params(v: &[f64]) -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.insert("theta", Tensor::from_vec(v.to_vec())).unwrap();
        ps
    }

    #[test]
    fn quadratic_gradient_matches() {
        // f(θ) = Σ θᵢ², df/dθᵢ = 2θᵢ; at θ = [3] the gradient is 6.
        let params = quadratic_params(&[3.0]);
        let f = |p: &ParameterSet| -> crate::error::Result<f64> {
            Ok(p.tensor("theta")?.data().iter().map(|v| v * v).sum())
        };
        let mut analytic = BTreeMap::new();
        analytic.insert("theta".to_string(), Tensor::from_vec(vec![6.0]));
        let report = grad_check(&f, &params, &analytic, &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-9);
    }

    #[test]
    fn linear_gradient_is_exact() {
        let params = quadratic_params(&[0.3, -1.5, 2.0]);
        let f = |p: &ParameterSet| -> crate::error::Result<f64> {
            Ok(p.tensor("theta")?.data().iter().sum())
        };
        let mut analytic = BTreeMap::new();
        analytic.insert("theta".to_string(), Tensor::from_vec(vec![1.0; 3]));
        let report = grad_check(&f, &params, &analytic, &GradCheckOptions::default()).unwrap();
        assert!(report.passed());
        for p in &report.per_param {
            assert_eq!(p.checked, 3);
        }
    }

    #[test]
    fn high_curvature_truncation_stays_below_tolerance() {
        // f(θ) = exp(300θ) at θ = 0: a two-point stencil at h = 1e-4 leaves
        // f‴h²/6 ≈ 1.5e-4 relative truncation — over the default tolerance —
        // while the five-point stencil's f⁽⁵⁾h⁴/30 is ~3e-8.
        let params = quadratic_params(&[0.0]);
        let f = |p: &ParameterSet| -> crate::error::Result<f64> {
            Ok((300.0 * p.tensor("theta")?.data()[0]).exp())
        };
        let mut analytic = BTreeMap::new();
        analytic.insert("theta".to_string(), Tensor::from_vec(vec![300.0]));
        let report = grad_check(&f, &params, &analytic, &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-6);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let params = quadratic_params(&[3.0]);
        let f = |p: &ParameterSet| -> crate::error::Result<f64> {
            Ok(p.tensor("theta")?.data().iter().map(|v| v * v).sum())
        };
        let mut analytic = BTreeMap::new();
        analytic.insert("theta".to_string(), Tensor::from_vec(vec![5.0]));
        let report = grad_check(&f, &params, &analytic, &GradCheckOptions::default()).unwrap();
        assert!(!report.passed());
        let worst = report.worst.unwrap();
        assert_eq!(worst.path, "theta");
        assert!((worst.numeric - 6.0).abs() < 1e-6);
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let params = quadratic_params(&[1.0]);
        let calls = AtomicUsize::new(0);
        let f = move |_: &ParameterSet| -> crate::error::Result<f64> {
            Ok(calls.fetch_add(1, Ordering::SeqCst) as f64)
        };
        let analytic = BTreeMap::new();
        let err = grad_check(&f, &params, &analytic, &GradCheckOptions::default());
        assert!(err.is_err());
    }

    #[test]
    fn sampling_limits_probed_coordinates() {
        let params = quadratic_params(&(0..50).map(|v| v as f64 * 0.1).collect::<Vec<_>>());
        let f = |p: &ParameterSet| -> crate::error::Result<f64> {
            Ok(p.tensor("theta")?.data().iter().map(|v| v * v).sum())
        };
        let grad: Vec<f64> = params.tensor("theta").unwrap().data().iter().map(|v| 2.0 * v).collect();
        let mut analytic = BTreeMap::new();
        analytic.insert("theta".to_string(), Tensor::from_vec(grad));
        let opts = GradCheckOptions {
            selection: CoordSelection::Sample(7),
            ..GradCheckOptions::default()
        };
        let report = grad_check(&f, &params, &analytic, &opts).unwrap();
        assert!(report.passed());
        assert_eq!(report.per_param[0].checked, 7);
    }

    #[test]
    fn missing_analytic_gradient_is_config_error() {
        let params = quadratic_params(&[1.0]);
        let f = |p: &ParameterSet| -> crate::error::Result<f64> {
            Ok(p.tensor("theta")?.data()[0])
        };
        let analytic = BTreeMap::new();
        assert!(grad_check(&f, &params, &analytic, &GradCheckOptions::default()).is_err());
    }
}
