//! Central finite-difference verification of tape gradients, run in 64-bit.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor4;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Check a seeded random subsample of at most this many elements per
    /// call (across all parameters). `None` checks every element.
    pub max_elements: Option<usize>,
    /// Largest accepted fraction of visited elements whose mismatch is
    /// explained by a kink inside the `±step` window (see
    /// [`Tape::track_branches`]).
    pub max_skip_fraction: f64,
    pub seed: u64,
    /// Lower bound on the relative-error denominator, so that vanishing
    /// gradients are compared on an absolute scale.
    pub denom_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-3, tol: 1e-4, max_elements: None, seed: 0, denom_floor: 1e-2, max_skip_fraction: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub param: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Elements skipped because the perturbation crossed a kink.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
    pub passed: bool,
    /// Set when the function could not be evaluated or produced a non-finite value.
    pub failure: Option<String>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of a scalar function against central
/// differences `(f(θ+h) − f(θ−h)) / 2h`.
///
/// `f` receives a fresh tape plus one parameter [`Var`] per entry of
/// `params`, and must return a single-element result. Elements are visited
/// in a seeded random order until `max_elements` of them have been compared.
/// A mismatching element whose perturbation also changed a discrete branch
/// of the function (a ReLU sign, a pooling argmax, a sort order) is skipped
/// rather than failed, since the function has no derivative across that
/// window; mismatches on a single smooth piece always fail.
pub fn check_gradients<F>(mut f: F, params: &[Tensor4<f64>], cfg: &GradCheckConfig) -> GradCheckReport
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let fail = |msg: String| GradCheckReport { checked: 0, skipped: 0, max_rel_err: f64::INFINITY, worst: None, passed: false, failure: Some(msg) };

    let mut eval = |ps: &[Tensor4<f64>]| -> std::result::Result<(Tape<f64>, Vec<Var>, Var), String> {
        let mut tape = Tape::new();
        tape.track_branches();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars).map_err(|e| e.to_string())?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(format!("function returned {} values, expected a scalar", v.len()));
        }
        if !v.data()[0].is_finite() {
            return Err(format!("function value is {}", v.data()[0]));
        }
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = match eval(params) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let grads = tape.backward(out);
    let base_branch = tape.branch_signature();
    let analytic: Vec<Tensor4<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor4::zeros(p.shape())))
        .collect();
    drop(tape);

    let total: usize = params.iter().map(Tensor4::len).sum();
    let wanted = cfg.max_elements.unwrap_or(total).min(total);
    let order: Vec<usize> = if wanted < total {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        sample(&mut rng, total, total).into_vec()
    } else {
        (0..total).collect()
    };

    let mut report = GradCheckReport { checked: 0, skipped: 0, max_rel_err: 0.0, worst: None, passed: true, failure: None };
    let mut perturbed = params.to_vec();
    for flat in order {
        if report.checked >= wanted {
            break;
        }
        let (pi, ei) = locate(params, flat);
        let orig = perturbed[pi].data()[ei];
        let mut value_at = |v: f64| -> std::result::Result<(f64, Option<u64>), String> {
            perturbed[pi].data_mut()[ei] = v;
            let (t, _, o) = eval(&perturbed)?;
            Ok((t.value(o).data()[0], t.branch_signature()))
        };
        let plus = value_at(orig + cfg.step);
        let minus = value_at(orig - cfg.step);
        perturbed[pi].data_mut()[ei] = orig;
        let ((plus, bp), (minus, bm)) = match (plus, minus) {
            (Ok(p), Ok(m)) => (p, m),
            (Err(e), _) | (_, Err(e)) => {
                return GradCheckReport { failure: Some(format!("param {pi} element {ei}: {e}")), passed: false, ..report };
            }
        };
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic[pi].data()[ei];
        let rel = relative_error(a, numeric, cfg.denom_floor);
        if rel > cfg.tol && (bp != base_branch || bm != base_branch) {
            // The mismatch is explained by a kink inside the window.
            report.skipped += 1;
            continue;
        }
        report.checked += 1;
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = rel.max(report.max_rel_err);
            report.worst = Some(Mismatch { param: pi, element: ei, analytic: a, numeric, rel_err: rel });
        }
    }
    let visited = report.checked + report.skipped;
    let skip_ok = visited == 0 || report.skipped as f64 <= cfg.max_skip_fraction * visited as f64;
    if !skip_ok {
        report.failure = Some(format!("{} of {visited} elements sit on kinks", report.skipped));
    }
    report.passed = skip_ok && report.checked > 0 && report.max_rel_err <= cfg.tol;
    report
}

fn locate(params: &[Tensor4<f64>], mut flat: usize) -> (usize, usize) {
    for (i, p) in params.iter().enumerate() {
        if flat < p.len() {
            return (i, flat);
        }
        flat -= p.len();
    }
    unreachable!("flat index within total element count")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_sum_away_from_kinks() {
        let x = Tensor4::from_fn([1, 2, 3, 3], |_, c, y, x| {
            let v = (c * 9 + y * 3 + x) as f64 * 0.37 - 2.9;
            if v.abs() < 0.05 { 0.5 } else { v }
        });
        let r = check_gradients(
            |t, v| {
                let y = t.relu(v[0]);
                Ok(t.sum(y))
            },
            &[x],
            &GradCheckConfig { tol: 1e-6, ..Default::default() },
        );
        assert!(r.passed, "{r:?}");
        assert!(r.max_rel_err <= 1e-6);
    }

    #[test]
    fn kink_crossings_are_skipped() {
        // One entry sits within a step of the ReLU kink.
        let x = Tensor4::from_vec([1, 1, 1, 4], vec![0.7, -1.2, 0.0004, 2.0]).unwrap();
        let r = check_gradients(
            |t, v| {
                let y = t.relu(v[0]);
                Ok(t.sum(y))
            },
            &[x],
            &GradCheckConfig::default(),
        );
        assert_eq!((r.checked, r.skipped), (3, 1));
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn mostly_kinked_function_fails() {
        let x = Tensor4::from_vec([1, 1, 1, 3], vec![0.0001, -0.0002, 1.0]).unwrap();
        let r = check_gradients(
            |t, v| {
                let y = t.relu(v[0]);
                Ok(t.sum(y))
            },
            &[x],
            &GradCheckConfig::default(),
        );
        assert!(!r.passed);
        assert!(r.failure.unwrap().contains("kinks"));
    }

    #[test]
    fn non_finite_value_reported() {
        let x = Tensor4::full([1, 1, 1, 1], 1.0);
        let r = check_gradients(
            |t, v| {
                let y = t.scale(v[0], f64::INFINITY);
                Ok(t.sum(y))
            },
            &[x],
            &GradCheckConfig::default(),
        );
        assert!(!r.passed);
        assert!(r.failure.unwrap().contains("inf"));
    }

    #[test]
    fn subsample_respects_limit() {
        let x = Tensor4::from_fn([1, 1, 10, 10], |_, _, y, x| (y * 10 + x) as f64);
        let r = check_gradients(
            |t, v| Ok(t.sum(v[0])),
            &[x],
            &GradCheckConfig { max_elements: Some(50), ..Default::default() },
        );
        assert_eq!(r.checked, 50);
        assert!(r.passed);
    }
}
