use super::{Binder, ParamStore, Tape, Var};
use crate::error::Result;

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat element index of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub elements_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Settings for [`finite_difference_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub tol: f64,
    /// Denominator floor for the relative error, so that pairs of
    /// near-zero gradients are compared absolutely. It is multiplied by
    /// `max(1, |f(θ)|)` because the rounding error of a central difference
    /// grows with the magnitude of the loss.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

impl GradCheck {
    pub fn new(eps: f64, tol: f64) -> Self {
        GradCheck {
            eps,
            tol,
            ..GradCheck::default()
        }
    }

    /// `|a − n| / max(|a|, |n|, floor)`; zero when both are zero.
    pub fn relative_error(&self, analytic: f64, numeric: f64) -> f64 {
        self.relative_error_at(analytic, numeric, 0.0)
    }

    /// [`relative_error`](Self::relative_error) with the floor scaled for a loss value.
    pub fn relative_error_at(&self, analytic: f64, numeric: f64, loss: f64) -> f64 {
        let diff = (analytic - numeric).abs();
        if diff == 0.0 {
            return 0.0;
        }
        let floor = self.floor * loss.abs().max(1.0);
        diff / analytic.abs().max(numeric.abs()).max(floor)
    }
}

/// Checks every element of every parameter in `params`.
///
/// `f` must rebuild the same computation on each call; any randomness it
/// consumes has to be replayed identically (e.g. by reseeding inside `f`).
pub fn finite_difference_check<F>(params: &ParamStore, cfg: GradCheck, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &mut Binder) -> Result<Var>,
{
    let (analytic, loss_value) = {
        let mut tape = Tape::new();
        let mut binder = Binder::new(params);
        let loss = f(&mut tape, &mut binder)?;
        let grads = tape.backward(loss)?;
        (binder.named_gradients(&grads), tape.value(loss).item())
    };

    let eval = |store: &ParamStore, f: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(store);
        let loss = f(&mut tape, &mut binder)?;
        Ok(tape.value(loss).item())
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        elements_checked: 0,
        tolerance: cfg.tol,
        passed: true,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name)?.numel();
        let grad = &analytic[&name];
        for i in 0..n {
            let orig = params.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = orig + cfg.eps;
            let plus = eval(&work, &mut f)?;
            work.get_mut(&name)?.data_mut()[i] = orig - cfg.eps;
            let minus = eval(&work, &mut f)?;
            work.get_mut(&name)?.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = grad.data()[i];
            let rel = cfg.relative_error_at(a, numeric, loss_value);
            report.elements_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= cfg.tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("theta", Tensor::new([values.len()], values.to_vec()).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn sum_of_squares_matches() {
        let params = store(&[1.0, 2.0]);
        let report = finite_difference_check(&params, GradCheck::new(1e-5, 1e-8), |tape, b| {
            let x = b.bind(tape, "theta")?;
            let sq = tape.square(x);
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel_error < 1e-8);
        assert_eq!(report.elements_checked, 2);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let params = store(&[0.5]);
        let report = finite_difference_check(&params, GradCheck::default(), |tape, b| {
            let _ = b.bind(tape, "theta")?;
            Ok(tape.constant(Tensor::scalar(3.0)))
        })
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.passed);
    }

    #[test]
    fn detached_path_is_caught() {
        let params = store(&[1.5, -0.5]);
        let report = finite_difference_check(&params, GradCheck::default(), |tape, b| {
            let x = b.bind(tape, "theta")?;
            let d = tape.detach(x);
            let sq = tape.square(d);
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst.as_ref().unwrap().0, "theta");
    }
}
