//! Central finite-difference verification of analytic gradients.

use super::param::Parameter;
use super::tensor::{backward, Tensor};

/// Outcome of a gradient check. `max_error` is a relative error except where
/// both magnitudes are below 1e-8, where the absolute difference is used.
pub struct GradCheckReport {
    pub max_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// max error per parameter, in input order
    pub per_param: Vec<(String, f64)>,
    pub elements_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_error < tol
    }

    pub fn summary(&self) -> String {
        format!(
            "checked {} elements, max error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
            self.elements_checked,
            self.max_error,
            self.worst_param,
            self.worst_index,
            self.worst_analytic,
            self.worst_numeric
        )
    }
}

fn error_of(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if analytic.abs() < 1e-8 && numeric.abs() < 1e-8 {
        diff
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Compare analytic gradients of a deterministic scalar function against
/// central differences `(f(θ+h) - f(θ-h)) / 2h`, element by element.
/// Always produces a report; `f` is re-evaluated `2·numel + 1` times.
pub fn grad_check(params: &[Parameter], f: impl Fn() -> Tensor, h: f64) -> GradCheckReport {
    for p in params {
        p.zero_grad();
    }
    let loss = f();
    backward(&loss);
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad()).collect();
    for p in params {
        p.zero_grad();
    }

    let mut report = GradCheckReport {
        max_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        per_param: Vec::new(),
        elements_checked: 0,
    };

    for (pi, p) in params.iter().enumerate() {
        let base = p.value();
        let mut param_max = 0.0f64;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            p.set_value(plus);
            let fp = f().item();
            let mut minus = base.clone();
            minus[i] -= h;
            p.set_value(minus);
            let fm = f().item();
            p.set_value(base.clone());

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi][i];
            let err = error_of(a, numeric);
            report.elements_checked += 1;
            param_max = param_max.max(err);
            if err > report.max_error {
                report.max_error = err;
                report.worst_param = p.name().to_string();
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
        report.per_param.push((p.name().to_string(), param_max));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let p = Parameter::new("x", &[1], vec![3.0], true);
        let p2 = p.clone();
        let report = grad_check(&[p], move || {
            let x = p2.leaf();
            x.mul(&x)
        }, 1e-4);
        assert!(report.passes(1e-8), "{}", report.summary());
        assert_eq!(report.worst_analytic, 6.0);
    }

    #[test]
    fn inactive_hinge_has_zero_gradient_both_ways() {
        let p = Parameter::new("x", &[1], vec![-1.0], true);
        let p2 = p.clone();
        let report = grad_check(&[p], move || p2.leaf().relu().sum_all(), 1e-4);
        assert_eq!(report.worst_analytic, 0.0);
        assert_eq!(report.worst_numeric, 0.0);
        assert!(report.passes(1e-10));
    }

    #[test]
    fn multivariate_composite() {
        let w = Parameter::new("w", &[2, 2], vec![0.4, -0.3, 0.8, 0.1], true);
        let b = Parameter::new("b", &[2], vec![0.05, -0.2], true);
        let (w2, b2) = (w.clone(), b.clone());
        let x = vec![0.7, -1.2];
        let report = grad_check(&[w, b], move || {
            let xv = Tensor::constant(&[1, 2], x.clone());
            xv.matmul(&w2.leaf())
                .add_bias(&b2.leaf())
                .gelu()
                .softmax()
                .ln()
                .neg()
                .mean_all()
        }, 1e-5);
        assert!(report.passes(1e-7), "{}", report.summary());
    }
}
