use super::params::{Grads, ParamSet};
use crate::error::{Error, Result};

/// Largest relative disagreement between analytic gradients and central
/// differences over every trainable scalar:
/// `|a − n| / max(|a|, |n|, 1e−8)`.
///
/// `f` returns the loss and its analytic gradients at the given parameters.
pub fn grad_check<F>(f: F, params: &ParamSet, eps: f64) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<(f64, Grads)>,
{
    Ok(grad_check_detailed(f, params, eps)?.max_rel_err)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

pub fn grad_check_detailed<F>(f: F, params: &ParamSet, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<(f64, Grads)>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("grad_check eps must be > 0, got {eps}")));
    }
    let (base, analytic) = f(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("grad_check base loss {base}")));
    }
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<_> = params.ids().filter(|&id| params.is_trainable(id)).collect();
    for id in ids {
        let n = params.get(id).len();
        for i in 0..n {
            let orig = params.get(id).as_slice()[i];
            probe.get_mut(id).as_mut_slice()[i] = orig + eps;
            let plus = f(&probe)?.0;
            probe.get_mut(id).as_mut_slice()[i] = orig - eps;
            let minus = f(&probe)?.0;
            probe.get_mut(id).as_mut_slice()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g.as_slice()[i]);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err || !rel.is_finite() {
                report.max_rel_err = rel;
                report.worst = Some((params.param(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor2D;

    #[test]
    fn quadratic_is_exact() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor2D::row_vector(&[3.0])).unwrap();
        let f = |p: &ParamSet| {
            let v = p.get(w).get(0, 0);
            let mut g = Grads::for_trainable(p);
            g.set(w, Tensor2D::row_vector(&[2.0 * v]));
            Ok((v * v, g))
        };
        let err = grad_check(f, &ps, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor2D::row_vector(&[3.0])).unwrap();
        let f = |p: &ParamSet| {
            let v = p.get(w).get(0, 0);
            let mut g = Grads::for_trainable(p);
            g.set(w, Tensor2D::row_vector(&[v]));
            Ok((v * v, g))
        };
        assert!(grad_check(f, &ps, 1e-5).unwrap() > 0.4);
    }

    #[test]
    fn non_finite_base_is_an_error() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor2D::row_vector(&[0.0])).unwrap();
        let f = |p: &ParamSet| Ok((f64::NAN, Grads::for_trainable(p)));
        assert!(matches!(grad_check(f, &ps, 1e-5), Err(Error::NonFinite(_))));
    }
}
