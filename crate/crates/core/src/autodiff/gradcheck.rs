use super::{GradStore, ParamRegistry};
use crate::error::{Error, Result};

/// The coordinate with the largest relative error.
#[derive(Clone, Debug, PartialEq)]
pub struct WorstCoordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates: usize,
    pub worst: Option<WorstCoordinate>,
}

/// Compares the analytic gradient returned by `f` with central differences
/// `(f(p + eps) - f(p - eps)) / 2 eps` over every coordinate of every
/// registered parameter.
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
/// `f` must be deterministic in the parameter values. Parameters are
/// restored bit-exactly before returning.
pub fn check_gradients<F>(mut f: F, params: &mut ParamRegistry, epsilon: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamRegistry) -> Result<(f64, GradStore)>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} outside (0, 1e-3]")));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("function value {value} at the unperturbed point")));
    }

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.get(id).data.len();
        for k in 0..n {
            let original = params.get(id).data[k];
            params.get_mut(id).data[k] = original + epsilon;
            let plus = f(params).map(|(v, _)| v);
            params.get_mut(id).data[k] = original - epsilon;
            let minus = f(params).map(|(v, _)| v);
            params.get_mut(id).data[k] = original;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "function value at {}[{k}] +/- {epsilon}: {plus}, {minus}",
                    params.name(id)
                )));
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.get(id).map_or(0.0, |g| g[k]);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some(WorstCoordinate {
                    param: params.name(id).to_string(),
                    index: k,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
