use super::{backward, Bindings, ParamSet, Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so gradients that are zero up to
/// roundoff compare on an absolute scale.
const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub path: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tol)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| p.max_rel_err > self.tol)
            .collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

fn evaluate<F>(f: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params)?;
    let out = f(&mut tape, &bound)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.data()[0])
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(p + h) - f(p - h)) / 2h`, element by element.
///
/// With `max_elems_per_param`, larger tensors are probed at that many evenly
/// strided elements instead of exhaustively.
pub fn finite_difference_check<F>(
    f: F,
    params: &ParamSet,
    h: f64,
    tol: f64,
    max_elems_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let first = evaluate(&f, params)?;
    let second = evaluate(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {first} vs {second}"
        )));
    }

    let mut tape = Tape::new();
    let bound = tape.bind(params)?;
    let loss = f(&mut tape, &bound)?;
    let analytic = backward(&tape, loss, params)?;

    let mut probe = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for (path, value) in params.iter() {
        let n = value.len();
        let picks: Vec<usize> = match max_elems_per_param {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let grad = &analytic[path];
        let mut check = ParamCheck {
            path: path.to_string(),
            checked: picks.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &picks {
            let orig = value.data()[i];
            probe.get_mut(path).unwrap().data_mut()[i] = orig + h;
            let plus = evaluate(&f, &probe)?;
            probe.get_mut(path).unwrap().data_mut()[i] = orig - h;
            let minus = evaluate(&f, &probe)?;
            probe.get_mut(path).unwrap().data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            if rel > check.max_rel_err || !rel.is_finite() {
                check.max_rel_err = if rel.is_finite() { rel } else { f64::INFINITY };
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        h,
        tol,
        params: report,
    })
}
