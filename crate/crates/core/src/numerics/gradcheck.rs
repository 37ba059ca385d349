use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

fn evaluate<T, F>(f: &F, params: &[Tensor<T>]) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item().as_f64())
}

/// Max over all coordinates of `|analytic - fd| / max(|analytic|, |fd|, 1e-12)`
/// where `fd` is the central difference with step `epsilon`.
///
/// `f` records a scalar function of the leaves it is handed, in the order
/// of `params`.
pub fn gradcheck<T, F>(f: F, params: &[Tensor<T>], epsilon: f64) -> Result<GradcheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = T::of(orig.as_f64() + epsilon);
            let plus = evaluate(&f, &work).map_err(|err| Error::NotEvaluable(err.to_string()))?;
            work[pi].data_mut()[e] = T::of(orig.as_f64() - epsilon);
            let minus = evaluate(&f, &work).map_err(|err| Error::NotEvaluable(err.to_string()))?;
            work[pi].data_mut()[e] = orig;

            let fd = (plus - minus) / (2.0 * epsilon);
            let a = analytic.data()[e].as_f64();
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12);
            if rel > report.max_rel_error {
                report = GradcheckReport {
                    max_rel_error: rel,
                    worst: (pi, e),
                    analytic: a,
                    numeric: fd,
                };
            }
        }
    }
    Ok(report)
}
