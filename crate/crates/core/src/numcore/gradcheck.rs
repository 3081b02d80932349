use super::{NumError, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst scalar.
    pub worst: Option<(String, usize)>,
    pub scalars_checked: usize,
}

/// `|a - b| / max(1e-8, |a| + |b|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients with central differences for every scalar of every parameter.
///
/// `forward` must be deterministic; it is evaluated twice at the unperturbed point first.
pub fn finite_diff_check<F>(store: &mut ParamStore, eps: f64, forward: F) -> Result<GradCheckReport, NumError>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var, NumError>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    finite_diff_check_params(store, &ids, eps, forward)
}

pub fn finite_diff_check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    eps: f64,
    mut forward: F,
) -> Result<GradCheckReport, NumError>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var, NumError>,
{
    fn eval<F>(forward: &mut F, store: &ParamStore) -> Result<f64, NumError>
    where
        F: FnMut(&mut Tape, &ParamStore) -> Result<Var, NumError>,
    {
        let mut tape = Tape::new();
        let loss = forward(&mut tape, store)?;
        tape.scalar(loss)
    }

    let first = eval(&mut forward, store)?;
    let second = eval(&mut forward, store)?;
    if first.to_bits() != second.to_bits() {
        return Err(NumError::NonDeterministic { first, second });
    }

    let analytic = {
        let mut tape = Tape::new();
        let loss = forward(&mut tape, store)?;
        tape.backward(loss, store)?
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        scalars_checked: 0,
    };
    for &id in ids {
        for i in 0..store.get(id).len() {
            let original = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = original + eps;
            let plus = eval(&mut forward, store);
            store.get_mut(id).data_mut()[i] = original - eps;
            let minus = eval(&mut forward, store);
            store.get_mut(id).data_mut()[i] = original;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let err = relative_error(analytic.get(id).data()[i], numeric);
            report.scalars_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
