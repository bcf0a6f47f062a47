use super::{DiffError, ParamId, ParameterStore, Tape, Var};

/// Settings for [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub rel_tol: f64,
    /// Central-difference step.
    pub h: f64,
    /// Magnitude below which errors are measured absolutely rather than relatively.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-5,
            h: 1e-6,
            floor: 1e-7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub rel_tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_err))
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.rel_tol)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compare backward-pass gradients against central finite differences for
/// every element of every parameter in `store`.
///
/// `build_loss` must be a deterministic function of the store (re-create any
/// random stream inside the closure).
pub fn grad_check<F>(
    store: &mut ParameterStore,
    mut build_loss: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, DiffError>
where
    F: FnMut(&mut Tape, &ParameterStore) -> Result<Var, DiffError>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = build_loss(&mut tape, store)?;
    tape.backward(loss, store)?;
    let ids: Vec<ParamId> = store.ids().collect();
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| store.grad(id).data().to_vec()).collect();
    store.zero_grad();

    let mut eval = |store: &ParameterStore| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let loss = build_loss(&mut tape, store)?;
        Ok(tape.value(loss).item())
    };

    let mut params = Vec::with_capacity(ids.len());
    for (&id, analytic) in ids.iter().zip(&analytic) {
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + opts.h;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - opts.h;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if err > check.max_rel_err || i == 0 {
                check.max_rel_err = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport {
        rel_tol: opts.rel_tol,
        params,
    })
}
