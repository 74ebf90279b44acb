use super::{Tape, Tensor, TensorError, Var};

const DENOM_EPS: f64 = 1e-12;

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `‖g_analytic − g_fd‖ / (‖g_fd‖ + ε)` per parameter tensor.
    pub errors: Vec<f64>,
    pub max_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Checks the gradient of the scalar built by `f` with respect to every
/// tensor in `params`, using central differences with step `h`.
///
/// `f` receives a fresh tape and the parameters bound as leaves, and must
/// return a `1 x 1` variable.
pub fn grad_check<E, F>(
    mut f: F,
    params: &[Tensor<f64>],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
{
    let mut eval = |values: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Tensor<f64>>), E> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|p| tape.leaf(p.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out).item();
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(out)?;
        let g = vars
            .iter()
            .zip(values)
            .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((value, g))
    };

    let (_, analytic) = eval(params, true)?;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut errors = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut numeric = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let (plus, _) = eval(&work, false)?;
            work[p].data_mut()[i] = orig - h;
            let (minus, _) = eval(&work, false)?;
            work[p].data_mut()[i] = orig;
            numeric.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        let diff = analytic[p]
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        errors.push(diff / (numeric.norm() + DENOM_EPS));
    }
    let max_error = errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_error < tol,
        errors,
        max_error,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let w = Tensor::matrix(1, 3, vec![0.3, -1.2, 2.0]).unwrap();
        let x = Tensor::matrix(3, 1, vec![1.5, 0.25, -0.75]).unwrap();
        let report = grad_check::<TensorError, _>(
            |tape, v| tape.matmul(v[0], v[1]),
            &[w, x],
            1e-4,
            1e-9,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
