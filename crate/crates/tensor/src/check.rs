//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward function on perturbed
//! copies of the inputs, so it is independent of every backward rule.

use crate::{Graph, Tensor, Var};

/// Outcome of comparing analytic against numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest per-coordinate relative error.
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// `(input, index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Relative error with a floor on the denominator so that coordinates
/// whose true gradient is ~0 are compared on an absolute scale.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Evaluates `f` on constants built from `inputs` and returns its value.
pub fn eval<F>(f: &F, inputs: &[Tensor]) -> f64
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    f(&g, &vars).value().item()
}

/// Compares the autograd gradient of scalar `f` against central
/// differences with step `h` on the coordinates chosen by `select`
/// (`(input, index)` pairs; every coordinate when `None`).
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64, floor: f64, select: Option<&[(usize, usize)]>) -> GradCheck
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &vars);
    let grads = g.backward(out);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let all: Vec<(usize, usize)>;
    let coords = match select {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut work = inputs.to_vec();
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let plus = eval(&f, &work);
        work[i].data_mut()[j] = orig - h;
        let minus = eval(&f, &work);
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i].data()[j];
        let e = rel_error(a, numeric, floor);
        report.checked += 1;
        if e > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(e);
            report.worst = Some((i, j, a, numeric));
        }
    }
    report
}
