//! Central finite differences, used as an independent oracle for `backward`.

use crate::{Result, Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_gradient<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Tensor<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&Tensor::from_parts(x.shape().to_vec(), probe.clone()));
        probe[i] = orig - h;
        let down = f(&Tensor::from_parts(x.shape().to_vec(), probe.clone()));
        probe[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::from_parts(x.shape().to_vec(), grad)
}

/// `||a - b|| / max(||a||, ||b||)` in the Euclidean norm; 0 when both vanish.
pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error on different shapes");
    let norm = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a.data()).max(norm(b.data()));
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error per input, in input order.
    pub rel_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares tape gradients of `build` against central differences for each
/// input. `build` must return a single-element loss.
pub fn check_gradients<F>(build: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |which: usize, probe: &Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| tape.constant(if i == which { probe.clone() } else { t.clone() }))
            .collect();
        let loss = build(&tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut rel_errors = Vec::with_capacity(inputs.len());
    for (i, x) in inputs.iter().enumerate() {
        let mut failure = None;
        let numeric = finite_diff_gradient(
            |p| match eval(i, p) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            },
            x,
            h,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        let analytic = grads.get_or_zeros(vars[i], x.shape());
        rel_errors.push(relative_error(&analytic, &numeric));
    }
    Ok(GradCheckReport { rel_errors })
}
