//! Central finite-difference verification of tape gradients.

use super::array::Array;
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Largest per-input relative error `‖a − n‖ / max(‖a‖, ‖n‖, 1e-6)`.
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `h`, for every input array.
pub fn check_gradients<F>(inputs: &[Array], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Array]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|a| t.leaf(a.clone())).collect();
        let root = f(&mut t, &vars)?;
        Ok(t.value(root).item())
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| t.leaf(a.clone())).collect();
    let root = f(&mut t, &vars)?;
    let grads = t.backward(root)?;

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Array::zeros(inputs[k].shape()));
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for i in 0..inputs[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let num = (up - down) / (2.0 * h);
            let an = analytic.data()[i];
            diff2 += (an - num) * (an - num);
            a2 += an * an;
            n2 += num * num;
        }
        let rel = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(GradCheck { max_rel_error: worst })
}
