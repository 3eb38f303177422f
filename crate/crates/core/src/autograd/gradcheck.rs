use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Comparison of analytic and central-difference gradients for one input.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// Largest `|a - n| / max(|a|, |n|, floor)` over checked components,
    /// where `floor = 1e-3 * max|n| + 1e-12` keeps vanishing components
    /// from dominating.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Check `f`'s gradient w.r.t. every element of every input tensor with a
/// central difference of step `h`.
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, f: F) -> Result<Vec<GradcheckReport>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&tape, &vars)?;
        out.value()
            .item()
            .ok_or_else(|| Error::NonScalarLoss(out.shape()))
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut reports = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0; input.numel()];
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            *slot = (fp - fm) / (2.0 * h);
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = 1e-3 * scale + 1e-12;
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (a, n) in analytic.data().iter().zip(&numeric) {
            let diff = (a - n).abs();
            max_abs = max_abs.max(diff);
            max_rel = max_rel.max(diff / a.abs().max(n.abs()).max(floor));
        }
        reports.push(GradcheckReport {
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            checked: numeric.len(),
        });
    }
    Ok(reports)
}
