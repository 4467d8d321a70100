//! Central finite-difference gradient checking.
//!
//! The checker only evaluates the function being tested; it never looks at
//! how the analytic gradient was produced, so it works as an independent
//! oracle for any op or composite loss.

use crate::{Tape, Tensor, Var};

/// Outcome of comparing analytic and numeric gradients for one input.
#[derive(Clone, Debug)]
pub struct InputReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`
    pub rel_err: f64,
    /// Largest gradient entry magnitude seen.
    pub scale: f64,
}

/// Checks `f` at `inputs` with step `eps`. When `probe` is given, only the
/// listed `(input, flat index)` entries are perturbed and compared.
pub fn check<F>(inputs: &[Tensor], eps: f64, probe: Option<&[(usize, usize)]>, f: F) -> Vec<InputReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars);
    let grads = out.backward();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    drop(grads);

    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::no_grad();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };

    let entries: Vec<(usize, usize)> = match probe {
        Some(p) => p.to_vec(),
        None => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
            .collect(),
    };

    let mut reports: Vec<InputReport> = inputs
        .iter()
        .map(|_| InputReport {
            analytic: Vec::new(),
            numeric: Vec::new(),
            rel_err: 0.0,
            scale: 0.0,
        })
        .collect();
    let mut work = inputs.to_vec();
    for (i, j) in entries {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + eps;
        let up = eval(&work);
        work[i].data_mut()[j] = orig - eps;
        let down = eval(&work);
        work[i].data_mut()[j] = orig;
        reports[i].analytic.push(analytic[i].data()[j]);
        reports[i].numeric.push((up - down) / (2.0 * eps));
    }
    for r in &mut reports {
        let diff: f64 = r
            .analytic
            .iter()
            .zip(&r.numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = r.analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = r.numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        r.rel_err = if denom == 0.0 { 0.0 } else { diff / denom };
        r.scale = r
            .analytic
            .iter()
            .chain(&r.numeric)
            .fold(0.0, |m, v| m.max(v.abs()));
    }
    reports
}

/// Largest relative error across all inputs.
pub fn max_rel_err(reports: &[InputReport]) -> f64 {
    reports.iter().map(|r| r.rel_err).fold(0.0, f64::max)
}
