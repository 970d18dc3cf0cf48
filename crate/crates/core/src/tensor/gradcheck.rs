//! Central finite-difference verification of reverse-mode gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

const STEP: f64 = 1e-6;

fn evaluate<F>(f: &F, leaves: &[Tensor]) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Contract(format!(
            "gradcheck needs a scalar-valued computation, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Max relative error between analytic and central-difference gradients over
/// every entry of every leaf.
///
/// The relative error of one entry is `|a - n| / max(1, |a|, |n|)`.
pub fn gradcheck<F>(f: F, leaves: &[Tensor]) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let entries: Vec<(usize, usize)> = leaves
        .iter()
        .enumerate()
        .flat_map(|(li, t)| (0..t.len()).map(move |e| (li, e)))
        .collect();
    gradcheck_entries(f, leaves, &entries)
}

/// Like [`gradcheck`] but only perturbs the listed `(leaf, flat index)` entries.
pub fn gradcheck_entries<F>(f: F, leaves: &[Tensor], entries: &[(usize, usize)]) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    Ok(run_with(&f, leaves, entries, None)?.max_error)
}

/// Outcome of [`gradcheck_smooth`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_error: f64,
    pub checked: usize,
    /// Entries whose `±step` interval straddles a kink (ReLU, max pool).
    pub skipped: usize,
}

/// Like [`gradcheck_entries`], but skips entries where the forward and
/// backward one-sided differences disagree by more than `kink_tol`
/// (relative), which only happens when a non-differentiable point lies
/// within one step. A wrong analytic gradient still fails, because both
/// one-sided differences agree with each other there.
pub fn gradcheck_smooth<F>(f: F, leaves: &[Tensor], entries: &[(usize, usize)], kink_tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    run_with(&f, leaves, entries, Some(kink_tol))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

fn run_with<F>(f: &F, leaves: &[Tensor], entries: &[(usize, usize)], kink_tol: Option<f64>) -> Result<GradcheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let (center, analytic) = {
        let g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(Error::Contract(format!(
                "gradcheck needs a scalar-valued computation, got shape {:?}",
                g.shape(out)
            )));
        }
        let center = g.value(out).data()[0];
        let grads = g.backward(out)?;
        let analytic = vars
            .iter()
            .zip(leaves)
            .map(|(v, t)| {
                grads
                    .get(*v)
                    .map(|gr| gr.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; t.len()])
            })
            .collect::<Vec<_>>();
        (center, analytic)
    };

    let mut work: Vec<Tensor> = leaves.to_vec();
    let mut report = GradcheckReport {
        max_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for &(li, e) in entries {
        if li >= leaves.len() || e >= leaves[li].len() {
            return Err(Error::Contract(format!("gradcheck entry ({}, {}) out of range", li, e)));
        }
        let orig = leaves[li].data()[e];
        work[li].data_mut()[e] = orig + STEP;
        let plus = evaluate(f, &work)?;
        work[li].data_mut()[e] = orig - STEP;
        let minus = evaluate(f, &work)?;
        work[li].data_mut()[e] = orig;
        if let Some(tol) = kink_tol {
            let forward = (plus - center) / STEP;
            let backward = (center - minus) / STEP;
            if rel(forward, backward) > tol {
                report.skipped += 1;
                continue;
            }
        }
        let numeric = (plus - minus) / (2.0 * STEP);
        report.max_error = report.max_error.max(rel(analytic[li][e], numeric));
        report.checked += 1;
    }
    Ok(report)
}
