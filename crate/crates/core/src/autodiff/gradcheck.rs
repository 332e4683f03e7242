//! Central-difference verification of reverse-mode adjoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Graph, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Relative disagreement between the `eps` and `eps / 2` estimates above
    /// which a point is reported as non-differentiable.
    pub stability_tol: f64,
    /// Multiplies the analytic adjoint before comparison. Anything other than
    /// 1.0 deliberately corrupts the check; used to test the checker itself.
    pub adjoint_scale: f64,
    /// Seed of the random projection applied to non-scalar outputs.
    pub projection_seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            stability_tol: 1e-6,
            adjoint_scale: 1.0,
            projection_seed: 0x6a09_e667,
        }
    }
}

impl GradCheckOptions {
    pub fn with_eps(eps: f64) -> Self {
        GradCheckOptions {
            eps,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub elements: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("non-differentiable point at input {input}, element {element}: estimates {coarse} (eps) vs {fine} (eps/2)")]
    NonDifferentiable {
        input: usize,
        element: usize,
        coarse: f64,
        fine: f64,
    },
    #[error(transparent)]
    Eval(#[from] Error),
}

fn projected<F>(f: &F, inputs: &[Tensor<f64>], proj: &mut Option<Tensor<f64>>, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let val = g.value(out);
    let p = proj.get_or_insert_with(|| projection(val, seed));
    Ok(val.data().iter().zip(p.data()).map(|(a, b)| a * b).sum())
}

fn projection(out: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    if out.len() == 1 {
        return Tensor::full(out.shape(), 1.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(out.shape(), data).expect("projection shape")
}

/// Compares reverse-mode adjoints of `f` with central differences at 64-bit
/// precision. Non-scalar outputs are reduced with a fixed random projection.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let proj = projection(g.value(out), opts.projection_seed);
    let grads = g.backward_with(out, proj.clone());
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();
    drop(g);

    let mut proj = Some(proj);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        elements: 0,
    };
    let eval = |work: &[Tensor<f64>], proj: &mut Option<Tensor<f64>>| projected(&f, work, proj, opts.projection_seed);
    for i in 0..inputs.len() {
        for e in 0..inputs[i].len() {
            let x0 = inputs[i].data()[e];
            let mut central = |h: f64, work: &mut Vec<Tensor<f64>>| -> Result<f64> {
                work[i].data_mut()[e] = x0 + h;
                let up = eval(work, &mut proj)?;
                work[i].data_mut()[e] = x0 - h;
                let down = eval(work, &mut proj)?;
                work[i].data_mut()[e] = x0;
                Ok((up - down) / (2.0 * h))
            };
            let coarse = central(opts.eps, &mut work)?;
            let fine = central(opts.eps / 2.0, &mut work)?;
            let scale = 1f64.max(coarse.abs()).max(fine.abs());
            if (coarse - fine).abs() / scale > opts.stability_tol {
                return Err(GradCheckError::NonDifferentiable {
                    input: i,
                    element: e,
                    coarse,
                    fine,
                });
            }
            let a = analytic[i].data()[e] * opts.adjoint_scale;
            let err = (a - coarse).abs() / 1f64.max(a.abs()).max(coarse.abs());
            if report.elements == 0 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, e);
            }
            report.elements += 1;
        }
    }
    Ok(report)
}
