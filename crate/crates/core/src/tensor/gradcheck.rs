//! Central finite-difference verification of tape gradients (64-bit only).

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Denominator floor: errors on gradients smaller than this are measured
    /// relative to the floor instead of the (tiny) gradient itself.
    pub floor: f64,
    /// Checks every `stride`-th element of each input (1 = all).
    pub stride: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: 1e-4,
            floor: 1e-6,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub elements_checked: usize,
    /// `(input index, flat element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Compares backward gradients of `f` with respect to every tensor in
/// `inputs` against `(f(x+h) - f(x-h)) / 2h`, element by element.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let base = evaluate(&f, inputs)?;
    let again = evaluate(&f, inputs)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(base, again));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        elements_checked: 0,
        worst: None,
        tolerance: cfg.tolerance,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient");
        for ei in (0..inputs[ti].numel()).step_by(cfg.stride.max(1)) {
            let orig = inputs[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + cfg.step;
            let plus = evaluate(&f, &work)?;
            work[ti].data_mut()[ei] = orig - cfg.step;
            let minus = evaluate(&f, &work)?;
            work[ti].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.data()[ei];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            report.elements_checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((ti, ei));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_is_nearly_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let report = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.elements_checked, 12);
    }

    #[test]
    fn default_step_is_documented_constant() {
        assert_eq!(GradCheckConfig::default().step, 1e-5);
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::<f64>::ones(&[2]);
        let r = grad_check(
            |g, v| {
                calls.set(calls.get() + 1.0);
                let s = g.sum(v[0]);
                Ok(g.scale(s, calls.get()))
            },
            &[x],
            &GradCheckConfig::default(),
        );
        assert!(matches!(r, Err(Error::NonDeterministic(..))));
    }
}
