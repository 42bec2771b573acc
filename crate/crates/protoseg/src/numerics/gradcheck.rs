//! Central-difference gradient checking for graph ops.
//!
//! The harness reduces an op's output to a scalar sum, computes analytic
//! gradients with one backward pass, then perturbs input elements one at a
//! time (`f(x+h)` / `f(x−h)`) and compares. Checks always run in `f64`; the
//! relative-error denominator is floored so zero gradients compare cleanly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::graph::{Graph, Tx};
use crate::numerics::tensor::Tensor;
use crate::{Error, Result};

/// Knobs for a gradient check run.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckSettings {
    /// Central-difference step `h`.
    pub step: f64,
    /// Maximum acceptable relative error.
    pub tolerance: f64,
    /// Probe at most this many randomly chosen elements per input tensor.
    pub max_probes_per_input: usize,
    /// Seed for probe-site selection on large inputs.
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings { step: 1e-5, tolerance: 1e-4, max_probes_per_input: 200, seed: 0 }
    }
}

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op_name: String,
    /// Worst relative error over all probed elements of all inputs.
    pub max_rel_error: f64,
    /// Worst relative error per input tensor.
    pub per_input: Vec<f64>,
    /// Total number of probed elements.
    pub probes: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error with a floored denominator: `|a−n| / max(|a|, |n|, 1e-8)`.
fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Runs a central-difference check of `build` against its analytic gradients.
///
/// `build` receives leaf handles for `inputs` (in order) and returns the op
/// output, which the harness sums into the scalar check loss.
pub fn gradcheck<B>(
    op_name: &str,
    inputs: &[Tensor<f64>],
    settings: &GradCheckSettings,
    build: B,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<f64>, &[Tx]) -> Result<Tx>,
{
    let run = |probe: Option<(usize, usize, f64)>| -> Result<(Graph<f64>, Vec<Tx>, Tx)> {
        let mut g = Graph::new();
        let mut leaves = Vec::with_capacity(inputs.len());
        for (i, t) in inputs.iter().enumerate() {
            let mut t = t.clone();
            if let Some((pi, idx, delta)) = probe {
                if pi == i {
                    t.values_mut()[idx] += delta;
                }
            }
            leaves.push(g.leaf(t));
        }
        let out = build(&mut g, &leaves)?;
        let loss = g.sum_all(out)?;
        let l = g.value(loss).values()[0];
        if !l.is_finite() {
            return Err(Error::GradCheckProbe(format!(
                "{op_name}: non-finite loss {l} at probe {probe:?}"
            )));
        }
        Ok((g, leaves, loss))
    };

    // Analytic pass.
    let (mut g, leaves, loss) = run(None)?;
    g.backward(loss)?;
    let analytic: Vec<Option<Tensor<f64>>> =
        leaves.iter().map(|&l| g.grad(l).cloned()).collect();
    for (i, a) in analytic.iter().enumerate() {
        if let Some(a) = a {
            if !a.all_finite() {
                return Err(Error::GradCheckProbe(format!(
                    "{op_name}: non-finite analytic gradient for input {i}"
                )));
            }
        }
    }

    // Numeric probes.
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let h = settings.step;
    let mut per_input = vec![0.0f64; inputs.len()];
    let mut probes = 0usize;
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let sites: Vec<usize> = if n > settings.max_probes_per_input {
            rand::seq::index::sample(&mut rng, n, settings.max_probes_per_input).into_vec()
        } else {
            (0..n).collect()
        };
        for idx in sites {
            let lp = {
                let (g, _, loss) = run(Some((i, idx, h)))?;
                g.value(loss).values()[0]
            };
            let lm = {
                let (g, _, loss) = run(Some((i, idx, -h)))?;
                g.value(loss).values()[0]
            };
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[i].as_ref().map_or(0.0, |t| t.values()[idx]);
            let e = rel_error(a, numeric);
            if e > per_input[i] {
                per_input[i] = e;
            }
            probes += 1;
        }
    }

    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error,
        per_input,
        probes,
        tolerance: settings.tolerance,
        passed: max_rel_error <= settings.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Keep probes away from 0.0 so piecewise ops stay on one branch.
        Tensor::from_fn(shape, |_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
    }

    #[test]
    fn identity_has_zero_error_up_to_rounding() {
        let x = random_tensor(vec![3, 3, 2], 7);
        let report = gradcheck("identity", &[x], &GradCheckSettings::default(), |g, l| {
            g.affine(l[0], 1.0, 0.0)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "rel error {}", report.max_rel_error);
        assert!(report.passed);
    }

    /// An op whose forward doubles but whose backward claims a slope of 3.
    struct BadDouble;

    impl crate::numerics::Op<f64> for BadDouble {
        fn name(&self) -> &'static str {
            "bad_double"
        }
        fn backward(&self, ctx: crate::numerics::OpCtx<'_, f64>) -> Vec<Tensor<f64>> {
            let mut g = ctx.grad.clone();
            for v in g.values_mut() {
                *v *= 3.0;
            }
            vec![g]
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = random_tensor(vec![4], 11);
        let report = gradcheck("bad_double", &[x], &GradCheckSettings::default(), |g, l| {
            let mut out = g.value(l[0]).clone();
            for v in out.values_mut() {
                *v *= 2.0;
            }
            Ok(g.push(out, vec![l[0]], Box::new(BadDouble)))
        })
        .unwrap();
        // Analytic slope 3 vs numeric slope 2 → relative error 1/3.
        assert!(!report.passed);
        assert!((report.max_rel_error - 1.0 / 3.0).abs() < 1e-6, "{}", report.max_rel_error);
    }

    #[test]
    fn non_finite_probe_is_reported() {
        // 1/x around x=0 territory: force an Inf by probing across a pole.
        let x = Tensor::new(vec![1], vec![f64::INFINITY]).unwrap();
        let err = gradcheck("inf_input", &[x], &GradCheckSettings::default(), |g, l| {
            g.affine(l[0], 1.0, 0.0)
        })
        .unwrap_err();
        assert!(matches!(err, Error::GradCheckProbe(_)), "got {err:?}");
    }

    #[test]
    fn large_inputs_are_subsampled() {
        let x = random_tensor(vec![10, 10, 3], 5); // 300 > 200 cap
        let report = gradcheck("subsampled", &[x], &GradCheckSettings::default(), |g, l| {
            g.affine(l[0], -0.5, 0.2)
        })
        .unwrap();
        assert_eq!(report.probes, 200);
        assert!(report.passed);
    }
}
