//! Central finite-difference checks for the tape.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates of each input (sampled with
    /// `seed`); `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Slack on the raw `eps |f| / h` roundoff estimate, covering error
/// accumulated inside `f` itself.
const NOISE_FACTOR: f64 = 10.0;

/// Numeric partial derivatives for one input.
#[derive(Debug, Clone, Default)]
pub struct NumericGradient {
    pub coords: Vec<usize>,
    pub values: Vec<f64>,
    /// Per checked coordinate, the size of difference that f64 roundoff in
    /// `f(x+h)` and `f(x-h)` alone can put into the quotient.
    pub noise_floors: Vec<f64>,
    /// Coordinates whose perturbation moved a ReLU or max-pool across a
    /// kink; their central difference is not a derivative and is not
    /// compared.
    pub skipped: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct InputReport {
    pub input: usize,
    /// Largest relative error among coordinates resolvable above roundoff.
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Coordinates whose gradient is too small to resolve; these pass when
    /// analytic and numeric values agree to within the noise floor.
    pub at_noise_floor: usize,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.inputs.iter().map(|r| r.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.inputs.iter().map(|r| r.skipped).sum()
    }

    pub fn at_noise_floor(&self) -> usize {
        self.inputs.iter().map(|r| r.at_noise_floor).sum()
    }
}

fn scalar_output(g: &Graph<'_>, out: Var) -> std::result::Result<f64, TensorError> {
    let v = g.value(out);
    if v.len() != 1 {
        return Err(TensorError::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Value of `f` and its reverse-mode gradient with respect to every input.
pub fn analytic_gradients<F, E>(f: &F, inputs: &[Tensor]) -> std::result::Result<(f64, Vec<Tensor>), E>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t, true)).collect();
    let out = f(&mut g, &vars)?;
    let value = scalar_output(&g, out)?;
    let mut grads = g.backward(out)?;
    let tensors = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, tensors))
}

fn evaluate<F, E>(f: &F, inputs: &[Tensor], which: usize, replaced: &Tensor) -> std::result::Result<(f64, u64), E>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| if i == which { g.leaf(replaced, false) } else { g.leaf(t, false) })
        .collect();
    let out = f(&mut g, &vars)?;
    Ok((scalar_output(&g, out)?, g.branch_signature()))
}

/// Central differences `(f(x+h) - f(x-h)) / 2h` per coordinate.
pub fn numeric_gradients<F, E>(
    f: &F,
    inputs: &[Tensor],
    opts: &CheckOptions,
) -> std::result::Result<Vec<NumericGradient>, E>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let base_signature = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t, false)).collect();
        let out = f(&mut g, &vars)?;
        scalar_output(&g, out)?;
        g.branch_signature()
    };
    let mut result = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(i as u64));
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut grad = NumericGradient::default();
        let mut work = input.clone();
        for c in coords {
            let orig = work.data()[c];
            work.data_mut()[c] = orig + opts.step;
            let (plus, sig_plus) = evaluate(f, inputs, i, &work)?;
            work.data_mut()[c] = orig - opts.step;
            let (minus, sig_minus) = evaluate(f, inputs, i, &work)?;
            work.data_mut()[c] = orig;
            if sig_plus != base_signature || sig_minus != base_signature {
                grad.skipped.push(c);
                continue;
            }
            grad.coords.push(c);
            grad.values.push((plus - minus) / (2.0 * opts.step));
            grad.noise_floors
                .push(NOISE_FACTOR * f64::EPSILON * (plus.abs() + minus.abs()) / (2.0 * opts.step));
        }
        result.push(grad);
    }
    Ok(result)
}

/// Relative error `|a - n| / (|a| + |n| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

pub fn compare_gradients(analytic: &[Tensor], numeric: &[NumericGradient], tolerance: f64) -> GradCheckReport {
    let inputs: Vec<InputReport> = analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .map(|(i, (a, n))| {
            let mut max_rel_error: f64 = 0.0;
            let mut at_noise_floor = 0;
            let mut passed = true;
            for ((&c, &v), &floor) in n.coords.iter().zip(&n.values).zip(&n.noise_floors) {
                let rel = relative_error(a.data()[c], v);
                if rel <= tolerance {
                    max_rel_error = max_rel_error.max(rel);
                } else if (a.data()[c] - v).abs() <= floor {
                    at_noise_floor += 1;
                } else {
                    max_rel_error = max_rel_error.max(rel);
                    passed = false;
                }
            }
            InputReport {
                input: i,
                max_rel_error,
                checked: n.coords.len(),
                skipped: n.skipped.len(),
                at_noise_floor,
                passed,
            }
        })
        .collect();
    let passed = inputs.iter().all(|r| r.passed);
    GradCheckReport { inputs, passed }
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central finite differences.
pub fn finite_difference_check<F, E>(
    f: F,
    inputs: &[Tensor],
    opts: &CheckOptions,
) -> std::result::Result<GradCheckReport, E>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let (_, analytic) = analytic_gradients(&f, inputs)?;
    let numeric = numeric_gradients(&f, inputs, opts)?;
    Ok(compare_gradients(&analytic, &numeric, opts.tolerance))
}
