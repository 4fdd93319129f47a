//! Central finite-difference gradient checking.

use super::{AutodiffError, Graph, Tensor, Var};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Worst coordinate found by [`check_gradient`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input number, flat index) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

fn probe_weight(i: usize) -> f64 {
    // Fixed, non-uniform weights so that non-scalar outputs get a generic
    // scalar projection.
    0.5 + ((i as f64 + 1.0) * 0.618_033_988_749_895).fract()
}

fn scalar_value<F>(inputs: &[Tensor], f: &F) -> Result<(Graph, Vec<Var>, Var), AutodiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let root = if g.value(out).numel() == 1 {
        out
    } else {
        let shape = g.shape(out).to_vec();
        let n: usize = shape.iter().product();
        let w = g.constant(Tensor::from_parts(shape, (0..n).map(probe_weight).collect()));
        let p = g.mul(out, w)?;
        g.sum(p)
    };
    Ok((g, vars, root))
}

/// Scale floor used by [`check_gradient`].
pub const DEFAULT_FLOOR: f64 = 1e-6;

/// Central-difference steps and scale floor for [`check_gradient_with`].
///
/// With several steps, each coordinate keeps the difference quotient closest
/// to the analytic value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub steps: &'static [f64],
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { steps: &[FD_STEP], floor: DEFAULT_FLOOR }
    }
}

/// Compares the reverse-mode gradient of `f` against central differences
/// with step [`FD_STEP`] at every coordinate of every input.
///
/// Non-scalar outputs are reduced with fixed weights first. The relative
/// error of a coordinate is `|a − n| / max(|a|, |n|, τ)` with
/// `τ = max(DEFAULT_FLOOR · max|n|, 1e-12)` over all numeric entries, so
/// coordinates far below the gradient's scale are judged absolutely.
pub fn check_gradient<F>(inputs: &[Tensor], f: F) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    check_gradient_with(inputs, f, GradCheckOptions::default())
}

/// [`check_gradient`] with custom steps and `τ = max(floor · max|n|, 1e-12)`.
pub fn check_gradient_with<F>(inputs: &[Tensor], f: F, opts: GradCheckOptions) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    let (g, vars, root) = scalar_value(inputs, &f)?;
    let grads = g.backward(root)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut owners = Vec::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let ga = grads.get(*v).expect("leaf gradient");
        for j in 0..inputs[ti].numel() {
            let x0 = inputs[ti].data()[j];
            let a = ga.data()[j];
            let mut at = |dx: f64| -> Result<f64, AutodiffError> {
                work[ti].data_mut()[j] = x0 + dx;
                let v = g_value(&work, &f);
                work[ti].data_mut()[j] = x0;
                v
            };
            let mut best = f64::NAN;
            for &h in opts.steps {
                let n = (at(h)? - at(-h)?) / (2.0 * h);
                if best.is_nan() || (n - a).abs() < (best - a).abs() {
                    best = n;
                }
            }
            analytic.push(a);
            numeric.push(best);
            owners.push((ti, j));
        }
    }
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tau = (opts.floor * scale).max(1e-12);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0 };
    for i in 0..analytic.len() {
        let (a, n) = (analytic[i], numeric[i]);
        let err = (a - n).abs() / a.abs().max(n.abs()).max(tau);
        if err > report.max_rel_error || i == 0 {
            report = GradCheckReport { max_rel_error: err, worst: owners[i], analytic: a, numeric: n };
        }
    }
    Ok(report)
}

fn g_value<F>(inputs: &[Tensor], f: &F) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    let (g, _, root) = scalar_value(inputs, f)?;
    Ok(g.value(root).item())
}
