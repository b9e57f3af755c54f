use rand::seq::index::sample;

use super::{Tape, Tensor, TensorError, Var};
use crate::rng::seeded;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Tensors with more coordinates than this are checked on a random sample
    /// of this size. Must be at least 100.
    pub max_coords_per_tensor: usize,
    pub seed: u64,
    /// Use the fourth-order stencil `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`
    /// instead of the plain central difference. Allows a larger step, which
    /// keeps rounding noise small on functions of large magnitude.
    pub five_point: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            max_coords_per_tensor: 256,
            seed: 0,
            five_point: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation moved some ReLU input across zero.
    pub skipped_kinks: usize,
    /// `(tensor index, coordinate)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    /// Denominator floor used for the relative error.
    pub floor: f64,
    /// Checked coordinates where both gradients were below `floor`.
    pub floored: usize,
}

fn evaluate<F>(f: &mut F, params: &[Tensor]) -> Result<(f64, u64), TensorError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(TensorError::Contract("checked function must return a scalar".into()));
    }
    Ok((tape.value(loss).item(), tape.relu_signature()))
}

/// Compare taped gradients of `f` with central differences.
///
/// `f` receives a fresh tape with `params` registered as leaves (in order) and
/// must return a scalar. The relative error per coordinate is
/// `|a - n| / max(|a|, |n|, floor)` with `floor = max(1e-8, √ε·|f|)`: a
/// central difference cannot resolve a gradient much smaller than the
/// rounding error of `f` itself, so tiny gradients are compared against that
/// resolution instead of against themselves. Coordinates where a
/// perturbation changes the ReLU sign pattern are skipped and counted.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[Tensor],
    step: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    if !(step > 0.0) {
        return Err(TensorError::Contract(format!("step must be positive, got {step}")));
    }
    let max_coords = opts.max_coords_per_tensor.max(100);

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base_value = tape.value(loss).item();
    let base_sig = tape.relu_signature();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    drop(tape);

    let (again, _) = evaluate(&mut f, params)?;
    if again.to_bits() != base_value.to_bits() {
        return Err(TensorError::Contract(format!(
            "function is not deterministic: {base_value} then {again}"
        )));
    }

    let mut rng = seeded(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
        floor: 1e-8f64.max(f64::EPSILON.sqrt() * base_value.abs()),
        floored: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (ti, param) in params.iter().enumerate() {
        let n = param.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let original = param.data()[c];
            let offsets: &[(f64, f64)] = if opts.five_point {
                &[(2.0, -1.0 / 12.0), (1.0, 8.0 / 12.0), (-1.0, -8.0 / 12.0), (-2.0, 1.0 / 12.0)]
            } else {
                &[(1.0, 0.5), (-1.0, -0.5)]
            };
            let mut numeric = 0.0;
            let mut kink = false;
            for &(k, w) in offsets {
                work[ti].data_mut()[c] = original + k * step;
                let (value, sig) = evaluate(&mut f, &work)?;
                kink |= sig != base_sig;
                numeric += w * value;
            }
            work[ti].data_mut()[c] = original;
            if kink {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = numeric / step;
            let a = analytic[ti].data()[c];
            let scale = a.abs().max(numeric.abs());
            if scale < report.floor {
                report.floored += 1;
            }
            let rel = (a - numeric).abs() / scale.max(report.floor);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((ti, c));
            }
        }
    }
    Ok(report)
}
