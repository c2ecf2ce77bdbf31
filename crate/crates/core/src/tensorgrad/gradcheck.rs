//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central difference step.
    pub h: f64,
    /// Tensors with more entries than this are probed along random unit
    /// directions instead of coordinate by coordinate.
    pub max_coordinates: usize,
    pub probes_per_tensor: usize,
    /// Lower bound on the relative-error denominator, so that gradients that
    /// are zero up to rounding compare in absolute terms.
    pub magnitude_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            max_coordinates: 64,
            probes_per_tensor: 3,
            magnitude_floor: 1e-6,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter (and coordinate or probe) with the largest error.
    pub worst: String,
    pub comparisons: usize,
}

fn eval<T: Scalar, F>(f: &F, params: &ParamStore<T>) -> Result<T>
where
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `backward()` against central differences of `f` for every
/// parameter, using the default options with step `h`.
pub fn finite_diff_check<T: Scalar, F>(f: F, params: &ParamStore<T>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    finite_diff_check_with(
        f,
        params,
        &GradCheckOptions {
            h,
            ..Default::default()
        },
    )
}

pub fn finite_diff_check_with<T: Scalar, F>(
    f: F,
    params: &ParamStore<T>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let base = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let analytic = tape.param_gradients(&grads, params);

    let again = eval(&f, params)?;
    if again.as_f64().to_bits() != base.as_f64().to_bits() {
        return Err(Error::Reproducibility(format!(
            "loss evaluated to {base} and then {again} with identical parameters"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        comparisons: 0,
    };
    let h = opts.h;
    let record = |report: &mut GradCheckReport, label: String, a: f64, n: f64| {
        let e = rel_error(a, n, opts.magnitude_floor);
        report.comparisons += 1;
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(e);
            report.worst = format!("{label}: analytic {a:e} vs numeric {n:e}");
        }
    };

    for (name, value) in params.iter() {
        let g = &analytic[name];
        let n = value.len();
        let directions: Vec<(String, Vec<f64>)> = if n <= opts.max_coordinates {
            (0..n)
                .map(|j| {
                    let mut v = vec![0.0; n];
                    v[j] = 1.0;
                    (format!("{name}[{j}]"), v)
                })
                .collect()
        } else {
            (0..opts.probes_per_tensor)
                .map(|p| {
                    let raw: Vec<f64> = (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
                    let norm = (n as f64).sqrt();
                    (format!("{name}~probe{p}"), raw.into_iter().map(|x| x / norm).collect())
                })
                .collect()
        };
        for (label, dir) in directions {
            let shifted = |sign: f64| -> Result<T> {
                let mut p = params.clone();
                let t = p.get_mut(name).expect("parameter present");
                for (x, &d) in t.data_mut().iter_mut().zip(&dir) {
                    *x += T::of(sign * h * d);
                }
                eval(&f, &p)
            };
            let numeric = (shifted(1.0)?.as_f64() - shifted(-1.0)?.as_f64()) / (2.0 * h);
            let a: f64 = g.data().iter().zip(&dir).map(|(x, d)| x.as_f64() * d).sum();
            record(&mut report, label, a, numeric);
        }
    }
    Ok(report)
}
