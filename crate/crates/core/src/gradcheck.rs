//! Central finite-difference checks of reverse-mode gradients in `f64`.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Backend, Eval, Tape};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

/// A scalar function of one input tensor and the parameters behind a backend.
pub trait Objective {
    fn eval<B: Backend<f64>>(&self, b: &mut B, x: &B::Var) -> Result<B::Var>;
}

fn scalar(t: &Tensor<f64>) -> Result<f64> {
    t.item().ok_or_else(|| Error::NonScalarRoot(t.shape().to_vec()))
}

fn value<O: Objective>(f: &O, store: &ParamStore<f64>, x: &Tensor<f64>) -> Result<f64> {
    let mut b = Eval::new(store);
    let xv = b.constant(x.clone());
    let out = f.eval(&mut b, &xv)?;
    scalar(&out)
}

/// `|a − n| / max(1, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Central differences of `f` at the chosen coordinates of `x`.
pub fn numeric_gradient(
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    coords: &[usize],
    eps: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Largest [`relative_error`] between an analytic gradient and central
/// differences of `f`, over the given coordinates.
pub fn compare(
    analytic: &Tensor<f64>,
    f: impl FnMut(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    coords: &[usize],
    eps: f64,
) -> Result<f64> {
    let numeric = numeric_gradient(f, x, coords, eps)?;
    Ok(coords
        .iter()
        .zip(&numeric)
        .map(|(&i, &n)| relative_error(analytic.data()[i], n))
        .fold(0.0, f64::max))
}

/// Like [`compare`], but each coordinate keeps the smaller error of the steps
/// `eps` and `eps / 10`. A kink (ReLU, a top-k swap, an L1 crossing) within
/// one step spoils only that step, while a wrong analytic gradient disagrees
/// at both.
pub fn compare_two_step(
    analytic: &Tensor<f64>,
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    coords: &[usize],
    eps: f64,
) -> Result<f64> {
    let coarse = numeric_gradient(&mut f, x, coords, eps)?;
    let fine = numeric_gradient(&mut f, x, coords, eps / 10.0)?;
    Ok(coords
        .iter()
        .zip(coarse.iter().zip(&fine))
        .map(|(&i, (&c, &n))| {
            let a = analytic.data()[i];
            relative_error(a, c).min(relative_error(a, n))
        })
        .fold(0.0, f64::max))
}

/// Max relative error of the gradient of a parameter-free objective with
/// respect to `x`, over every coordinate.
pub fn finite_diff_check<O: Objective>(f: &O, x: &Tensor<f64>, eps: f64) -> Result<f64> {
    let empty = ParamStore::new();
    let mut tape = Tape::standalone();
    let xv = tape.leaf(x.clone());
    let root = f.eval(&mut tape, &xv)?;
    let grads = tape.backward(root)?;
    let analytic = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    let coords: Vec<usize> = (0..x.len()).collect();
    compare(&analytic, |p| value(f, &empty, p), x, &coords, eps)
}

/// Worst error found for one tensor.
#[derive(Clone, Debug)]
pub struct UnitError {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Per-tensor results of [`check_params`].
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub units: Vec<UnitError>,
}

impl Report {
    pub fn max_rel_error(&self) -> f64 {
        self.units.iter().map(|u| u.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&UnitError> {
        self.units
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Which coordinates of each tensor to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// Up to this many coordinates per tensor, drawn from the seed.
    Sample {
        per_tensor: usize,
        seed: u64,
    },
}

fn pick(n: usize, coverage: Coverage, salt: u64) -> Vec<usize> {
    match coverage {
        Coverage::All => (0..n).collect(),
        Coverage::Sample { per_tensor, seed } if per_tensor < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(salt);
            let mut idx = sample(&mut rng, n, per_tensor).into_vec();
            idx.sort_unstable();
            idx
        }
        Coverage::Sample { .. } => (0..n).collect(),
    }
}

/// Checks the gradient of `f` with respect to `x` and every parameter in
/// `store`, using [`compare_two_step`]. Parameters that do not influence the output must get a zero (or
/// absent) analytic gradient, and are checked like the rest.
pub fn check_params<O: Objective>(
    f: &O,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    eps: f64,
    coverage: Coverage,
) -> Result<Report> {
    check_params_scaled(f, store, x, eps, coverage, 1.0)
}

/// [`check_params`] with every analytic gradient multiplied by `scale`
/// before comparison; any value other than 1 should be caught.
pub fn check_params_scaled<O: Objective>(
    f: &O,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    eps: f64,
    coverage: Coverage,
    scale: f64,
) -> Result<Report> {
    let (gx, gparams) = {
        let mut tape = Tape::new(store);
        let xv = tape.leaf(x.clone());
        let root = f.eval(&mut tape, &xv)?;
        let grads = tape.backward(root)?;
        let gx = grads.wrt(xv).cloned();
        (gx, grads.into_param_grads())
    };
    let mut report = Report::default();
    let gx = gx
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
        .map(|v| v * scale);
    let coords = pick(x.len(), coverage, 0);
    report.units.push(UnitError {
        name: "input".into(),
        checked: coords.len(),
        max_rel_error: compare_two_step(&gx, |p| value(f, store, p), x, &coords, eps)?,
    });
    let mut work = store.clone();
    for (id, name, t) in store.iter() {
        let analytic = gparams[id.index()]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            .map(|v| v * scale);
        let coords = pick(t.len(), coverage, id.index() as u64 + 1);
        let err = compare_two_step(
            &analytic,
            |p| {
                *work.get_mut(id) = p.clone();
                value(f, &work, x)
            },
            t,
            &coords,
            eps,
        )?;
        *work.get_mut(id) = t.clone();
        report.units.push(UnitError {
            name: name.into(),
            checked: coords.len(),
            max_rel_error: err,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear;
    impl Objective for Linear {
        fn eval<B: Backend<f64>>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
            let y = b.scale(x, 3.0);
            Ok(b.sum(&y))
        }
    }

    struct Softmax;
    impl Objective for Softmax {
        fn eval<B: Backend<f64>>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
            let y = b.softmax_rows(x)?;
            let w = b.constant(Tensor::from_fn([2, 3, 3], |i| libm::sin(i as f64 * 0.7)));
            let prod = b.matmul(&y, &w, true)?;
            Ok(b.sum(&prod))
        }
    }

    #[test]
    fn linear_is_exact() {
        let x = Tensor::from_fn([2, 3], |i| i as f64 - 2.5);
        assert!(finite_diff_check(&Linear, &x, STEP).unwrap() < 1e-9);
    }

    #[test]
    fn softmax_rows_gradient() {
        let x = Tensor::from_fn([2, 3, 3], |i| ((i * 7 % 5) as f64) * 0.4 - 0.8);
        assert!(finite_diff_check(&Softmax, &x, STEP).unwrap() < 1e-6);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let x = Tensor::from_fn([4], |i| i as f64);
        let wrong = Tensor::full([4], 2.0);
        let err = compare(
            &wrong,
            |p| Ok(3.0 * p.data().iter().sum::<f64>()),
            &x,
            &[0, 1, 2, 3],
            STEP,
        )
        .unwrap();
        assert!(err > 0.3);
    }

    #[test]
    fn sampling_is_seeded_and_bounded() {
        let c = Coverage::Sample {
            per_tensor: 5,
            seed: 9,
        };
        let a = pick(100, c, 3);
        assert_eq!(a, pick(100, c, 3));
        assert_eq!(a.len(), 5);
        assert_eq!(pick(4, c, 3), alloc::vec![0, 1, 2, 3]);
    }
}
