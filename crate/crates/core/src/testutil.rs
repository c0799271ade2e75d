//! Shared helpers for unit tests: seeded random inputs and a central-difference checker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::Mat;
use crate::scalar::norm;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
    Mat::from_fn(rows, cols, |_, _| r.random::<f64>() * 2.0 - 1.0)
}

pub fn random_unit_rows(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
    let mut m = random_mat(r, rows, cols);
    for i in 0..rows {
        let n = norm(m.row(i));
        m.row_mut(i).iter_mut().for_each(|x| *x /= n);
    }
    m
}

/// Central differences of `f` at `x` (step 1e-6) against `grad`, compared by the
/// relative error of the whole block.
pub fn fd_check(x: &Mat<f64>, grad: &Mat<f64>, f: impl Fn(&Mat<f64>) -> f64, tol: f64) {
    let h = 1e-6;
    let mut fd = Mat::zeros(x.rows(), x.cols());
    for idx in 0..x.as_slice().len() {
        let mut xp = x.clone();
        xp.as_mut_slice()[idx] += h;
        let mut xm = x.clone();
        xm.as_mut_slice()[idx] -= h;
        fd.as_mut_slice()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    let mut diff = fd.clone();
    diff.add_scaled(-1.0, grad);
    let rel = diff.frobenius() / fd.frobenius().max(grad.frobenius()).max(1e-8);
    assert!(rel <= tol, "relative error {rel:e}\nanalytic {grad:?}\nfd {fd:?}");
}
