//! Per-modality linear projection heads with ℓ2-normalized outputs, their exact
//! backward pass, and SGD updates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::objectives::{inner_loss, GroupFlags, InnerObjective, LossConfig};
use crate::scalar::{dot, norm, Dual, Real};

const NORM_FLOOR: f64 = 1e-12;

/// Bias-free heads `W_m ∈ ℝ^{d×d_in(m)}`, one per modality in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHeads<T = f64> {
    weights: Vec<Mat<T>>,
}

impl ProjectionHeads<f64> {
    /// Fan-in uniform initialization in `[−1/√d_in, 1/√d_in]`.
    pub fn init(d: usize, d_in: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = d_in
            .iter()
            .map(|&din| {
                let bound = 1.0 / (din as f64).sqrt();
                Mat::from_fn(d, din, |_, _| bound * (2.0 * rng.random::<f64>() - 1.0))
            })
            .collect();
        Self::new(weights)
    }

    /// Dual copy whose tangent is `direction` (same layout as [`flatten`](Self::flatten)).
    pub fn with_tangent(&self, direction: &[f64]) -> Result<ProjectionHeads<Dual>> {
        if direction.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "tangent has {} entries, heads have {}",
                direction.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        let weights = self
            .weights
            .iter()
            .map(|w| {
                let n = w.as_slice().len();
                let data = w
                    .as_slice()
                    .iter()
                    .zip(&direction[off..off + n])
                    .map(|(&re, &eps)| Dual::new(re, eps))
                    .collect();
                off += n;
                Mat::from_vec(w.rows(), w.cols(), data).expect("same shape")
            })
            .collect();
        Ok(ProjectionHeads { weights })
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(Mat::all_finite)
    }
}

impl<T: Real> ProjectionHeads<T> {
    pub fn new(weights: Vec<Mat<T>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("need at least one head".into()));
        }
        let d = weights[0].rows();
        if d == 0 || weights.iter().any(|w| w.rows() != d || w.cols() == 0) {
            return Err(Error::Dimension("heads must share a nonzero output dimension".into()));
        }
        Ok(Self { weights })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn d(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn d_in(&self) -> Vec<usize> {
        self.weights.iter().map(Mat::cols).collect()
    }

    pub fn weights(&self) -> &[Mat<T>] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<Mat<T>> {
        self.weights
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.as_slice().len()).sum()
    }

    /// All weights concatenated in modality order, each row-major.
    pub fn flatten(&self) -> Vec<T> {
        self.weights.iter().flat_map(|w| w.as_slice().iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten) using this instance's shapes.
    pub fn unflatten(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "flat vector has {} entries, heads have {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        let weights = self
            .weights
            .iter()
            .map(|w| {
                let n = w.as_slice().len();
                let m = Mat::from_vec(w.rows(), w.cols(), flat[off..off + n].to_vec()).expect("sized");
                off += n;
                m
            })
            .collect();
        Ok(Self { weights })
    }

    pub fn primal(&self) -> ProjectionHeads<f64> {
        ProjectionHeads {
            weights: self.weights.iter().map(|w| w.map(T::re)).collect(),
        }
    }

    fn check_inputs(&self, xs: &[Mat<T>]) -> Result<usize> {
        if xs.len() != self.k() {
            return Err(Error::Dimension(format!("{} input modalities for {} heads", xs.len(), self.k())));
        }
        let n = xs[0].rows();
        for (m, (x, w)) in xs.iter().zip(&self.weights).enumerate() {
            if x.cols() != w.cols() || x.rows() != n {
                return Err(Error::Dimension(format!(
                    "modality {m}: input is {}x{}, expected {n}x{}",
                    x.rows(),
                    x.cols(),
                    w.cols()
                )));
            }
        }
        Ok(n)
    }

    /// Embeds one instance: `z_m = W_m x_m / ‖W_m x_m‖`.
    pub fn forward(&self, raw: &[Vec<T>]) -> Result<Mat<T>> {
        let xs: Vec<Mat<T>> = raw
            .iter()
            .map(|x| Mat::from_vec(1, x.len(), x.clone()))
            .collect::<Result<_>>()?;
        Ok(self.forward_batch(&xs)?.z.remove(0))
    }

    /// Embeds a batch given per-modality `n×d_in(m)` inputs.
    pub fn forward_batch(&self, xs: &[Mat<T>]) -> Result<Encoded<T>> {
        let n = self.check_inputs(xs)?;
        let (k, d) = (self.k(), self.d());
        let mut z = vec![Mat::zeros(k, d); n];
        let mut norms = Mat::zeros(n, k);
        for (m, (x, w)) in xs.iter().zip(&self.weights).enumerate() {
            for (i, zi) in z.iter_mut().enumerate() {
                let y = w.matvec(x.row(i));
                let ny = norm(&y);
                if !(ny.re() >= NORM_FLOOR) {
                    return Err(Error::Normalization {
                        modality: m,
                        norm: ny.re(),
                    });
                }
                for (o, &yj) in zi.row_mut(m).iter_mut().zip(&y) {
                    *o = yj / ny;
                }
                norms[(i, m)] = ny;
            }
        }
        Ok(Encoded { z, norms })
    }

    /// Backpropagates `∂L/∂z` through the normalization `(I − zzᵀ)/‖Wx‖` and the linear
    /// map, returning gradients for every `W_m` and for every input row.
    pub fn backward_batch(&self, xs: &[Mat<T>], enc: &Encoded<T>, grad_z: &[Mat<T>]) -> Result<HeadGradients<T>> {
        let n = self.check_inputs(xs)?;
        if grad_z.len() != n || enc.z.len() != n {
            return Err(Error::Dimension(format!("{} upstream gradients for a batch of {n}", grad_z.len())));
        }
        let mut weights: Vec<Mat<T>> = self.weights.iter().map(|w| Mat::zeros(w.rows(), w.cols())).collect();
        let mut inputs: Vec<Mat<T>> = xs.iter().map(|x| Mat::zeros(x.rows(), x.cols())).collect();
        for m in 0..self.k() {
            for i in 0..n {
                let g = grad_z[i].row(m);
                let z = enc.z[i].row(m);
                let gz = dot(g, z);
                let inv = T::one() / enc.norms[(i, m)];
                let gy: Vec<T> = g.iter().zip(z).map(|(&gj, &zj)| (gj - gz * zj) * inv).collect();
                weights[m].add_outer(T::one(), &gy, xs[m].row(i));
                let gx = self.weights[m].tr_matvec(&gy);
                inputs[m].row_mut(i).copy_from_slice(&gx);
            }
        }
        Ok(HeadGradients { weights, inputs })
    }
}

/// Normalized embeddings of a batch plus the pre-normalization norms the backward pass needs.
#[derive(Clone, Debug)]
pub struct Encoded<T = f64> {
    /// One `k×d` matrix per instance.
    pub z: Vec<Mat<T>>,
    /// `n×k` norms `‖W_m x_m‖`.
    pub norms: Mat<T>,
}

#[derive(Clone, Debug)]
pub struct HeadGradients<T = f64> {
    pub weights: Vec<Mat<T>>,
    /// Per-modality gradients w.r.t. the batch inputs.
    pub inputs: Vec<Mat<T>>,
}

/// Inner objective evaluated through the heads on a batch.
#[derive(Clone, Debug)]
pub struct InnerGradients<T = f64> {
    pub value: T,
    pub weights: Vec<Mat<T>>,
    pub inputs: Vec<Mat<T>>,
    pub targets: Mat<T>,
    pub components: Vec<(String, f64)>,
    pub flags: GroupFlags,
}

/// Forward, inner objective and backward in one call.
pub fn loss_and_gradients<T: Real>(
    heads: &ProjectionHeads<T>,
    xs: &[Mat<T>],
    targets: &Mat<T>,
    cfg: &LossConfig,
    objective: &InnerObjective,
    jitter_seed: u64,
) -> Result<InnerGradients<T>> {
    let enc = heads.forward_batch(xs)?;
    let rep = inner_loss(&enc.z, targets, cfg, objective, jitter_seed)?;
    let g = heads.backward_batch(xs, &enc, &rep.grad_z)?;
    Ok(InnerGradients {
        value: rep.value,
        weights: g.weights,
        inputs: g.inputs,
        targets: rep.grad_targets,
        components: rep.components,
        flags: rep.flags,
    })
}

/// Per-branch squared distances `‖a_m − b_m‖²` and their total.
pub fn param_distance<T: Real>(a: &ProjectionHeads<T>, b: &ProjectionHeads<T>) -> Result<(Vec<T>, T)> {
    if a.k() != b.k() || a.weights.iter().zip(&b.weights).any(|(x, y)| x.shape() != y.shape()) {
        return Err(Error::Dimension("heads have different shapes".into()));
    }
    let per: Vec<T> = a
        .weights
        .iter()
        .zip(&b.weights)
        .map(|(x, y)| {
            x.as_slice()
                .iter()
                .zip(y.as_slice())
                .map(|(&p, &q)| (p - q) * (p - q))
                .sum()
        })
        .collect();
    let total = per.iter().copied().sum();
    Ok((per, total))
}

#[derive(Clone, Debug)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Option<Vec<f64>>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be finite and ≥ 0, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: None,
        })
    }

    /// `v ← μv + g`, `θ ← θ − ηv` on a flat parameter vector.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!("{} params but {} gradients", params.len(), grads.len())));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        let v = self.velocity.get_or_insert_with(|| vec![0.0; grads.len()]);
        if v.len() != grads.len() {
            return Err(Error::Dimension("gradient shape changed between steps".into()));
        }
        for ((p, vi), &g) in params.iter_mut().zip(v.iter_mut()).zip(grads) {
            *vi = self.momentum * *vi + g;
            *p -= self.learning_rate * *vi;
        }
        Ok(())
    }
}

/// One SGD step on the heads; returns the updated snapshot.
pub fn sgd_step(heads: &ProjectionHeads, grads: &[Mat<f64>], state: &mut SgdState) -> Result<ProjectionHeads> {
    if grads.len() != heads.k() || grads.iter().zip(&heads.weights).any(|(g, w)| g.shape() != w.shape()) {
        return Err(Error::Dimension("gradient shapes differ from heads".into()));
    }
    let mut flat = heads.flatten();
    let g: Vec<f64> = grads.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
    state.step(&mut flat, &g)?;
    heads.unflatten(&flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::SimilarityTargets;
    use crate::testutil::{fd_check, random_mat, rng};

    #[test]
    fn identity_and_scaled_heads_pass_unit_inputs_through() {
        let x = vec![0.6, 0.0, 0.8];
        let h = ProjectionHeads::new(vec![Mat::identity(3), Mat::identity(3)]).unwrap();
        let z = h.forward(&[x.clone(), x.clone()]).unwrap();
        assert_eq!(z.row(0), &x[..]);
        let h2 = ProjectionHeads::new(vec![Mat::<f64>::identity(3).map(|v| 2.0 * v), Mat::identity(3)]).unwrap();
        let z2 = h2.forward(&[x.clone(), x.clone()]).unwrap();
        for (a, b) in z2.row(0).iter().zip(&x) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_preimage_is_an_error() {
        let h = ProjectionHeads::new(vec![Mat::<f64>::zeros(2, 3), Mat::identity(2)]).unwrap();
        let err = h.forward(&[vec![1.0, 0.0, 0.0], vec![1.0, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::Normalization { modality: 0, .. }));
    }

    #[test]
    fn backward_projects_out_parallel_upstream() {
        let mut r = rng(10);
        let h = ProjectionHeads::init(4, &[5, 6], 1).unwrap();
        let xs = vec![random_mat(&mut r, 2, 5), random_mat(&mut r, 2, 6)];
        let enc = h.forward_batch(&xs).unwrap();
        let g = h.backward_batch(&xs, &enc, &enc.z.iter().map(|z| z.map(|v| 3.0 * v)).collect::<Vec<_>>()).unwrap();
        assert!(g.weights.iter().all(|w| w.frobenius() < 1e-14));
        let zero: Vec<Mat<f64>> = enc.z.iter().map(|z| Mat::zeros(z.rows(), z.cols())).collect();
        let g = h.backward_batch(&xs, &enc, &zero).unwrap();
        assert!(g.weights.iter().all(|w| w.frobenius() == 0.0));
    }

    #[test]
    fn loss_gradients_match_fd_for_weights_and_inputs() {
        let mut r = rng(11);
        let cfg = LossConfig::default();
        let h = ProjectionHeads::init(4, &[5, 6, 3], 2).unwrap();
        let xs = vec![random_mat(&mut r, 3, 5), random_mat(&mut r, 3, 6), random_mat(&mut r, 3, 3)];
        let t = SimilarityTargets::identity(3);
        let obj = InnerObjective::hopa();
        let g = loss_and_gradients(&h, &xs, t.entries(), &cfg, &obj, 0).unwrap();
        for m in 0..3 {
            let f = |w: &Mat<f64>| {
                let mut ws = h.weights().to_vec();
                ws[m] = w.clone();
                let hh = ProjectionHeads::new(ws).unwrap();
                loss_and_gradients(&hh, &xs, t.entries(), &cfg, &obj, 0).unwrap().value
            };
            fd_check(&h.weights()[m], &g.weights[m], f, 1e-5);
            let fx = |x: &Mat<f64>| {
                let mut xx = xs.clone();
                xx[m] = x.clone();
                loss_and_gradients(&h, &xx, t.entries(), &cfg, &obj, 0).unwrap().value
            };
            fd_check(&xs[m], &g.inputs[m], fx, 1e-5);
        }
    }

    #[test]
    fn sgd_examples() {
        let mut s = SgdState::new(0.01, 0.0).unwrap();
        let mut p = vec![1.0];
        s.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-15);
        s.step(&mut p, &[0.0]).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-15);

        let mut s = SgdState::new(0.1, 0.5).unwrap();
        let mut p = vec![0.0];
        s.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-15);
        s.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] + 0.25).abs() < 1e-15);
        assert!(s.step(&mut p, &[f64::NAN]).is_err());
        assert!(SgdState::new(0.1, 1.0).is_err());
    }

    #[test]
    fn param_distance_examples() {
        let a = ProjectionHeads::new(vec![Mat::from_vec(1, 1, vec![1.0]).unwrap()]).unwrap();
        let b = ProjectionHeads::new(vec![Mat::from_vec(1, 1, vec![3.0]).unwrap()]).unwrap();
        assert_eq!(param_distance(&a, &b).unwrap().1, 4.0);
        assert_eq!(param_distance(&a, &a).unwrap().1, 0.0);
        let c = ProjectionHeads::init(2, &[2], 0).unwrap();
        assert!(param_distance(&a, &c).is_err());
    }

    #[test]
    fn flatten_roundtrip_and_tangent_layout() {
        let h = ProjectionHeads::init(3, &[4, 2], 5).unwrap();
        let flat = h.flatten();
        assert_eq!(h.unflatten(&flat).unwrap(), h);
        let dir: Vec<f64> = (0..flat.len()).map(|i| i as f64).collect();
        let d = h.with_tangent(&dir).unwrap();
        let eps: Vec<f64> = d.flatten().iter().map(|x| x.eps).collect();
        assert_eq!(eps, dir);
        assert_eq!(d.primal(), h);
    }

    #[test]
    fn init_respects_fan_in_bound_and_seed() {
        let h = ProjectionHeads::init(8, &[16, 4], 3).unwrap();
        assert!(h.weights()[0].as_slice().iter().all(|w| w.abs() <= 0.25));
        assert!(h.weights()[1].as_slice().iter().all(|w| w.abs() <= 0.5));
        assert_eq!(h, ProjectionHeads::init(8, &[16, 4], 3).unwrap());
        assert_ne!(h, ProjectionHeads::init(8, &[16, 4], 4).unwrap());
    }
}
