//! Gram-matrix spectrum of one instance's stacked modality embeddings and the rank-1 proxy.
//!
//! For `z ∈ ℝ^{k×d}` (one unit row per modality) the spectrum is computed from the
//! `k×k` Gram matrix `G = zzᵀ`. Right singular directions are recovered through
//! duality, `σⱼvⱼ = zᵀuⱼ`, so no SVD of `z` itself is ever formed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::{dot, norm, Real};

pub const DEFAULT_GAP_TOL: f64 = 1e-6;
/// Largest negative eigenvalue tolerated as round-off before clipping to zero.
pub const PSD_TOL: f64 = 1e-10;
const UNIT_TOL: f64 = 1e-9;
const SIGN_TIE_TOL: f64 = 1e-12;
const JITTER_MAGNITUDE: f64 = 1e-7;
const JITTER_ATTEMPTS: u32 = 4;

/// Stacked, unit-norm modality embeddings of a single instance.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix(Mat<f64>);

impl EmbeddingMatrix {
    pub fn new(z: Mat<f64>) -> Result<Self> {
        let (k, d) = z.shape();
        if k < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 modalities, got {k}")));
        }
        if d < k {
            return Err(Error::Dimension(format!("embedding dim {d} is smaller than modality count {k}")));
        }
        for i in 0..k {
            let n = norm(z.row(i));
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::NotUnitNorm { row: i, norm: n });
            }
        }
        Ok(Self(z))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Mat::from_rows(rows)?)
    }

    /// Normalizes each row before validating.
    pub fn normalized(rows: &[Vec<f64>]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let n = norm(r);
                r.iter().map(|x| x / n).collect()
            })
            .collect();
        Self::from_rows(&rows)
    }

    pub fn k(&self) -> usize {
        self.0.rows()
    }

    pub fn d(&self) -> usize {
        self.0.cols()
    }

    pub fn as_mat(&self) -> &Mat<f64> {
        &self.0
    }

    pub fn into_mat(self) -> Mat<f64> {
        self.0
    }
}

/// Eigenpairs of `G = zzᵀ` plus the duality-derived right directions.
#[derive(Clone, Debug)]
pub struct GramSpectrum<T = f64> {
    /// `λ₁ ≥ … ≥ λ_k ≥ 0`, clipped at zero.
    pub eigenvalues: Vec<T>,
    /// Orthonormal `u₁…u_k`, each with a non-negative entry sum.
    pub left_vectors: Vec<Vec<T>>,
    /// `wⱼ = zᵀuⱼ = σⱼvⱼ`.
    pub scaled_right: Vec<Vec<T>>,
    /// `σⱼ = √λⱼ`.
    pub sigmas: Vec<T>,
    /// Unit-norm principal right singular vector `v₁`.
    pub proxy: Vec<T>,
    pub degenerate: bool,
    /// `λ₁ − λ₂`
    pub leading_gap: f64,
}

impl<T: Real> GramSpectrum<T> {
    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn d(&self) -> usize {
        self.proxy.len()
    }

    pub fn sigma1(&self) -> T {
        self.sigmas[0]
    }

    /// Unit right singular vector `vⱼ`, if `σⱼ > 0`.
    pub fn right_vector(&self, mode: usize) -> Option<Vec<T>> {
        let s = self.sigmas[mode];
        if s.re() <= 1e-12 {
            return None;
        }
        Some(self.scaled_right[mode].iter().map(|&w| w / s).collect())
    }

    /// `uⱼvⱼᵀ`, the gradient of `σⱼ` at distinct singular values.
    pub fn mode_matrix(&self, mode: usize) -> Option<Mat<T>> {
        let v = self.right_vector(mode)?;
        let mut m = Mat::zeros(self.k(), self.d());
        m.add_outer(T::one(), &self.left_vectors[mode], &v);
        Some(m)
    }

    /// Gap of mode `mode` to its nearest neighbouring eigenvalue.
    pub fn mode_gap(&self, mode: usize) -> f64 {
        let lam = |i: usize| self.eigenvalues[i].re();
        let mut gap = f64::INFINITY;
        if mode > 0 {
            gap = gap.min(lam(mode - 1) - lam(mode));
        }
        if mode + 1 < self.k() {
            gap = gap.min(lam(mode) - lam(mode + 1));
        }
        gap
    }
}

/// `G_ij = ⟨z_i, z_j⟩`
pub fn gram(z: &EmbeddingMatrix) -> Mat<f64> {
    z.as_mat().gram()
}

pub fn spectrum(z: &EmbeddingMatrix, gap_tol: f64) -> Result<GramSpectrum<f64>> {
    decompose(z.as_mat(), gap_tol)
}

/// Full spectrum of `zzᵀ` for any stacked representation, unit rows or not.
pub fn decompose<T: Real>(z: &Mat<T>, gap_tol: f64) -> Result<GramSpectrum<T>> {
    if !(gap_tol > 0.0) {
        return Err(Error::InvalidArgument(format!("gap_tol must be positive, got {gap_tol}")));
    }
    let (k, d) = z.shape();
    if k == 0 || d == 0 {
        return Err(Error::Dimension(format!("empty representation {k}x{d}")));
    }
    let g = z.gram();
    let eig = T::sym_eig(&g)?;
    let mut eigenvalues = Vec::with_capacity(k);
    for &lam in &eig.values {
        if lam.re() < -PSD_TOL {
            return Err(Error::NotPsd(lam.re()));
        }
        eigenvalues.push(if lam.re() <= 0.0 { T::zero() } else { lam });
    }
    let left_vectors: Vec<Vec<T>> = eig.vectors.into_iter().map(apply_sign_convention).collect();
    let sigmas: Vec<T> = eigenvalues
        .iter()
        .map(|&l| if l.re() > 0.0 { l.sqrt() } else { T::zero() })
        .collect();
    if sigmas[0].re() < 1e-12 {
        return Err(Error::ZeroRepresentation);
    }
    let scaled_right: Vec<Vec<T>> = left_vectors.iter().map(|u| z.tr_matvec(u)).collect();
    let w1n = norm(&scaled_right[0]);
    let proxy = scaled_right[0].iter().map(|&w| w / w1n).collect();
    let leading_gap = if k > 1 {
        eigenvalues[0].re() - eigenvalues[1].re()
    } else {
        f64::INFINITY
    };
    Ok(GramSpectrum {
        eigenvalues,
        left_vectors,
        scaled_right,
        sigmas,
        proxy,
        degenerate: leading_gap < gap_tol,
        leading_gap,
    })
}

/// Like [`decompose`], but resolves a degenerate leading gap by adding seeded jitter of
/// growing magnitude (starting at 1e-7) to `z`. Returns the spectrum together with the
/// representation it was computed from; gradients taken against the jittered matrix
/// are gradients with respect to `z`, since the jitter is a constant offset.
pub fn decompose_resolving<T: Real>(
    z: &Mat<T>,
    gap_tol: f64,
    seed: u64,
) -> Result<(GramSpectrum<T>, Option<Mat<T>>)> {
    let spec = decompose(z, gap_tol)?;
    if !spec.degenerate {
        return Ok((spec, None));
    }
    let mut last_gap = spec.leading_gap;
    for attempt in 0..JITTER_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(attempt) + 1);
        let mag = JITTER_MAGNITUDE * 10f64.powi(attempt as i32);
        let mut zj = z.clone();
        for x in zj.as_mut_slice() {
            *x += T::from_f64(mag * (2.0 * rng.random::<f64>() - 1.0));
        }
        let s = decompose(&zj, gap_tol)?;
        if !s.degenerate {
            return Ok((s, Some(zj)));
        }
        last_gap = s.leading_gap;
    }
    Err(Error::DegenerateSpectrum {
        mode: 0,
        gap: last_gap,
    })
}

fn apply_sign_convention<T: Real>(u: Vec<T>) -> Vec<T> {
    let s: f64 = u.iter().map(|x| x.re()).sum();
    let flip = if s.abs() > SIGN_TIE_TOL {
        s < 0.0
    } else {
        u.iter()
            .map(|x| x.re())
            .find(|x| x.abs() > SIGN_TIE_TOL)
            .is_some_and(|x| x < 0.0)
    };
    if flip {
        u.into_iter().map(|x| -x).collect()
    } else {
        u
    }
}

#[derive(Clone, Debug)]
pub struct Rank1Approx {
    pub matrix: Mat<f64>,
    pub frobenius_error: f64,
}

/// Best rank-1 Frobenius approximation `σ₁²u₁u₁ᵀ` of `G`.
pub fn rank1_approx(s: &GramSpectrum<f64>, g: &Mat<f64>) -> Result<Rank1Approx> {
    let k = s.k();
    if g.shape() != (k, k) {
        return Err(Error::Dimension(format!(
            "spectrum has k={k} but G is {}x{}",
            g.rows(),
            g.cols()
        )));
    }
    let mut matrix = Mat::zeros(k, k);
    matrix.add_outer(s.eigenvalues[0], &s.left_vectors[0], &s.left_vectors[0]);
    let mut resid = g.clone();
    resid.add_scaled(-1.0, &matrix);
    Ok(Rank1Approx {
        matrix,
        frobenius_error: resid.frobenius(),
    })
}

/// `⟨v₁⁽ⁱ⁾, v₁⁽ʲ⁾⟩`
pub fn proxy_similarity(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b)
}

/// `∇_z σ_mode = u v ᵀ` for the given (0-based) mode.
pub fn sigma_gradient(z: &EmbeddingMatrix, mode: usize, gap_tol: f64) -> Result<Mat<f64>> {
    let s = spectrum(z, gap_tol)?;
    if mode >= s.k() {
        return Err(Error::InvalidArgument(format!("mode {mode} out of range for k={}", s.k())));
    }
    let gap = s.mode_gap(mode);
    if gap < gap_tol {
        return Err(Error::DegenerateSpectrum { mode, gap });
    }
    s.mode_matrix(mode).ok_or(Error::DegenerateSpectrum { mode, gap: 0.0 })
}

/// Gradient w.r.t. `z` of `hᵀwₗ`, where `wₗ = zᵀuₗ`:
/// `uₗhᵀ + Σ_{j≠l} (hᵀwⱼ)/(λₗ−λⱼ) (uⱼwₗᵀ + uₗwⱼᵀ)`.
pub fn scaled_right_backward<T: Real>(s: &GramSpectrum<T>, mode: usize, h: &[T]) -> Mat<T> {
    let (k, d) = (s.k(), s.d());
    let mut g = Mat::zeros(k, d);
    g.add_outer(T::one(), &s.left_vectors[mode], h);
    let lam_l = s.eigenvalues[mode];
    for j in 0..k {
        if j == mode || s.eigenvalues[j].re() <= 0.0 {
            continue;
        }
        let gap = lam_l - s.eigenvalues[j];
        if gap.re().abs() < 1e-14 {
            continue;
        }
        let c = dot(h, &s.scaled_right[j]) / gap;
        g.add_outer(c, &s.left_vectors[j], &s.scaled_right[mode]);
        g.add_outer(c, &s.left_vectors[mode], &s.scaled_right[j]);
    }
    g
}

/// Proxy built from the top `rank` scaled right directions, `q = [w₁;…;w_r]/‖·‖`.
/// Rank 1 gives exactly `v₁`; for rank 2 it reduces to `[v₁; 0]` when `σ₂ = 0`.
pub fn rank_proxy<T: Real>(s: &GramSpectrum<T>, rank: usize) -> Vec<T> {
    if rank == 1 {
        return s.proxy.clone();
    }
    let mut c: Vec<T> = Vec::with_capacity(rank * s.d());
    for l in 0..rank.min(s.k()) {
        c.extend_from_slice(&s.scaled_right[l]);
    }
    let n = norm(&c);
    c.iter().map(|&x| x / n).collect()
}

/// Gradient w.r.t. `z` of `gᵀq` for the proxy returned by [`rank_proxy`].
pub fn rank_proxy_backward<T: Real>(s: &GramSpectrum<T>, rank: usize, grad: &[T]) -> Mat<T> {
    let d = s.d();
    let r = rank.min(s.k());
    let mut c: Vec<T> = Vec::with_capacity(r * d);
    for l in 0..r {
        c.extend_from_slice(&s.scaled_right[l]);
    }
    let n = norm(&c);
    let q: Vec<T> = c.iter().map(|&x| x / n).collect();
    let gq = dot(grad, &q);
    let h: Vec<T> = grad.iter().zip(&q).map(|(&g, &qi)| (g - gq * qi) / n).collect();
    let mut out = Mat::zeros(s.k(), d);
    for l in 0..r {
        let part = scaled_right_backward(s, l, &h[l * d..(l + 1) * d]);
        out.add_scaled(T::one(), &part);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn gram_examples() {
        let z = EmbeddingMatrix::from_rows(&[e(0, 4), e(0, 4), e(0, 4)]).unwrap();
        assert_eq!(gram(&z), Mat::from_fn(3, 3, |_, _| 1.0));
        let z = EmbeddingMatrix::from_rows(&[e(0, 4), e(1, 4), e(2, 4)]).unwrap();
        assert_eq!(gram(&z), Mat::identity(3));
        let z = EmbeddingMatrix::from_rows(&[e(0, 4), e(0, 4), e(1, 4)]).unwrap();
        let expect = Mat::from_rows(&[vec![1.0, 1.0, 0.0], vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(gram(&z), expect);
    }

    #[test]
    fn embedding_validation() {
        assert!(matches!(
            EmbeddingMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.5, 0.0, 0.0]]),
            Err(Error::NotUnitNorm { row: 1, .. })
        ));
        assert!(EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0]]).is_err());
        assert!(EmbeddingMatrix::from_rows(&[e(0, 2), e(1, 2), e(0, 2)]).is_err());
    }

    #[test]
    fn identical_rows_spectrum() {
        let z = EmbeddingMatrix::from_rows(&[e(0, 4), e(0, 4), e(0, 4)]).unwrap();
        let s = spectrum(&z, DEFAULT_GAP_TOL).unwrap();
        assert!((s.eigenvalues[0] - 3.0).abs() < 1e-12);
        assert!(s.eigenvalues[1].abs() < 1e-12 && s.eigenvalues[2].abs() < 1e-12);
        assert!((s.sigma1() - 3f64.sqrt()).abs() < 1e-12);
        for &u in &s.left_vectors[0] {
            assert!((u - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        }
        assert!((s.proxy[0] - 1.0).abs() < 1e-12);
        assert!(!s.degenerate);
    }

    #[test]
    fn isotropic_is_degenerate() {
        let z = EmbeddingMatrix::from_rows(&[e(0, 4), e(1, 4), e(2, 4)]).unwrap();
        let s = spectrum(&z, DEFAULT_GAP_TOL).unwrap();
        for l in &s.eigenvalues {
            assert!((l - 1.0).abs() < 1e-12);
        }
        assert!(s.degenerate);
        assert!(matches!(
            sigma_gradient(&z, 0, DEFAULT_GAP_TOL),
            Err(Error::DegenerateSpectrum { mode: 0, .. })
        ));
    }

    #[test]
    fn block_structure_spectrum() {
        let z = EmbeddingMatrix::from_rows(&[e(0, 4), e(0, 4), e(1, 4)]).unwrap();
        let s = spectrum(&z, DEFAULT_GAP_TOL).unwrap();
        let expect = [2.0, 1.0, 0.0];
        for (l, x) in s.eigenvalues.iter().zip(expect) {
            assert!((l - x).abs() < 1e-12);
        }
        let r = 0.5f64.sqrt();
        for (u, x) in s.left_vectors[0].iter().zip([r, r, 0.0]) {
            assert!((u - x).abs() < 1e-12);
        }
        assert!((s.proxy[0] - 1.0).abs() < 1e-12);
        let approx = rank1_approx(&s, &gram(&z)).unwrap();
        assert!((approx.frobenius_error - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank1_error_examples() {
        let z = EmbeddingMatrix::from_rows(&[e(0, 4), e(0, 4), e(0, 4)]).unwrap();
        let s = spectrum(&z, DEFAULT_GAP_TOL).unwrap();
        assert!(rank1_approx(&s, &gram(&z)).unwrap().frobenius_error < 1e-12);
        let z = EmbeddingMatrix::from_rows(&[e(0, 4), e(1, 4), e(2, 4)]).unwrap();
        let s = spectrum(&z, DEFAULT_GAP_TOL).unwrap();
        let err = rank1_approx(&s, &gram(&z)).unwrap().frobenius_error;
        assert!((err - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_representation_is_an_error() {
        let z = Mat::<f64>::zeros(3, 4);
        assert!(matches!(decompose(&z, DEFAULT_GAP_TOL), Err(Error::ZeroRepresentation)));
        assert!(decompose(&Mat::<f64>::identity(3), 0.0).is_err());
    }

    #[test]
    fn sigma_gradient_identical_rows() {
        let z = EmbeddingMatrix::from_rows(&[e(0, 4), e(0, 4), e(0, 4)]).unwrap();
        let g = sigma_gradient(&z, 0, DEFAULT_GAP_TOL).unwrap();
        for i in 0..3 {
            assert!((g[(i, 0)] - 1.0 / 3f64.sqrt()).abs() < 1e-12);
            for j in 1..4 {
                assert!(g[(i, j)].abs() < 1e-12);
            }
        }
        assert!((g.frobenius() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sign_convention_ties_use_first_nonzero() {
        let u = apply_sign_convention(vec![-0.5f64.sqrt(), 0.5f64.sqrt(), 0.0]);
        assert!(u[0] > 0.0);
        let u = apply_sign_convention(vec![0.0, -1.0, 0.2]);
        assert!(u[1] > 0.0);
    }

    #[test]
    fn jitter_resolves_isotropic_case() {
        let z = Mat::<f64>::from_rows(&[e(0, 4), e(1, 4), e(2, 4)]).unwrap();
        let (s, jittered) = decompose_resolving(&z, DEFAULT_GAP_TOL, 7).unwrap();
        assert!(!s.degenerate);
        let zj = jittered.unwrap();
        let mut diff = zj.clone();
        diff.add_scaled(-1.0, &z);
        assert!(diff.as_slice().iter().all(|x| x.abs() <= 1e-4));
        let (s2, _) = decompose_resolving(&z, DEFAULT_GAP_TOL, 7).unwrap();
        assert_eq!(s.eigenvalues, s2.eigenvalues);
    }

    #[test]
    fn rank2_proxy_reduces_to_rank1_without_second_mode() {
        let z = Mat::<f64>::from_rows(&[e(0, 4), e(0, 4), e(0, 4)]).unwrap();
        let s = decompose(&z, DEFAULT_GAP_TOL).unwrap();
        let q = rank_proxy(&s, 2);
        assert_eq!(q.len(), 8);
        assert!((q[0] - 1.0).abs() < 1e-12);
        assert!(q[4..].iter().all(|x| x.abs() < 1e-12));
    }
}
