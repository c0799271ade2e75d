//! Inner-loop objectives: the singular-value softmax loss, the proxy-weighted two-group
//! BCE, and the pairwise contrastive baselines, each with an analytic gradient.
//!
//! All routines are generic over [`Real`] so the same code yields Hessian-vector
//! products when instantiated with dual numbers.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::{dot, Real};
use crate::spectral::{self, GramSpectrum, DEFAULT_GAP_TOL};

/// Lower/upper clamp margin for similarity labels.
pub const TARGET_EPS: f64 = 1e-4;
/// Singular values at or below this carry no direction and are left out of gradients.
const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub tau_prime: f64,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            tau_prime: 0.2,
            beta: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.tau_prime > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperatures must be positive (tau = {}, tau_prime = {})",
                self.tau, self.tau_prime
            )));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidArgument(format!("beta must lie in (0, 1), got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetSource {
    Identity,
    Learned,
    Given,
}

/// N×N soft correspondence labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTargets {
    entries: Mat<f64>,
    source: TargetSource,
}

impl SimilarityTargets {
    /// Ground-truth diagonal correspondence, clamped to `[ε, 1−ε]`.
    pub fn identity(n: usize) -> Self {
        Self {
            entries: Mat::from_fn(n, n, |i, j| if i == j { 1.0 - TARGET_EPS } else { TARGET_EPS }),
            source: TargetSource::Identity,
        }
    }

    /// Labels taken as given; they must lie in `[0, 1]`.
    pub fn new(entries: Mat<f64>) -> Result<Self> {
        check_targets(&entries)?;
        Ok(Self {
            entries,
            source: TargetSource::Given,
        })
    }

    /// Unconstrained learned values, clamped into `[ε, 1−ε]`.
    pub fn learned(raw: &Mat<f64>) -> Result<Self> {
        if raw.rows() != raw.cols() {
            return Err(Error::Dimension(format!("targets must be square, got {}x{}", raw.rows(), raw.cols())));
        }
        if !raw.all_finite() {
            return Err(Error::NonFinite("similarity targets".into()));
        }
        Ok(Self {
            entries: raw.map(|x| x.clamp(TARGET_EPS, 1.0 - TARGET_EPS)),
            source: TargetSource::Learned,
        })
    }

    pub fn entries(&self) -> &Mat<f64> {
        &self.entries
    }

    pub fn source(&self) -> TargetSource {
        self.source
    }

    pub fn n(&self) -> usize {
        self.entries.rows()
    }

    /// Principal sub-block selected by `idx` (rows and columns).
    pub fn sub_block(&self, idx: &[usize]) -> Self {
        Self {
            entries: Mat::from_fn(idx.len(), idx.len(), |a, b| self.entries[(idx[a], idx[b])]),
            source: self.source,
        }
    }
}

fn check_targets<T: Real>(t: &Mat<T>) -> Result<()> {
    if t.rows() != t.cols() {
        return Err(Error::Dimension(format!("targets must be square, got {}x{}", t.rows(), t.cols())));
    }
    for x in t.as_slice() {
        let v = x.re();
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("similarity target {v} outside [0, 1]")));
        }
    }
    Ok(())
}

/// Set when a BCE group had no members and therefore contributed nothing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GroupFlags {
    pub positives_empty: bool,
    pub negatives_empty: bool,
}

impl GroupFlags {
    fn merge(&mut self, o: GroupFlags) {
        self.positives_empty |= o.positives_empty;
        self.negatives_empty |= o.negatives_empty;
    }
}

#[derive(Clone, Debug)]
pub struct BatchLossReport<T = f64> {
    pub value: T,
    /// One `k×d` block per instance.
    pub grad_z: Vec<Mat<T>>,
    /// Gradient w.r.t. each instance's proxy; empty for pairwise objectives.
    pub grad_proxy: Vec<Vec<T>>,
    pub grad_targets: Mat<T>,
    /// Named loss terms (primal values) that sum to `value`.
    pub components: Vec<(String, f64)>,
    pub flags: GroupFlags,
}

/// Per-instance `−log softmax(σ/τ)₁` with max-shift, and the softmax itself.
pub(crate) fn sigma_softmax<T: Real>(sigmas: &[T], tau: f64) -> (T, Vec<T>) {
    let inv = T::from_f64(1.0 / tau);
    let m = sigmas.iter().map(|s| s.re()).fold(f64::NEG_INFINITY, f64::max) / tau;
    let shifted: Vec<T> = sigmas.iter().map(|&s| s * inv - T::from_f64(m)).collect();
    let exps: Vec<T> = shifted.iter().map(|&x| x.exp()).collect();
    let z: T = exps.iter().copied().sum();
    let loss = z.ln() - shifted[0];
    let probs = exps.iter().map(|&e| e / z).collect();
    (loss, probs)
}

/// Loss value from singular values alone. Works at repeated singular values, where
/// the gradient is undefined.
pub fn modality_loss_value(sigmas: &[Vec<f64>], tau: f64) -> Result<f64> {
    if sigmas.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let total: f64 = sigmas.iter().map(|s| sigma_softmax(s, tau).0).sum();
    let v = total / sigmas.len() as f64;
    if !v.is_finite() {
        return Err(Error::NonFinite("modality loss".into()));
    }
    Ok(v)
}

/// Mean over instances of `−log softmax(σ/τ)₁`, with per-instance gradients
/// `(1/(Nτ))[(p₁−1)u₁v₁ᵀ + Σ_{j≥2} pⱼuⱼvⱼᵀ]`.
pub fn modality_loss<T: Real>(spectra: &[GramSpectrum<T>], cfg: &LossConfig) -> Result<(T, Vec<Mat<T>>)> {
    cfg.validate()?;
    let n = spectra.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let scale = T::from_f64(1.0 / (n as f64 * cfg.tau));
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(n);
    for s in spectra {
        if s.degenerate {
            return Err(Error::DegenerateSpectrum {
                mode: 0,
                gap: s.leading_gap,
            });
        }
        let (loss, p) = sigma_softmax(&s.sigmas, cfg.tau);
        total += loss;
        let mut g = Mat::zeros(s.k(), s.d());
        for (j, &pj) in p.iter().enumerate() {
            let sj = s.sigmas[j];
            if sj.re() <= SIGMA_FLOOR {
                continue;
            }
            let coef = if j == 0 { pj - T::one() } else { pj };
            // uⱼvⱼᵀ = uⱼwⱼᵀ/σⱼ
            g.add_outer(scale * coef / sj, &s.left_vectors[j], &s.scaled_right[j]);
        }
        grads.push(g);
    }
    let value = total * T::from_f64(1.0 / n as f64);
    if !value.is_finite() || grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite("modality loss".into()));
    }
    Ok((value, grads))
}

#[derive(Clone, Debug)]
pub struct TwoGroupBce<T> {
    pub value: T,
    pub grad_sims: Mat<T>,
    pub grad_targets: Mat<T>,
    pub flags: GroupFlags,
}

/// Two-group BCE over all ordered pairs `(i, j)`, including `i = j`, between labels `s`
/// and `sigmoid(sim/τ′)`. Pairs with `s > β` and `s ≤ β` are averaged separately and
/// the two means added. Uses `ℓ = softplus(x) − s·x`, `x = sim/τ′`.
pub fn two_group_bce<T: Real>(sims: &Mat<T>, targets: &Mat<T>, tau_prime: f64, beta: f64) -> Result<TwoGroupBce<T>> {
    check_targets(targets)?;
    if sims.shape() != targets.shape() {
        return Err(Error::Dimension(format!(
            "similarities are {}x{} but targets are {}x{}",
            sims.rows(),
            sims.cols(),
            targets.rows(),
            targets.cols()
        )));
    }
    let pos = targets.as_slice().iter().filter(|t| t.re() > beta).count();
    let neg = targets.as_slice().len() - pos;
    let flags = GroupFlags {
        positives_empty: pos == 0,
        negatives_empty: neg == 0,
    };
    let w_pos = if pos > 0 { 1.0 / pos as f64 } else { 0.0 };
    let w_neg = if neg > 0 { 1.0 / neg as f64 } else { 0.0 };
    let inv_tau = T::from_f64(1.0 / tau_prime);
    let (r, c) = sims.shape();
    let mut value = T::zero();
    let mut grad_sims = Mat::zeros(r, c);
    let mut grad_targets = Mat::zeros(r, c);
    for i in 0..r {
        for j in 0..c {
            let s = targets[(i, j)];
            let w = T::from_f64(if s.re() > beta { w_pos } else { w_neg });
            let x = sims[(i, j)] * inv_tau;
            value += w * (x.softplus() - s * x);
            grad_sims[(i, j)] = w * (x.sigmoid() - s) * inv_tau;
            grad_targets[(i, j)] = -(w * x);
        }
    }
    if !value.is_finite() {
        return Err(Error::NonFinite("weighted BCE".into()));
    }
    Ok(TwoGroupBce {
        value,
        grad_sims,
        grad_targets,
        flags,
    })
}

#[derive(Clone, Debug)]
pub struct WbceReport<T = f64> {
    pub value: T,
    pub grad_proxies: Vec<Vec<T>>,
    pub grad_targets: Mat<T>,
    pub flags: GroupFlags,
}

/// Two-group BCE between labels and proxy similarities `⟨qᵢ, qⱼ⟩`.
pub fn wbce_loss<T: Real>(targets: &Mat<T>, proxies: &[Vec<T>], cfg: &LossConfig) -> Result<WbceReport<T>> {
    cfg.validate()?;
    let n = proxies.len();
    if targets.rows() != n {
        return Err(Error::Dimension(format!("{n} proxies but {}x{} targets", targets.rows(), targets.cols())));
    }
    let dim = proxies.first().map_or(0, Vec::len);
    if proxies.iter().any(|p| p.len() != dim) {
        return Err(Error::Dimension("proxies differ in length".into()));
    }
    let sims = Mat::from_fn(n, n, |i, j| dot(&proxies[i], &proxies[j]));
    let bce = two_group_bce(&sims, targets, cfg.tau_prime, cfg.beta)?;
    let mut grad_proxies = vec![vec![T::zero(); dim]; n];
    for i in 0..n {
        for j in 0..n {
            let g = bce.grad_sims[(i, j)];
            for t in 0..dim {
                grad_proxies[i][t] += g * proxies[j][t];
                grad_proxies[j][t] += g * proxies[i][t];
            }
        }
    }
    Ok(WbceReport {
        value: bce.value,
        grad_proxies,
        grad_targets: bce.grad_targets,
        flags: bce.flags,
    })
}

/// Loss over the cross-modal similarity matrix of one modality pair.
#[derive(Clone, Debug)]
pub struct PairLoss<T = f64> {
    pub value: T,
    /// Gradient w.r.t. the rows of the first modality's batch.
    pub grad_a: Mat<T>,
    pub grad_b: Mat<T>,
    /// Zero-sized for InfoNCE.
    pub grad_targets: Mat<T>,
    pub flags: GroupFlags,
}

fn check_pair<T: Real>(za: &Mat<T>, zb: &Mat<T>) -> Result<()> {
    if za.shape() != zb.shape() {
        return Err(Error::Dimension(format!(
            "pair batches are {}x{} and {}x{}",
            za.rows(),
            za.cols(),
            zb.rows(),
            zb.cols()
        )));
    }
    Ok(())
}

/// Symmetric InfoNCE, the mean of the a→b and b→a directions, over `s_ml = ⟨a_m, b_l⟩`.
/// Each direction has `∂/∂s_ml = (p_ml − 𝕀[m=l])/(Nτ)`.
pub fn pairwise_infonce<T: Real>(za: &Mat<T>, zb: &Mat<T>, tau: f64) -> Result<PairLoss<T>> {
    check_pair(za, zb)?;
    let n = za.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("InfoNCE needs at least 2 instances, got {n}")));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let sims = Mat::from_fn(n, n, |m, l| dot(za.row(m), zb.row(l)));
    let mut grad_s = Mat::zeros(n, n);
    let mut value = T::zero();
    let half = T::from_f64(0.5);
    let coef = T::from_f64(1.0 / (n as f64 * tau));
    for dir in 0..2 {
        for m in 0..n {
            let row: Vec<T> = (0..n)
                .map(|l| if dir == 0 { sims[(m, l)] } else { sims[(l, m)] })
                .collect();
            // the matched candidate goes first so sigma_softmax scores it
            let mut ordered = Vec::with_capacity(n);
            ordered.push(row[m]);
            ordered.extend(row.iter().enumerate().filter(|&(l, _)| l != m).map(|(_, &s)| s));
            let (loss, p) = sigma_softmax(&ordered, tau);
            value += loss * half * T::from_f64(1.0 / n as f64);
            let mut idx = 1;
            for l in 0..n {
                let (pl, delta) = if l == m {
                    (p[0], T::one())
                } else {
                    idx += 1;
                    (p[idx - 1], T::zero())
                };
                let g = half * coef * (pl - delta);
                if dir == 0 {
                    grad_s[(m, l)] += g;
                } else {
                    grad_s[(l, m)] += g;
                }
            }
        }
    }
    if !value.is_finite() {
        return Err(Error::NonFinite("pairwise InfoNCE".into()));
    }
    let (grad_a, grad_b) = sims_backward(za, zb, &grad_s);
    Ok(PairLoss {
        value,
        grad_a,
        grad_b,
        grad_targets: Mat::zeros(0, 0),
        flags: GroupFlags::default(),
    })
}

/// Two-group BCE on the raw cross-modal cosine similarities of one modality pair.
pub fn pairwise_wbce<T: Real>(za: &Mat<T>, zb: &Mat<T>, targets: &Mat<T>, cfg: &LossConfig) -> Result<PairLoss<T>> {
    cfg.validate()?;
    check_pair(za, zb)?;
    let n = za.rows();
    let sims = Mat::from_fn(n, n, |m, l| dot(za.row(m), zb.row(l)));
    let bce = two_group_bce(&sims, targets, cfg.tau_prime, cfg.beta)?;
    let (grad_a, grad_b) = sims_backward(za, zb, &bce.grad_sims);
    Ok(PairLoss {
        value: bce.value,
        grad_a,
        grad_b,
        grad_targets: bce.grad_targets,
        flags: bce.flags,
    })
}

fn sims_backward<T: Real>(za: &Mat<T>, zb: &Mat<T>, grad_s: &Mat<T>) -> (Mat<T>, Mat<T>) {
    let grad_a = grad_s.matmul(zb).expect("shapes checked");
    let grad_b = grad_s.transpose().matmul(za).expect("shapes checked");
    (grad_a, grad_b)
}

pub const VIDEO: &str = "video";
pub const TEXT: &str = "text";
pub const AUDIO: &str = "audio";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairwiseVariant {
    /// video–text, video–audio, audio–text
    ThreePair,
    /// text-anchored: video–text, audio–text
    TextBind,
    /// video-anchored: video–text, video–audio
    VideoBind,
}

impl PairwiseVariant {
    pub fn role_pairs(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Self::ThreePair => &[(VIDEO, TEXT), (VIDEO, AUDIO), (AUDIO, TEXT)],
            Self::TextBind => &[(VIDEO, TEXT), (AUDIO, TEXT)],
            Self::VideoBind => &[(VIDEO, TEXT), (VIDEO, AUDIO)],
        }
    }

    /// Resolve role names against the batch's modality order.
    pub fn pairs(self, names: &[String]) -> Result<Vec<(usize, usize)>> {
        let find = |role: &str| {
            names
                .iter()
                .position(|n| n == role)
                .ok_or_else(|| Error::InvalidArgument(format!("{self} needs a '{role}' modality, have {names:?}")))
        };
        self.role_pairs()
            .iter()
            .map(|&(a, b)| Ok((find(a)?, find(b)?)))
            .collect()
    }
}

impl fmt::Display for PairwiseVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ThreePair => "3pair",
            Self::TextBind => "tbind",
            Self::VideoBind => "vbind",
        })
    }
}

impl FromStr for PairwiseVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "3pair" => Ok(Self::ThreePair),
            "tbind" => Ok(Self::TextBind),
            "vbind" => Ok(Self::VideoBind),
            _ => Err(Error::InvalidArgument(format!("unknown pairwise variant '{s}'"))),
        }
    }
}

/// Which loss the heads are trained with inside experts, students and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub enum InnerObjective {
    /// Singular-value softmax loss and/or BCE on the spectral proxy of the given rank.
    Spectral {
        modality: bool,
        instance: bool,
        proxy_rank: usize,
    },
    /// Sum of pairwise BCE terms over modality index pairs.
    Pairwise { pairs: Vec<(usize, usize)>, names: Vec<String> },
}

impl InnerObjective {
    pub fn hopa() -> Self {
        Self::Spectral {
            modality: true,
            instance: true,
            proxy_rank: 1,
        }
    }

    pub fn pairwise(variant: PairwiseVariant, names: &[String]) -> Result<Self> {
        Ok(Self::Pairwise {
            pairs: variant.pairs(names)?,
            names: names.to_vec(),
        })
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        match self {
            Self::Spectral {
                modality,
                instance,
                proxy_rank,
            } => {
                if !modality && !instance {
                    return Err(Error::InvalidArgument("objective has no active term".into()));
                }
                if *proxy_rank == 0 || *proxy_rank > 2 || *proxy_rank > k {
                    return Err(Error::InvalidArgument(format!("proxy rank {proxy_rank} unsupported for k={k}")));
                }
            }
            Self::Pairwise { pairs, .. } => {
                if pairs.is_empty() || pairs.iter().any(|&(a, b)| a >= k || b >= k || a == b) {
                    return Err(Error::InvalidArgument(format!("bad modality pairs {pairs:?} for k={k}")));
                }
            }
        }
        Ok(())
    }
}

/// Sum of [`pairwise_wbce`] over the given modality pairs.
pub fn composite_pairwise<T: Real>(
    pairs: &[(usize, usize)],
    names: &[String],
    z_batch: &[Mat<T>],
    targets: &Mat<T>,
    cfg: &LossConfig,
) -> Result<BatchLossReport<T>> {
    let n = z_batch.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (k, d) = z_batch[0].shape();
    let mut grad_z = vec![Mat::zeros(k, d); n];
    let mut grad_targets = Mat::zeros(n, n);
    let mut value = T::zero();
    let mut components = Vec::with_capacity(pairs.len());
    let mut flags = GroupFlags::default();
    for &(a, b) in pairs {
        if a >= k || b >= k {
            return Err(Error::InvalidArgument(format!("pair ({a}, {b}) out of range for k={k}")));
        }
        let za = Mat::from_fn(n, d, |i, t| z_batch[i][(a, t)]);
        let zb = Mat::from_fn(n, d, |i, t| z_batch[i][(b, t)]);
        let pl = pairwise_wbce(&za, &zb, targets, cfg)?;
        value += pl.value;
        for i in 0..n {
            for t in 0..d {
                grad_z[i][(a, t)] += pl.grad_a[(i, t)];
                grad_z[i][(b, t)] += pl.grad_b[(i, t)];
            }
        }
        grad_targets.add_scaled(T::one(), &pl.grad_targets);
        let label = |m: usize| names.get(m).cloned().unwrap_or_else(|| m.to_string());
        components.push((format!("{}-{}", label(a), label(b)), pl.value.re()));
        flags.merge(pl.flags);
    }
    Ok(BatchLossReport {
        value,
        grad_z,
        grad_proxy: Vec::new(),
        grad_targets,
        components,
        flags,
    })
}

/// Per-instance jitter seed, so degenerate instances are resolved reproducibly.
fn instance_seed(base: u64, i: usize) -> u64 {
    base ^ (i as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// The configured inner objective over a batch of stacked representations, with all
/// gradient blocks. Degenerate instances are jittered from `jitter_seed`.
pub fn inner_loss<T: Real>(
    z_batch: &[Mat<T>],
    targets: &Mat<T>,
    cfg: &LossConfig,
    objective: &InnerObjective,
    jitter_seed: u64,
) -> Result<BatchLossReport<T>> {
    cfg.validate()?;
    let n = z_batch.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (k, d) = z_batch[0].shape();
    if z_batch.iter().any(|z| z.shape() != (k, d)) {
        return Err(Error::Dimension("instances differ in shape".into()));
    }
    if targets.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "batch of {n} needs {n}x{n} targets, got {}x{}",
            targets.rows(),
            targets.cols()
        )));
    }
    objective.validate(k)?;
    let (modality, instance, rank) = match objective {
        InnerObjective::Pairwise { pairs, names } => {
            return composite_pairwise(pairs, names, z_batch, targets, cfg);
        }
        InnerObjective::Spectral {
            modality,
            instance,
            proxy_rank,
        } => (*modality, *instance, *proxy_rank),
    };
    let mut spectra = Vec::with_capacity(n);
    for (i, z) in z_batch.iter().enumerate() {
        let (s, _) = spectral::decompose_resolving(z, DEFAULT_GAP_TOL, instance_seed(jitter_seed, i))?;
        spectra.push(s);
    }
    let mut value = T::zero();
    let mut grad_z = vec![Mat::zeros(k, d); n];
    let mut components = Vec::new();
    let mut grad_proxy = Vec::new();
    let mut grad_targets = Mat::zeros(n, n);
    let mut flags = GroupFlags::default();
    if modality {
        let (lm, g) = modality_loss(&spectra, cfg)?;
        value += lm;
        components.push(("L_M".to_string(), lm.re()));
        for (acc, gi) in grad_z.iter_mut().zip(&g) {
            acc.add_scaled(T::one(), gi);
        }
    }
    if instance {
        let proxies: Vec<Vec<T>> = spectra.iter().map(|s| spectral::rank_proxy(s, rank)).collect();
        let w = wbce_loss(targets, &proxies, cfg)?;
        value += w.value;
        components.push(("wBCE".to_string(), w.value.re()));
        for (i, s) in spectra.iter().enumerate() {
            let g = spectral::rank_proxy_backward(s, rank, &w.grad_proxies[i]);
            grad_z[i].add_scaled(T::one(), &g);
        }
        grad_proxy = w.grad_proxies;
        grad_targets = w.grad_targets;
        flags = w.flags;
    }
    if !value.is_finite() || grad_z.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite("inner objective".into()));
    }
    Ok(BatchLossReport {
        value,
        grad_z,
        grad_proxy,
        grad_targets,
        components,
        flags,
    })
}

/// `βⱼ = ⟨∇_z L, uⱼvⱼᵀ⟩_F` for every mode with `σⱼ > 0`; zero otherwise.
pub fn mode_projection(grad_z: &Mat<f64>, s: &GramSpectrum<f64>) -> Vec<f64> {
    (0..s.k())
        .map(|j| s.mode_matrix(j).map_or(0.0, |m| grad_z.inner(&m)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_check, random_unit_rows, rng};

    const LN3: f64 = 1.098_612_288_668_109_8;

    #[test]
    fn modality_loss_closed_forms() {
        let v = modality_loss_value(&[vec![1.0, 1.0, 1.0]], 0.1).unwrap();
        assert!((v - LN3).abs() < 1e-12);
        let v = modality_loss_value(&[vec![3f64.sqrt(), 0.0, 0.0]], 0.1).unwrap();
        let expect = (2.0 * (-10.0 * 3f64.sqrt()).exp()).ln_1p();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 5.98e-8).abs() < 5e-10);
        let v = modality_loss_value(&[vec![2f64.sqrt(), 1.0, 0.0]], 0.1).unwrap();
        assert!((v - 1.577e-2).abs() < 1e-5, "{v}");
    }

    #[test]
    fn wbce_closed_forms() {
        let cfg = LossConfig::default();
        let t = Mat::from_vec(1, 1, vec![1.0]).unwrap();
        let w = wbce_loss(&t, &[vec![1.0, 0.0]], &cfg).unwrap();
        let expect = -(1.0 / (1.0 + (-5.0f64).exp())).ln();
        assert!((w.value - expect).abs() < 1e-12);
        assert!((w.value - 6.7153e-3).abs() < 1e-7);
        assert!(w.flags.negatives_empty && !w.flags.positives_empty);

        let t = Mat::<f64>::identity(2);
        let w = wbce_loss(&t, &[vec![1.0, 0.0], vec![0.0, 1.0]], &cfg).unwrap();
        assert!((w.value - (expect + std::f64::consts::LN_2)).abs() < 1e-12);
        assert!((w.value - 0.6999).abs() < 1e-4);
    }

    #[test]
    fn wbce_rejects_bad_targets() {
        let cfg = LossConfig::default();
        let t = Mat::from_vec(1, 1, vec![1.5]).unwrap();
        assert!(wbce_loss(&t, &[vec![1.0]], &cfg).is_err());
        assert!(SimilarityTargets::new(t).is_err());
    }

    #[test]
    fn half_targets_fall_in_negative_group() {
        let t = Mat::from_fn(2, 2, |_, _| 0.5);
        let sims = Mat::from_fn(2, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        let b = two_group_bce(&sims, &t, 0.2, 0.5).unwrap();
        assert!(b.flags.positives_empty && !b.flags.negatives_empty);
    }

    #[test]
    fn infonce_closed_forms() {
        let z = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l = pairwise_infonce(&z, &z, 0.1).unwrap();
        assert!((l.value - (-10.0f64).exp().ln_1p()).abs() < 1e-15);
        let same = Mat::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let l = pairwise_infonce(&same, &same, 0.1).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(pairwise_infonce(&Mat::from_rows(&[vec![1.0]]).unwrap(), &Mat::from_rows(&[vec![1.0]]).unwrap(), 0.1).is_err());
    }

    #[test]
    fn pairwise_wbce_matches_proxy_form_on_orthogonal_batch() {
        let cfg = LossConfig::default();
        let z = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l = pairwise_wbce(&z, &z, &Mat::identity(2), &cfg).unwrap();
        let w = wbce_loss(&Mat::identity(2), &[vec![1.0, 0.0], vec![0.0, 1.0]], &cfg).unwrap();
        assert!((l.value - w.value).abs() < 1e-15);
    }

    #[test]
    fn modality_loss_gradient_matches_fd() {
        let mut r = rng(1);
        let cfg = LossConfig::default();
        for _ in 0..10 {
            let zs: Vec<Mat<f64>> = (0..3).map(|_| random_unit_rows(&mut r, 3, 6)).collect();
            let spectra: Vec<_> = zs.iter().map(|z| spectral::decompose(z, 1e-6).unwrap()).collect();
            let (_, grads) = modality_loss(&spectra, &cfg).unwrap();
            for i in 0..zs.len() {
                let f = |zi: &Mat<f64>| {
                    let mut zz = zs.clone();
                    zz[i] = zi.clone();
                    let sp: Vec<_> = zz.iter().map(|z| spectral::decompose(z, 1e-6).unwrap()).collect();
                    modality_loss(&sp, &cfg).unwrap().0
                };
                fd_check(&zs[i], &grads[i], f, 1e-5);
            }
        }
    }

    #[test]
    fn inner_loss_gradient_matches_fd_for_every_objective() {
        let mut r = rng(2);
        let cfg = LossConfig::default();
        let names: Vec<String> = [VIDEO, TEXT, AUDIO].iter().map(|s| s.to_string()).collect();
        let objectives = [
            InnerObjective::hopa(),
            InnerObjective::Spectral {
                modality: false,
                instance: true,
                proxy_rank: 2,
            },
            InnerObjective::pairwise(PairwiseVariant::ThreePair, &names).unwrap(),
        ];
        for obj in &objectives {
            let zs: Vec<Mat<f64>> = (0..4).map(|_| random_unit_rows(&mut r, 3, 8)).collect();
            let targets = Mat::from_fn(4, 4, |i, j| if i == j { 0.9 } else { 0.1 + 0.05 * (i + j) as f64 });
            let rep = inner_loss(&zs, &targets, &cfg, obj, 0).unwrap();
            for i in 0..zs.len() {
                let f = |zi: &Mat<f64>| {
                    let mut zz = zs.clone();
                    zz[i] = zi.clone();
                    inner_loss(&zz, &targets, &cfg, obj, 0).unwrap().value
                };
                fd_check(&zs[i], &rep.grad_z[i], f, 1e-5);
            }
            let ft = |t: &Mat<f64>| inner_loss(&zs, t, &cfg, obj, 0).unwrap().value;
            if !rep.grad_proxy.is_empty() || matches!(obj, InnerObjective::Pairwise { .. }) {
                fd_check(&targets, &rep.grad_targets, ft, 1e-5);
            }
        }
    }

    #[test]
    fn inner_loss_is_sum_of_parts() {
        let mut r = rng(3);
        let cfg = LossConfig::default();
        let zs: Vec<Mat<f64>> = (0..5).map(|_| random_unit_rows(&mut r, 3, 8)).collect();
        let t = SimilarityTargets::identity(5);
        let rep = inner_loss(&zs, t.entries(), &cfg, &InnerObjective::hopa(), 0).unwrap();
        let spectra: Vec<_> = zs.iter().map(|z| spectral::decompose(z, 1e-6).unwrap()).collect();
        let lm = modality_loss(&spectra, &cfg).unwrap().0;
        let proxies: Vec<_> = spectra.iter().map(|s| s.proxy.clone()).collect();
        let w = wbce_loss(t.entries(), &proxies, &cfg).unwrap().value;
        assert_eq!(rep.value, lm + w);
    }

    #[test]
    fn composite_variants_are_sums_of_pairs() {
        let mut r = rng(4);
        let cfg = LossConfig::default();
        let names: Vec<String> = [VIDEO, TEXT, AUDIO].iter().map(|s| s.to_string()).collect();
        let zs: Vec<Mat<f64>> = (0..4).map(|_| random_unit_rows(&mut r, 3, 8)).collect();
        let t = Mat::<f64>::identity(4);
        let eval = |v: PairwiseVariant| {
            inner_loss(&zs, &t, &cfg, &InnerObjective::pairwise(v, &names).unwrap(), 0).unwrap()
        };
        let three = eval(PairwiseVariant::ThreePair);
        let tb = eval(PairwiseVariant::TextBind);
        let vb = eval(PairwiseVariant::VideoBind);
        let va = three.components[1].1;
        assert_eq!(three.components.len(), 3);
        assert_eq!(three.components[1].0, "video-audio");
        assert!((tb.value - (three.value - va)).abs() < 1e-14);
        assert!((vb.value - (three.value - three.components[2].1)).abs() < 1e-14);
        let other: Vec<String> = ["video", "text", "depth"].iter().map(|s| s.to_string()).collect();
        assert!(PairwiseVariant::ThreePair.pairs(&other).is_err());
        assert_eq!("TBIND".parse::<PairwiseVariant>().unwrap(), PairwiseVariant::TextBind);
    }

    #[test]
    fn modality_loss_selective_projection() {
        let mut r = rng(5);
        let cfg = LossConfig::default();
        let z = random_unit_rows(&mut r, 3, 8);
        let s = spectral::decompose(&z, 1e-6).unwrap();
        let (_, g) = modality_loss(std::slice::from_ref(&s), &cfg).unwrap();
        let beta = mode_projection(&g[0], &s);
        let (_, p) = sigma_softmax(&s.sigmas, cfg.tau);
        // the softmax loss drives every mode: βⱼ = pⱼ/(Nτ) for j ≥ 2
        for j in 1..3 {
            assert!((beta[j] - p[j] / cfg.tau).abs() < 1e-10);
        }
        assert!((beta[0] - (p[0] - 1.0) / cfg.tau).abs() < 1e-10);
    }

    #[test]
    fn modality_loss_decreases_towards_alignment() {
        let mut prev = f64::INFINITY;
        for step in 0..10 {
            let t = step as f64 / 9.0;
            let rows: Vec<Vec<f64>> = (0..3)
                .map(|m| {
                    let mut v = vec![t, 0.0, 0.0, 0.0];
                    v[m + 1] += 1.0 - t;
                    v
                })
                .collect();
            let z: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| {
                    let n = crate::scalar::norm(r);
                    r.iter().map(|x| x / n).collect()
                })
                .collect();
            let s = spectral::decompose(&Mat::from_rows(&z).unwrap(), 1e-6).unwrap();
            let v = modality_loss_value(&[s.sigmas], 0.1).unwrap();
            assert!(v >= 0.0);
            assert!(v <= prev + 1e-15, "step {step}: {v} > {prev}");
            prev = v;
        }
        assert!(prev < 1e-6);
    }
}
