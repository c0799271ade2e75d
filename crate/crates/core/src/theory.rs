//! Numerical checks of the trajectory-matching theory: the endpoint bound driven by
//! per-step gradient mismatch, the spectral mismatch model, mode projections, and the
//! single-mode versus full-spectrum bound comparison. Also the spectral-correctness,
//! selectivity and analytic-gradient suites run by the verifier.
//!
//! Lipschitz and Jacobian constants are empirical estimates (probe maxima times a
//! safety factor), so every bound reported here is conservative-empirical rather than
//! certified.

use std::fmt::Write as _;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::buffer::TeacherSegment;
use crate::distill::{matching_loss, meta_gradient, replay_tape, student_rollout, DistillConfig, Method, SyntheticSet};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{loss_and_gradients, ProjectionHeads};
use crate::objectives::{
    inner_loss, mode_projection, modality_loss, pairwise_infonce, pairwise_wbce, sigma_softmax, InnerObjective,
    LossConfig, SimilarityTargets,
};
use crate::scalar::{norm, Dual};
use crate::spectral::{decompose, rank1_approx, GramSpectrum, DEFAULT_GAP_TOL};

pub const SAFETY_FACTOR: f64 = 1.5;
/// Absolute slack when comparing a measured gap with its bound.
pub const BOUND_SLACK: f64 = 1e-10;
const PROBE_RADIUS: f64 = 1e-3;
const SIGMA_FLOOR: f64 = 1e-12;

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn flatten(ms: &[Mat<f64>]) -> Vec<f64> {
    ms.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
}

/// Full-batch inner-objective gradient on fixed data, as a function of flat head parameters.
#[derive(Clone, Debug)]
pub struct GradientField {
    pub inputs: Vec<Mat<f64>>,
    pub targets: Mat<f64>,
    pub loss: LossConfig,
    pub objective: InnerObjective,
    pub jitter_seed: u64,
    /// Heads whose shapes define the parameter layout.
    pub layout: ProjectionHeads,
}

impl GradientField {
    pub fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let heads = self.layout.unflatten(theta)?;
        let g = loss_and_gradients(
            &heads,
            &self.inputs,
            &self.targets,
            &self.loss,
            &self.objective,
            self.jitter_seed,
        )?;
        Ok(flatten(&g.weights))
    }
}

/// `SAFETY_FACTOR` times the largest gradient difference quotient over all pairs of
/// distinct `states` and over `probes` seeded random perturbations of them.
pub fn estimate_lipschitz<F>(field: F, states: &[Vec<f64>], probes: usize, seed: u64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if states.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 states, got {}", states.len())));
    }
    let grads = states.iter().map(|s| field(s)).collect::<Result<Vec<_>>>()?;
    let mut best: f64 = 0.0;
    for i in 0..states.len() {
        for j in i + 1..states.len() {
            let dist = diff_norm(&states[i], &states[j]);
            if dist > 0.0 {
                best = best.max(diff_norm(&grads[i], &grads[j]) / dist);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in 0..probes {
        let s = &states[p % states.len()];
        let dir = gaussian(&mut rng, s.len());
        let scale = PROBE_RADIUS * norm(s).max(1.0) / norm(&dir).max(f64::MIN_POSITIVE);
        let moved: Vec<f64> = s.iter().zip(&dir).map(|(x, d)| x + scale * d).collect();
        let dist = diff_norm(&moved, s);
        if !(dist > 0.0) {
            return Err(Error::InvalidArgument(format!("probe {p} has zero displacement")));
        }
        let g = field(&moved)?;
        best = best.max(diff_norm(&g, &grads[p % states.len()]) / dist);
    }
    if !best.is_finite() {
        return Err(Error::NonFinite("Lipschitz estimate".into()));
    }
    Ok(SAFETY_FACTOR * best)
}

/// `η Σ_r (1+ηL)^{n−1−r} Δ_r` over the given per-step mismatches.
pub fn endpoint_bound(eta: f64, lipschitz: f64, mismatches: &[f64]) -> f64 {
    let n = mismatches.len();
    mismatches
        .iter()
        .enumerate()
        .map(|(r, d)| eta * (1.0 + eta * lipschitz).powi((n - 1 - r) as i32) * d)
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    /// `Δ_r = ‖g_S(θ_r^S) − g_T(θ_r^S)‖` for `r = 0..n`.
    pub mismatches: Vec<f64>,
    pub lipschitz: f64,
    pub eta: f64,
    pub steps: usize,
    pub bound: f64,
    /// `‖θ_n^S − θ_n^T‖`
    pub gap: f64,
    pub satisfied: bool,
}

/// Flat parameters of both plain-SGD rollouts, `n+1` states each.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedRollout {
    pub teacher: Vec<Vec<f64>>,
    pub student: Vec<Vec<f64>>,
}

/// Runs teacher and student SGD from shared heads for `steps` steps at step size `eta`,
/// records the per-step mismatch at the student's states, and compares the endpoint
/// gap with the assembled bound.
pub fn verify_endpoint_bound(
    teacher: &GradientField,
    student: &GradientField,
    start: &ProjectionHeads,
    steps: usize,
    eta: f64,
    probes: usize,
    seed: u64,
) -> Result<(BoundReport, PairedRollout)> {
    if steps == 0 {
        return Err(Error::InvalidArgument("rollout needs at least one step".into()));
    }
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::InvalidArgument(format!("step size must be finite and ≥ 0, got {eta}")));
    }
    let theta0 = start.flatten();
    let mut roll = PairedRollout {
        teacher: vec![theta0.clone()],
        student: vec![theta0],
    };
    let mut mismatches = Vec::with_capacity(steps);
    for _ in 0..steps {
        let t = roll.teacher.last().expect("non-empty");
        let s = roll.student.last().expect("non-empty");
        let g_teacher = teacher.gradient(t)?;
        let g_student = student.gradient(s)?;
        let g_teacher_at_s = teacher.gradient(s)?;
        mismatches.push(diff_norm(&g_student, &g_teacher_at_s));
        let next_t: Vec<f64> = t.iter().zip(&g_teacher).map(|(x, g)| x - eta * g).collect();
        let next_s: Vec<f64> = s.iter().zip(&g_student).map(|(x, g)| x - eta * g).collect();
        roll.teacher.push(next_t);
        roll.student.push(next_s);
    }
    let states: Vec<Vec<f64>> = roll.teacher.iter().chain(&roll.student).cloned().collect();
    let lipschitz = estimate_lipschitz(|th| teacher.gradient(th), &states, probes, seed)?;
    let bound = endpoint_bound(eta, lipschitz, &mismatches);
    let gap = diff_norm(&roll.teacher[steps], &roll.student[steps]);
    let report = BoundReport {
        mismatches,
        lipschitz,
        eta,
        steps,
        bound,
        gap,
        satisfied: gap <= bound + BOUND_SLACK,
    };
    Ok((report, roll))
}

/// A loss that depends on each instance only through its singular values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpectralObjective {
    /// `Σ_i σ₁⁽ⁱ⁾`
    LeadingSigma,
    /// Batch mean of `−log softmax(σ/τ)₁`.
    ModalityLoss { tau: f64 },
}

impl SpectralObjective {
    /// `∂f/∂σⱼ` per instance and mode.
    pub fn sensitivities(&self, spectra: &[GramSpectrum]) -> Vec<Vec<f64>> {
        let n = spectra.len() as f64;
        spectra
            .iter()
            .map(|s| match *self {
                Self::LeadingSigma => (0..s.k()).map(|j| if j == 0 { 1.0 } else { 0.0 }).collect(),
                Self::ModalityLoss { tau } => {
                    let (_, p) = sigma_softmax(&s.sigmas, tau);
                    p.iter()
                        .enumerate()
                        .map(|(j, &pj)| (if j == 0 { pj - 1.0 } else { pj }) / (n * tau))
                        .collect()
                }
            })
            .collect()
    }
}

/// `Σⱼ αⱼ uⱼvⱼᵀ`, skipping modes with vanishing singular value.
fn spectral_gradient(s: &GramSpectrum, alpha: &[f64]) -> Mat<f64> {
    let mut g = Mat::zeros(s.k(), s.d());
    for (j, &a) in alpha.iter().enumerate() {
        if let Some(m) = s.mode_matrix(j) {
            g.add_scaled(a, &m);
        }
    }
    g
}

/// `εⱼ = ‖uⱼ^S vⱼ^Sᵀ − uⱼ^T vⱼ^Tᵀ‖_F`; a mode with zero singular value counts as the zero matrix.
pub fn mode_errors(student: &GramSpectrum, teacher: &GramSpectrum) -> Vec<f64> {
    (0..teacher.k())
        .map(|j| {
            let zero = || Mat::zeros(teacher.k(), teacher.d());
            let mut m = student.mode_matrix(j).unwrap_or_else(zero);
            m.add_scaled(-1.0, &teacher.mode_matrix(j).unwrap_or_else(zero));
            m.frobenius()
        })
        .collect()
}

fn spectra_of(z: &[Mat<f64>]) -> Result<Vec<GramSpectrum>> {
    z.iter()
        .map(|zi| {
            let s = decompose(zi, DEFAULT_GAP_TOL)?;
            if s.degenerate {
                return Err(Error::DegenerateSpectrum {
                    mode: 0,
                    gap: s.leading_gap,
                });
            }
            Ok(s)
        })
        .collect()
}

/// Power-iteration estimate of `‖J‖_op`, `J = ∂vec(z)/∂θ` over the whole batch.
pub fn jacobian_norm(heads: &ProjectionHeads, inputs: &[Mat<f64>], iterations: usize, seed: u64) -> Result<f64> {
    let enc = heads.forward_batch(inputs)?;
    let dual_inputs: Vec<Mat<Dual>> = inputs.iter().map(|x| x.map(Dual::constant)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = gaussian(&mut rng, heads.param_count());
    let mut sigma = 0.0;
    for _ in 0..iterations.max(1) {
        let nv = norm(&v);
        if nv == 0.0 {
            return Ok(0.0);
        }
        v.iter_mut().for_each(|x| *x /= nv);
        let jv: Vec<Mat<f64>> = heads
            .with_tangent(&v)?
            .forward_batch(&dual_inputs)?
            .z
            .iter()
            .map(|z| z.map(|x| x.eps))
            .collect();
        sigma = jv.iter().map(Mat::frobenius_sq).sum::<f64>().sqrt();
        v = flatten(&heads.backward_batch(inputs, &enc, &jv)?.weights);
    }
    Ok(sigma)
}

fn encode_all(heads: &ProjectionHeads, inputs: &[Mat<f64>]) -> Result<Vec<Mat<f64>>> {
    Ok(heads.forward_batch(inputs)?.z)
}

/// One rollout step of the spectral mismatch check.
#[derive(Clone, Debug, PartialEq)]
pub struct MismatchStep {
    pub step: usize,
    /// `‖g_S − g_T‖` of the spectral objective at the shared state.
    pub mismatch: f64,
    /// `C Σ_i Σ_j |α_ij| ε_ij` with α taken at the teacher representations.
    pub model_bound: f64,
    pub jacobian_bound: f64,
    /// Instance × mode sensitivities at the teacher representations.
    pub alphas: Vec<Vec<f64>>,
    pub mode_errors: Vec<Vec<f64>>,
    /// `‖z^S − z^T‖_F`, the accuracy proxy for sharing α.
    pub representation_gap: f64,
    pub satisfied: bool,
}

/// Checks `Δ_r ≤ C Σ |α| ε` at every state, with `C` the larger of the two data Jacobian
/// norms times `SAFETY_FACTOR`. Teacher and student batches pair instances by row.
pub fn spectral_mismatch_check(
    objective: SpectralObjective,
    layout: &ProjectionHeads,
    teacher_inputs: &[Mat<f64>],
    student_inputs: &[Mat<f64>],
    states: &[Vec<f64>],
    power_iterations: usize,
    seed: u64,
) -> Result<Vec<MismatchStep>> {
    if teacher_inputs.first().map(Mat::rows) != student_inputs.first().map(Mat::rows) {
        return Err(Error::Dimension("teacher and student batches differ in size".into()));
    }
    states
        .iter()
        .enumerate()
        .map(|(r, theta)| {
            let heads = layout.unflatten(theta)?;
            let zt = encode_all(&heads, teacher_inputs)?;
            let zs = encode_all(&heads, student_inputs)?;
            let st = spectra_of(&zt)?;
            let ss = spectra_of(&zs)?;
            let alpha_t = objective.sensitivities(&st);
            let alpha_s = objective.sensitivities(&ss);
            let grad_t: Vec<Mat<f64>> = st.iter().zip(&alpha_t).map(|(s, a)| spectral_gradient(s, a)).collect();
            let grad_s: Vec<Mat<f64>> = ss.iter().zip(&alpha_s).map(|(s, a)| spectral_gradient(s, a)).collect();
            let enc_t = heads.forward_batch(teacher_inputs)?;
            let enc_s = heads.forward_batch(student_inputs)?;
            let gt = flatten(&heads.backward_batch(teacher_inputs, &enc_t, &grad_t)?.weights);
            let gs = flatten(&heads.backward_batch(student_inputs, &enc_s, &grad_s)?.weights);
            let mismatch = diff_norm(&gs, &gt);
            let jt = jacobian_norm(&heads, teacher_inputs, power_iterations, seed ^ r as u64)?;
            let js = jacobian_norm(&heads, student_inputs, power_iterations, seed ^ r as u64)?;
            let jacobian_bound = SAFETY_FACTOR * jt.max(js);
            let errors: Vec<Vec<f64>> = ss.iter().zip(&st).map(|(s, t)| mode_errors(s, t)).collect();
            let weighted: f64 = alpha_t
                .iter()
                .zip(&errors)
                .flat_map(|(a, e)| a.iter().zip(e).map(|(x, y)| x.abs() * y))
                .sum();
            let model_bound = jacobian_bound * weighted;
            let representation_gap = zs
                .iter()
                .zip(&zt)
                .map(|(a, b)| {
                    let mut d = a.clone();
                    d.add_scaled(-1.0, b);
                    d.frobenius_sq()
                })
                .sum::<f64>()
                .sqrt();
            Ok(MismatchStep {
                step: r,
                mismatch,
                model_bound,
                jacobian_bound,
                alphas: alpha_t,
                mode_errors: errors,
                representation_gap,
                satisfied: mismatch <= model_bound + BOUND_SLACK,
            })
        })
        .collect()
}

fn check_grid(name: &str, ms: &[Mat<f64>], shape: (usize, usize), steps: usize) -> Result<()> {
    if ms.len() != steps || ms.iter().any(|m| m.shape() != shape) {
        return Err(Error::Dimension(format!("{name} must be {steps} blocks of {}x{}", shape.0, shape.1)));
    }
    Ok(())
}

/// `ηC Σ_r (1+ηL)^{n−1−r} Σ_i Σ_j |α_{ij,r}| ε_{ij,r}` with `n = alpha.len()`; each
/// block is instances × modes.
pub fn certified_bound(alpha: &[Mat<f64>], eps: &[Mat<f64>], c: f64, lipschitz: f64, eta: f64) -> Result<f64> {
    let shape = alpha.first().map_or((0, 0), Mat::shape);
    check_grid("mode errors", eps, shape, alpha.len())?;
    let per_step: Vec<f64> = alpha
        .iter()
        .zip(eps)
        .map(|(a, e)| a.as_slice().iter().zip(e.as_slice()).map(|(x, y)| x.abs() * y).sum())
        .collect();
    Ok(c * endpoint_bound(eta, lipschitz, &per_step))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundComparison {
    pub u_a: f64,
    pub u_b: f64,
    /// `Σ_r Σ_i Σ_{j≥2} |α^B| ε`
    pub tail_mass: f64,
}

/// Evaluates the single-mode bound `U_A` and the full-spectrum bound `U_B`. `alpha_a`
/// must vanish beyond mode 1 and agree with `alpha_b` on mode 1.
pub fn compare_bounds(
    alpha_a: &[Mat<f64>],
    alpha_b: &[Mat<f64>],
    eps: &[Mat<f64>],
    c: f64,
    lipschitz: f64,
    eta: f64,
) -> Result<BoundComparison> {
    let shape = alpha_a.first().map_or((0, 0), Mat::shape);
    check_grid("full-spectrum sensitivities", alpha_b, shape, alpha_a.len())?;
    for (r, (a, b)) in alpha_a.iter().zip(alpha_b).enumerate() {
        for i in 0..shape.0 {
            if a[(i, 0)] != b[(i, 0)] {
                return Err(Error::InvalidArgument(format!(
                    "mode-1 sensitivities differ at step {r}, instance {i}: {} vs {}",
                    a[(i, 0)],
                    b[(i, 0)]
                )));
            }
            if (1..shape.1).any(|j| a[(i, j)] != 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "single-mode sensitivities are nonzero beyond mode 1 at step {r}, instance {i}"
                )));
            }
        }
    }
    let tail_mass = alpha_b
        .iter()
        .zip(eps)
        .flat_map(|(a, e)| (0..shape.0).flat_map(move |i| (1..shape.1).map(move |j| a[(i, j)].abs() * e[(i, j)])))
        .sum();
    Ok(BoundComparison {
        u_a: certified_bound(alpha_a, eps, c, lipschitz, eta)?,
        u_b: certified_bound(alpha_b, eps, c, lipschitz, eta)?,
        tail_mass,
    })
}

/// Objectives whose mode projections the harness measures.
#[derive(Clone, Debug, PartialEq)]
pub enum ProbeObjective {
    LeadingSigma,
    ModalityLoss,
    /// Symmetric InfoNCE summed over all modality pairs.
    PairwiseInfoNce,
    /// Any inner objective, with identity targets.
    Inner(InnerObjective),
}

/// `βⱼ⁽ⁱ⁾ = ⟨∇_{z⁽ⁱ⁾} L, uⱼvⱼᵀ⟩_F` per instance and mode.
pub fn mode_projections(probe: &ProbeObjective, z_batch: &[Mat<f64>], cfg: &LossConfig) -> Result<Vec<Vec<f64>>> {
    let spectra = spectra_of(z_batch)?;
    let n = z_batch.len();
    let grads: Vec<Mat<f64>> = match probe {
        ProbeObjective::LeadingSigma => spectra.iter().map(|s| spectral_gradient(s, &[1.0])).collect(),
        ProbeObjective::ModalityLoss => modality_loss(&spectra, cfg)?.1,
        ProbeObjective::PairwiseInfoNce => {
            let (k, d) = z_batch[0].shape();
            let mut g = vec![Mat::zeros(k, d); n];
            for a in 0..k {
                for b in a + 1..k {
                    let za = Mat::from_fn(n, d, |i, t| z_batch[i][(a, t)]);
                    let zb = Mat::from_fn(n, d, |i, t| z_batch[i][(b, t)]);
                    let pl = pairwise_infonce(&za, &zb, cfg.tau)?;
                    for (i, gi) in g.iter_mut().enumerate() {
                        for t in 0..d {
                            gi[(a, t)] += pl.grad_a[(i, t)];
                            gi[(b, t)] += pl.grad_b[(i, t)];
                        }
                    }
                }
            }
            g
        }
        ProbeObjective::Inner(obj) => {
            let targets = SimilarityTargets::identity(n);
            inner_loss(z_batch, targets.entries(), cfg, obj, 0)?.grad_z
        }
    };
    Ok(grads
        .iter()
        .zip(&spectra)
        .map(|(g, s)| mode_projection(g, s))
        .collect())
}

/// `max_i max_{j≥2} |βⱼ⁽ⁱ⁾|`
pub fn max_tail(betas: &[Vec<f64>]) -> f64 {
    betas
        .iter()
        .flat_map(|b| b.iter().skip(1).map(|x| x.abs()))
        .fold(0.0, f64::max)
}

/// Shape and sampling ranges of the randomized small-scale trials.
#[derive(Clone, Debug, PartialEq)]
pub struct DeskConfig {
    pub instances: usize,
    pub d: usize,
    pub d_in: Vec<usize>,
    pub max_steps: usize,
    pub eta_range: (f64, f64),
    /// Standard deviation range of the student's input perturbation.
    pub noise_range: (f64, f64),
    pub probes: usize,
    pub power_iterations: usize,
    pub loss: LossConfig,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            instances: 8,
            d: 4,
            d_in: vec![6, 5, 4],
            max_steps: 16,
            eta_range: (0.01, 0.3),
            noise_range: (0.05, 0.5),
            probes: 16,
            power_iterations: 30,
            loss: LossConfig::default(),
        }
    }
}

impl DeskConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.instances < 2 || self.d == 0 || self.d_in.len() < 2 || self.max_steps == 0 {
            return Err(Error::InvalidArgument(
                "trials need ≥ 2 instances, ≥ 2 modalities, d ≥ 1 and ≥ 1 step".into(),
            ));
        }
        let ok = |(lo, hi): (f64, f64)| lo > 0.0 && hi >= lo && hi.is_finite();
        if !ok(self.eta_range) || !ok(self.noise_range) {
            return Err(Error::InvalidArgument("eta and noise ranges must be positive and ordered".into()));
        }
        Ok(())
    }
}

/// One randomized trial of the endpoint bound and the bound comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialReport {
    pub trial: usize,
    pub steps: usize,
    pub eta: f64,
    pub lipschitz: f64,
    pub jacobian_bound: f64,
    pub bound: f64,
    pub gap: f64,
    pub satisfied: bool,
    pub u_a: f64,
    pub u_b: f64,
    pub tail_mass: f64,
    /// Largest higher-mode projection of the singular-value loss at the start.
    pub max_beta_tail: f64,
    /// Steps where the spectral mismatch model under-estimated the true mismatch.
    pub model_violations: Vec<usize>,
    /// Range of factors applied to the full-spectrum sensitivities to match mode 1.
    pub scale_range: (f64, f64),
}

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

/// Draws random real inputs, a perturbed synthetic copy, shared heads, a step count
/// and a step size, then runs the endpoint-bound check, the spectral mismatch check and
/// the single-mode versus full-spectrum comparison on the same rollout.
pub fn desk_trial(cfg: &DeskConfig, trial: usize, seed: u64) -> Result<TrialReport> {
    cfg.validate()?;
    let trial_seed = seed ^ (trial as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407);
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
    let n = cfg.instances;
    let steps = rng.random_range(1..=cfg.max_steps);
    let eta = log_uniform(&mut rng, cfg.eta_range);
    let noise = log_uniform(&mut rng, cfg.noise_range);
    let real: Vec<Mat<f64>> = cfg
        .d_in
        .iter()
        .map(|&din| Mat::from_fn(n, din, |_, _| rng.sample(StandardNormal)))
        .collect();
    let syn: Vec<Mat<f64>> = real
        .iter()
        .map(|x| Mat::from_fn(x.rows(), x.cols(), |i, j| x[(i, j)] + noise * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let start = ProjectionHeads::init(cfg.d, &cfg.d_in, rng.random())?;
    let field = |inputs: Vec<Mat<f64>>| GradientField {
        inputs,
        targets: SimilarityTargets::identity(n).entries().clone(),
        loss: cfg.loss.clone(),
        objective: InnerObjective::hopa(),
        jitter_seed: trial_seed,
        layout: start.clone(),
    };
    let teacher = field(real.clone());
    let student = field(syn.clone());
    let (bound, roll) = verify_endpoint_bound(&teacher, &student, &start, steps, eta, cfg.probes, trial_seed)?;

    let mut alpha_a = Vec::with_capacity(steps);
    let mut alpha_b = Vec::with_capacity(steps);
    let mut eps = Vec::with_capacity(steps);
    let mut c: f64 = 0.0;
    let mut scale_range = (f64::INFINITY, 0.0f64);
    let k = cfg.d_in.len();
    let lm = SpectralObjective::ModalityLoss { tau: cfg.loss.tau };
    let mut max_beta_tail = 0.0;
    for (r, theta) in roll.student[..steps].iter().enumerate() {
        let heads = start.unflatten(theta)?;
        let zt = encode_all(&heads, &real)?;
        let zs = encode_all(&heads, &syn)?;
        let st = spectra_of(&zt)?;
        let ss = spectra_of(&zs)?;
        let lead = lm.sensitivities(&st);
        let betas = mode_projections(&ProbeObjective::PairwiseInfoNce, &zt, &cfg.loss)?;
        if r == 0 {
            max_beta_tail = max_tail(&mode_projections(&ProbeObjective::ModalityLoss, &zt, &cfg.loss)?);
        }
        let mut a = Mat::zeros(n, k);
        let mut b = Mat::zeros(n, k);
        let mut e = Mat::zeros(n, k);
        for i in 0..n {
            a[(i, 0)] = lead[i][0];
            let scale = if betas[i][0] != 0.0 {
                (lead[i][0] / betas[i][0]).abs()
            } else {
                1.0
            };
            scale_range = (scale_range.0.min(scale), scale_range.1.max(scale));
            b[(i, 0)] = lead[i][0];
            for j in 1..k {
                b[(i, j)] = scale * betas[i][j];
            }
            for (j, err) in mode_errors(&ss[i], &st[i]).into_iter().enumerate() {
                e[(i, j)] = err;
            }
        }
        alpha_a.push(a);
        alpha_b.push(b);
        eps.push(e);
        let jt = jacobian_norm(&heads, &real, cfg.power_iterations, trial_seed ^ r as u64)?;
        let js = jacobian_norm(&heads, &syn, cfg.power_iterations, trial_seed ^ r as u64)?;
        c = c.max(SAFETY_FACTOR * jt.max(js));
    }
    let cmp = compare_bounds(&alpha_a, &alpha_b, &eps, c, bound.lipschitz, eta)?;
    let model = spectral_mismatch_check(
        lm,
        &start,
        &real,
        &syn,
        &roll.student[..steps],
        cfg.power_iterations,
        trial_seed,
    )?;
    Ok(TrialReport {
        trial,
        steps,
        eta,
        lipschitz: bound.lipschitz,
        jacobian_bound: c,
        bound: bound.bound,
        gap: bound.gap,
        satisfied: bound.satisfied,
        u_a: cmp.u_a,
        u_b: cmp.u_b,
        tail_mass: cmp.tail_mass,
        max_beta_tail,
        model_violations: model.iter().filter(|m| !m.satisfied).map(|m| m.step).collect(),
        scale_range,
    })
}

/// Runs trials `0..trials` on all available cores; results are in trial order.
pub fn run_trials(cfg: &DeskConfig, trials: usize, seed: u64) -> Result<Vec<TrialReport>> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(trials.max(1));
    let ids: Vec<usize> = (0..trials).collect();
    let chunk = trials.div_ceil(workers).max(1);
    let results: Vec<Vec<Result<TrialReport>>> = thread::scope(|scope| {
        let handles: Vec<_> = ids
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|&t| desk_trial(cfg, t, seed)).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("trial thread panicked"))
            .collect()
    });
    results.into_iter().flatten().collect()
}

/// Whether a trial meets the comparison claim: `U_A ≤ U_B + 1e−12`, strictly when the
/// tail mass exceeds 1e−9.
pub fn comparison_holds(t: &TrialReport) -> bool {
    t.u_a <= t.u_b + 1e-12 && (t.tail_mass <= 1e-9 || t.u_a < t.u_b)
}

pub fn trials_csv(trials: &[TrialReport]) -> String {
    let mut out = String::from("trial,n,eta,L,C,bound,gap,satisfied,U_A,U_B,max_beta_tail\n");
    for t in trials {
        let _ = writeln!(
            out,
            "{},{},{:e},{:e},{:e},{:e},{:e},{},{:e},{:e},{:e}",
            t.trial,
            t.steps,
            t.eta,
            t.lipschitz,
            t.jacobian_bound,
            t.bound,
            t.gap,
            t.satisfied,
            t.u_a,
            t.u_b,
            t.max_beta_tail
        );
    }
    out
}

/// Central differences of `f` at every entry of `x`.
pub fn central_difference(x: &Mat<f64>, f: impl Fn(&Mat<f64>) -> Result<f64>, step: f64) -> Result<Mat<f64>> {
    let mut fd = Mat::zeros(x.rows(), x.cols());
    for idx in 0..x.as_slice().len() {
        let mut xp = x.clone();
        xp.as_mut_slice()[idx] += step;
        let mut xm = x.clone();
        xm.as_mut_slice()[idx] -= step;
        fd.as_mut_slice()[idx] = (f(&xp)? - f(&xm)?) / (2.0 * step);
    }
    Ok(fd)
}

/// `‖a − b‖_F / max(‖a‖_F, ‖b‖_F, 1e−8)`
pub fn relative_error(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    let mut d = a.clone();
    d.add_scaled(-1.0, b);
    d.frobenius() / a.frobenius().max(b.frobenius()).max(1e-8)
}

pub const FD_STEP: f64 = 1e-6;

/// Worst and per-instance relative errors of one analytic gradient against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub name: &'static str,
    pub errors: Vec<f64>,
}

impl GradientCheck {
    pub fn worst(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
    let mut m = Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal));
    for i in 0..rows {
        let n = norm(m.row(i));
        m.row_mut(i).iter_mut().for_each(|x| *x /= n);
    }
    m
}

fn stack(blocks: &[Mat<f64>]) -> Mat<f64> {
    let (k, d) = blocks[0].shape();
    Mat::from_fn(blocks.len() * k, d, |r, c| blocks[r / k][(r % k, c)])
}

fn unstack(m: &Mat<f64>, k: usize) -> Vec<Mat<f64>> {
    (0..m.rows() / k)
        .map(|i| Mat::from_fn(k, m.cols(), |r, c| m[(i * k + r, c)]))
        .collect()
}

fn random_targets(rng: &mut ChaCha8Rng, n: usize) -> Mat<f64> {
    Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { rng.random::<f64>() })
}

fn check_one(x: &Mat<f64>, analytic: &Mat<f64>, f: impl Fn(&Mat<f64>) -> Result<f64>) -> Result<f64> {
    Ok(relative_error(analytic, &central_difference(x, f, FD_STEP)?))
}

/// Analytic gradients of `σ₁`, the singular-value loss, proxy BCE, pairwise InfoNCE,
/// pairwise BCE and the head backward pass against central differences, on `instances`
/// seeded random inputs each.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<GradientCheck>> {
    let cfg = LossConfig::default();
    let (k, d, batch) = (3, 5, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks: Vec<GradientCheck> = [
        "sigma1",
        "modality_loss",
        "proxy_bce",
        "pairwise_infonce",
        "pairwise_bce",
        "head_backward",
    ]
    .into_iter()
    .map(|name| GradientCheck {
        name,
        errors: Vec::with_capacity(instances),
    })
    .collect();
    let instance_only = InnerObjective::Spectral {
        modality: false,
        instance: true,
        proxy_rank: 1,
    };
    for _ in 0..instances {
        let z = unit_rows(&mut rng, k, d);
        let s = decompose(&z, DEFAULT_GAP_TOL)?;
        let g = s.mode_matrix(0).ok_or(Error::ZeroRepresentation)?;
        checks[0]
            .errors
            .push(check_one(&z, &g, |x| Ok(decompose(x, DEFAULT_GAP_TOL)?.sigma1()))?);

        let zs: Vec<Mat<f64>> = (0..batch).map(|_| unit_rows(&mut rng, k, d)).collect();
        let stacked = stack(&zs);
        let lm = |x: &Mat<f64>| modality_loss(&spectra_of(&unstack(x, k))?, &cfg);
        checks[1].errors.push(check_one(&stacked, &stack(&lm(&stacked)?.1), |x| Ok(lm(x)?.0))?);

        let targets = random_targets(&mut rng, batch);
        let bce = |x: &Mat<f64>| inner_loss(&unstack(x, k), &targets, &cfg, &instance_only, 0);
        let grad = stack(&bce(&stacked)?.grad_z);
        checks[2].errors.push(check_one(&stacked, &grad, |x| Ok(bce(x)?.value))?);

        let za = unit_rows(&mut rng, batch, d);
        let zb = unit_rows(&mut rng, batch, d);
        let pair = stack(&[za.clone(), zb.clone()]);
        let split = |x: &Mat<f64>| {
            let v = unstack(x, batch);
            (v[0].clone(), v[1].clone())
        };
        let nce = pairwise_infonce(&za, &zb, cfg.tau)?;
        checks[3].errors.push(check_one(&pair, &stack(&[nce.grad_a, nce.grad_b]), |x| {
            let (a, b) = split(x);
            Ok(pairwise_infonce(&a, &b, cfg.tau)?.value)
        })?);
        let pw = pairwise_wbce(&za, &zb, &targets, &cfg)?;
        checks[4].errors.push(check_one(&pair, &stack(&[pw.grad_a, pw.grad_b]), |x| {
            let (a, b) = split(x);
            Ok(pairwise_wbce(&a, &b, &targets, &cfg)?.value)
        })?);

        let d_in = [4, 3, 5];
        let heads = ProjectionHeads::init(d, &d_in, rng.random())?;
        let xs: Vec<Mat<f64>> = d_in
            .iter()
            .map(|&din| Mat::from_fn(batch, din, |_, _| rng.sample(StandardNormal)))
            .collect();
        let upstream: Vec<Mat<f64>> = (0..batch)
            .map(|_| Mat::from_fn(k, d, |_, _| rng.sample(StandardNormal)))
            .collect();
        let enc = heads.forward_batch(&xs)?;
        let analytic = heads.backward_batch(&xs, &enc, &upstream)?;
        let flat = Mat::from_vec(1, heads.param_count(), heads.flatten())?;
        let grad = Mat::from_vec(1, heads.param_count(), flatten(&analytic.weights))?;
        checks[5].errors.push(check_one(&flat, &grad, |x| {
            let h = heads.unflatten(x.as_slice())?;
            let z = h.forward_batch(&xs)?.z;
            Ok(z.iter().zip(&upstream).map(|(a, b)| a.inner(b)).sum())
        })?);
    }
    Ok(checks)
}

/// Spectral-correctness measurements over random unit-row instances.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralSuite {
    pub trials: usize,
    /// Largest `max_j ‖z vⱼ − σⱼ uⱼ‖`.
    pub worst_duality: f64,
    /// Largest `|Σλ − k|`.
    pub worst_trace: f64,
    /// Random rank-1 candidates that approximated `G` better than `σ₁²u₁u₁ᵀ`.
    pub eckart_young_violations: usize,
    /// Trials meeting all three tolerances.
    pub passed: usize,
}

pub fn spectral_suite(trials: usize, candidates: usize, seed: u64) -> Result<SpectralSuite> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SpectralSuite {
        trials,
        worst_duality: 0.0,
        worst_trace: 0.0,
        eckart_young_violations: 0,
        passed: 0,
    };
    for _ in 0..trials {
        let k = 3;
        let d = rng.random_range(3..=8);
        let z = unit_rows(&mut rng, k, d);
        let s = decompose(&z, DEFAULT_GAP_TOL)?;
        let mut duality: f64 = 0.0;
        for j in 0..k {
            if s.sigmas[j] <= SIGMA_FLOOR {
                continue;
            }
            let v = s.right_vector(j).expect("positive sigma");
            let zv = z.matvec(&v);
            let r: f64 = zv
                .iter()
                .zip(&s.left_vectors[j])
                .map(|(a, u)| (a - s.sigmas[j] * u).powi(2))
                .sum::<f64>()
                .sqrt();
            duality = duality.max(r);
        }
        let trace = (s.eigenvalues.iter().sum::<f64>() - k as f64).abs();
        let g = z.gram();
        let best = rank1_approx(&s, &g)?.frobenius_error;
        let mut violations = 0;
        for _ in 0..candidates {
            let x = gaussian(&mut rng, k);
            let nx = norm(&x);
            let u: Vec<f64> = x.iter().map(|v| v / nx).collect();
            let scale = 2.0 * s.eigenvalues[0] * rng.random::<f64>();
            let mut resid = g.clone();
            resid.add_outer(-scale, &u, &u);
            if resid.frobenius() < best - 1e-12 {
                violations += 1;
            }
        }
        out.worst_duality = out.worst_duality.max(duality);
        out.worst_trace = out.worst_trace.max(trace);
        out.eckart_young_violations += violations;
        if duality <= 1e-8 && trace <= 1e-8 && violations == 0 {
            out.passed += 1;
        }
    }
    Ok(out)
}

/// Per-trial largest higher-mode projection under the singular-value loss and under
/// pairwise InfoNCE, on random batches.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectivityTrial {
    pub modality_tail: f64,
    pub infonce_tail: f64,
}

pub fn selectivity_suite(trials: usize, seed: u64) -> Result<Vec<SelectivityTrial>> {
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|_| {
            let z: Vec<Mat<f64>> = (0..8).map(|_| unit_rows(&mut rng, 3, 6)).collect();
            Ok(SelectivityTrial {
                modality_tail: max_tail(&mode_projections(&ProbeObjective::ModalityLoss, &z, &cfg)?),
                infonce_tail: max_tail(&mode_projections(&ProbeObjective::PairwiseInfoNce, &z, &cfg)?),
            })
        })
        .collect()
}

/// A tiny distillation problem: random synthetic set, random start heads and a nearby target.
#[derive(Clone, Debug)]
pub struct MetaGradientProblem {
    pub syn: SyntheticSet,
    pub segment: TeacherSegment,
    pub cfg: DistillConfig,
}

fn uniform_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat<f64> {
    Mat::from_fn(r, c, |_, _| rng.random::<f64>() * 2.0 - 1.0)
}

/// `n` synthetic instances over modalities of widths `d_in`, heads of width `d`, and a
/// `steps`-step student rollout with mini-batches of `n − 1`.
pub fn meta_gradient_problem(
    seed: u64,
    n: usize,
    d_in: &[usize],
    d: usize,
    steps: usize,
    method: Method,
) -> Result<MetaGradientProblem> {
    if n < 2 || d_in.len() < 2 || d_in.len() > 3 {
        return Err(Error::InvalidArgument("problems need ≥ 2 instances and 2 or 3 modalities".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = ["video", "text", "audio"][..d_in.len()].iter().map(|s| s.to_string()).collect();
    let rank = 2.min(n);
    let syn = SyntheticSet {
        names,
        modalities: d_in.iter().map(|&k| uniform_mat(&mut rng, n, k)).collect(),
        sim_a: uniform_mat(&mut rng, n, rank).map(|v| 0.5 * v),
        sim_b: uniform_mat(&mut rng, n, rank).map(|v| 0.5 * v),
        sim_scale: 0.7,
        student_lr: 0.3,
    };
    let start = ProjectionHeads::new(d_in.iter().map(|&k| uniform_mat(&mut rng, d, k)).collect())?;
    let target = ProjectionHeads::new(
        start
            .weights()
            .iter()
            .map(|w| {
                let mut t = w.clone();
                t.add_scaled(0.05, &uniform_mat(&mut rng, w.rows(), w.cols()));
                t
            })
            .collect(),
    )?;
    let cfg = DistillConfig {
        method,
        n,
        syn_steps: steps,
        mini_batch_size: n - 1,
        sim_rank: rank,
        ..DistillConfig::default()
    };
    Ok(MetaGradientProblem {
        syn,
        segment: TeacherSegment {
            trajectory: 0,
            start_epoch: 0,
            span: 2,
            start,
            target,
        },
        cfg,
    })
}

/// Worst relative error of the unrolled meta-gradient against a fourth-order central
/// difference of the matching loss through the full replayed rollout, over `coords`
/// randomly chosen coordinates of the data, the similarity factors and `ln η`.
pub fn meta_gradient_check(p: &MetaGradientProblem, coords: usize, seed: u64) -> Result<f64> {
    let objective = p.cfg.method.objective(&p.syn.names)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tape = student_rollout(&p.segment.start, &p.syn, &p.cfg, &objective, &mut rng, 9)?;
    let g = meta_gradient(&p.syn, &tape, &p.segment, &p.cfg, &objective)?;
    let loss_with = |syn: &SyntheticSet| -> Result<f64> {
        let mut t = tape.clone();
        t.student_lr = syn.student_lr;
        let end = replay_tape(&t, syn, &p.cfg, &objective)?;
        Ok(matching_loss(&end, &p.segment)?.value)
    };
    let h = 1e-4;
    let fd = |perturb: &dyn Fn(&mut SyntheticSet, f64)| -> Result<f64> {
        let at = |e: f64| {
            let mut s = p.syn.clone();
            perturb(&mut s, e);
            loss_with(&s)
        };
        Ok((8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h))
    };
    let mut pairs = Vec::with_capacity(coords);
    for c in 0..coords {
        let pair = match rng.random_range(0..4) {
            0 | 1 => {
                let m = rng.random_range(0..p.syn.k());
                let i = rng.random_range(0..p.syn.n());
                let j = rng.random_range(0..p.syn.modalities[m].cols());
                (g.data[m][(i, j)], fd(&|s: &mut SyntheticSet, e| s.modalities[m][(i, j)] += e)?)
            }
            2 => {
                let i = rng.random_range(0..p.syn.n());
                let j = rng.random_range(0..p.syn.rank());
                if c % 2 == 0 {
                    (g.sim_a[(i, j)], fd(&|s: &mut SyntheticSet, e| s.sim_a[(i, j)] += e)?)
                } else {
                    (g.sim_b[(i, j)], fd(&|s: &mut SyntheticSet, e| s.sim_b[(i, j)] += e)?)
                }
            }
            _ => (
                g.log_lr,
                fd(&|s: &mut SyntheticSet, e| s.student_lr = (s.student_lr.ln() + e).exp())?,
            ),
        };
        pairs.push(pair);
    }
    let scale = pairs.iter().fold(0.0f64, |m, (a, f)| m.max(a.abs()).max(f.abs()));
    // below this the stencil's rounding noise (~10·ε·|L|/h) exceeds the tolerance
    let floor = (1e-6 * scale).max(10.0 * f64::EPSILON * g.matching_loss.abs() / h / 1e-4);
    Ok(pairs
        .iter()
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(floor))
        .fold(0.0, f64::max))
}
