//! Trajectory-matching distillation: learnable synthetic embeddings, a low-rank
//! similarity matrix and a learnable student step size, updated through exact
//! meta-gradients of unrolled student rollouts.
//!
//! The backward pass walks the rollout in reverse. At every recorded state it runs the
//! inner gradient once in dual numbers, with the parameter tangent set to the current
//! adjoint; the tangents of the parameter, input and target gradients are then the
//! three Hessian-vector products the chain rule needs.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{write_atomic, ByteReader, ByteWriter};
use crate::buffer::{sample_segment, step_seed, ExpertTrajectory, TeacherSegment};
use crate::datagen::{sample_real_subset, OmniDataset};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{loss_and_gradients, param_distance, ProjectionHeads, SgdState};
use crate::objectives::{InnerObjective, LossConfig, PairwiseVariant, TARGET_EPS};
use crate::scalar::Dual;

const MAGIC: &[u8; 4] = b"OMSS";
const VERSION: u32 = 1;
const SEGMENT_STREAM: u64 = 11;
const BATCH_STREAM: u64 = 12;
const SIM_INIT_STREAM: u64 = 13;
const SEGMENT_ATTEMPTS: usize = 10;
/// Smallest teacher displacement (squared, per branch) accepted as a segment.
pub const MIN_TEACHER_MOTION: f64 = 1e-16;

/// Distillation variant: the inner objective and whether the similarity matrix is learned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Hopa,
    Pairwise(PairwiseVariant),
    Rank2,
    AblateModality,
    AblateInstance,
    AblateMining,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Hopa,
        Method::Pairwise(PairwiseVariant::ThreePair),
        Method::Pairwise(PairwiseVariant::TextBind),
        Method::Pairwise(PairwiseVariant::VideoBind),
        Method::Rank2,
        Method::AblateModality,
        Method::AblateInstance,
        Method::AblateMining,
    ];

    pub fn objective(self, names: &[String]) -> Result<InnerObjective> {
        let spectral = |modality, instance, proxy_rank| InnerObjective::Spectral {
            modality,
            instance,
            proxy_rank,
        };
        Ok(match self {
            Method::Hopa | Method::AblateMining => spectral(true, true, 1),
            Method::Rank2 => spectral(true, true, 2),
            Method::AblateModality => spectral(false, true, 1),
            Method::AblateInstance => spectral(true, false, 1),
            Method::Pairwise(v) => InnerObjective::pairwise(v, names)?,
        })
    }

    pub fn learns_similarity(self) -> bool {
        self != Method::AblateMining
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Hopa => f.write_str("hopa"),
            Method::Pairwise(v) => write!(f, "{v}"),
            Method::Rank2 => f.write_str("rank2"),
            Method::AblateModality => f.write_str("ablate-LM"),
            Method::AblateInstance => f.write_str("ablate-wBCE"),
            Method::AblateMining => f.write_str("ablate-mining"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Ok(match lower.as_str() {
            "hopa" => Method::Hopa,
            "rank2" => Method::Rank2,
            "ablate-lm" | "no_lm" => Method::AblateModality,
            "ablate-wbce" | "no_wbce" => Method::AblateInstance,
            "ablate-mining" | "no_mining" => Method::AblateMining,
            other => Method::Pairwise(other.parse().map_err(|_| {
                Error::InvalidArgument(format!(
                    "unknown method '{s}' (expected hopa, 3pair, tbind, vbind, rank2, ablate-LM, ablate-wBCE, ablate-mining)"
                ))
            })?),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub method: Method,
    pub n: usize,
    pub iterations: usize,
    pub syn_steps: usize,
    pub expert_epochs: usize,
    pub max_start_epoch: usize,
    pub mini_batch_size: usize,
    pub lr_data: f64,
    pub lr_lr: f64,
    pub lr_sim: f64,
    pub lr_teacher: f64,
    pub momentum: f64,
    pub sim_rank: usize,
    pub sim_alpha: f64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            method: Method::Hopa,
            n: 50,
            iterations: 500,
            syn_steps: 16,
            expert_epochs: 2,
            max_start_epoch: 5,
            mini_batch_size: 25,
            lr_data: 100.0,
            lr_lr: 1e-4,
            lr_sim: 10.0,
            lr_teacher: 0.01,
            momentum: 0.5,
            sim_rank: 10,
            sim_alpha: 1.0,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        for (name, v) in [
            ("lr_data", self.lr_data),
            ("lr_lr", self.lr_lr),
            ("lr_sim", self.lr_sim),
            ("sim_alpha", self.sim_alpha),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        if !(self.lr_teacher > 0.0) || !self.lr_teacher.is_finite() {
            return Err(Error::InvalidArgument(format!("lr_teacher must be positive, got {}", self.lr_teacher)));
        }
        if self.syn_steps == 0 || self.expert_epochs == 0 || self.mini_batch_size == 0 {
            return Err(Error::InvalidArgument("syn_steps, expert_epochs and mini_batch_size must be ≥ 1".into()));
        }
        if self.n == 0 || self.sim_rank == 0 || self.sim_rank > self.n {
            return Err(Error::InvalidArgument(format!(
                "need 1 ≤ sim_rank ≤ n (sim_rank = {}, n = {})",
                self.sim_rank, self.n
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Learnable synthetic data, similarity factors and student step size.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet {
    pub names: Vec<String>,
    /// Per modality `n×d_in(m)`; unconstrained, normalized only by the heads.
    pub modalities: Vec<Mat<f64>>,
    /// `n×r` factors of the similarity correction.
    pub sim_a: Mat<f64>,
    pub sim_b: Mat<f64>,
    pub sim_scale: f64,
    /// Student step size `η`, kept positive by updating `ln η`.
    pub student_lr: f64,
}

impl SyntheticSet {
    pub fn n(&self) -> usize {
        self.modalities[0].rows()
    }

    pub fn k(&self) -> usize {
        self.modalities.len()
    }

    pub fn rank(&self) -> usize {
        self.sim_a.cols()
    }

    pub fn d_in(&self) -> Vec<usize> {
        self.modalities.iter().map(Mat::cols).collect()
    }

    /// `I + α·ABᵀ` before clamping.
    pub fn raw_similarity(&self) -> Mat<f64> {
        let n = self.n();
        let mut s = Mat::identity(n);
        let abt = self.sim_a.matmul(&self.sim_b.transpose()).expect("factor shapes");
        s.add_scaled(self.sim_scale, &abt);
        s
    }

    /// `clamp(I + α·ABᵀ, ε, 1−ε)`
    pub fn similarity(&self) -> Mat<f64> {
        self.raw_similarity().map(|x| x.clamp(TARGET_EPS, 1.0 - TARGET_EPS))
    }

    pub fn as_dataset(&self) -> Result<OmniDataset> {
        OmniDataset::new(self.names.clone(), self.modalities.clone(), vec![None; self.n()], None)
    }
}

/// Copies a seeded real subset and draws the similarity factors.
pub fn init_synthetic(ds: &OmniDataset, cfg: &DistillConfig, seed: u64) -> Result<SyntheticSet> {
    cfg.validate()?;
    let sub = sample_real_subset(ds, cfg.n, seed)?;
    let r = cfg.sim_rank;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SIM_INIT_STREAM);
    let scale = 1.0 / (r as f64).sqrt();
    let mut draw = || Mat::from_fn(cfg.n, r, |_, _| scale * (2.0 * rng.random::<f64>() - 1.0));
    let sim_a = draw();
    let sim_b = draw();
    Ok(SyntheticSet {
        names: sub.names,
        modalities: sub.modalities,
        sim_a,
        sim_b,
        sim_scale: cfg.sim_alpha,
        student_lr: cfg.lr_teacher,
    })
}

/// Everything needed to replay or differentiate one student rollout.
#[derive(Clone, Debug)]
pub struct RolloutTape {
    /// `states[r]` is `θ_r`; `states[t]` is the endpoint.
    pub states: Vec<ProjectionHeads>,
    pub batches: Vec<Vec<usize>>,
    pub jitter_seeds: Vec<u64>,
    pub losses: Vec<f64>,
    /// Mean of each named inner-loss term over the steps.
    pub components: Vec<(String, f64)>,
    pub student_lr: f64,
}

impl RolloutTape {
    pub fn endpoint(&self) -> &ProjectionHeads {
        self.states.last().expect("tape holds the start state")
    }
}

fn gradient_step(heads: &ProjectionHeads, grads: &[Mat<f64>], lr: f64) -> Result<ProjectionHeads> {
    let mut flat = heads.flatten();
    let mut off = 0;
    for g in grads {
        for &v in g.as_slice() {
            flat[off] -= lr * v;
            off += 1;
        }
    }
    heads.unflatten(&flat)
}

/// `syn_steps` plain SGD steps of size `η` on seeded mini-batches of the synthetic set,
/// with the matching similarity sub-block as targets.
pub fn student_rollout(
    start: &ProjectionHeads,
    syn: &SyntheticSet,
    cfg: &DistillConfig,
    objective: &InnerObjective,
    rng: &mut impl Rng,
    jitter_base: u64,
) -> Result<RolloutTape> {
    let n = syn.n();
    let b = cfg.mini_batch_size.min(n);
    let sim = syn.similarity();
    let mut batches = Vec::with_capacity(cfg.syn_steps);
    let mut jitter_seeds = Vec::with_capacity(cfg.syn_steps);
    for r in 0..cfg.syn_steps {
        batches.push(index::sample(rng, n, b).into_vec());
        jitter_seeds.push(step_seed(jitter_base, 0, r));
    }
    replay(start, syn, &sim, cfg, objective, batches, jitter_seeds)
}

fn replay(
    start: &ProjectionHeads,
    syn: &SyntheticSet,
    sim: &Mat<f64>,
    cfg: &DistillConfig,
    objective: &InnerObjective,
    batches: Vec<Vec<usize>>,
    jitter_seeds: Vec<u64>,
) -> Result<RolloutTape> {
    let mut states = vec![start.clone()];
    let mut losses = Vec::with_capacity(batches.len());
    let mut sums: Vec<(String, f64)> = Vec::new();
    for (idx, &seed) in batches.iter().zip(&jitter_seeds) {
        let theta = states.last().expect("nonempty");
        let xs: Vec<Mat<f64>> = syn.modalities.iter().map(|m| m.select_rows(idx)).collect();
        let t = Mat::from_fn(idx.len(), idx.len(), |a, c| sim[(idx[a], idx[c])]);
        let g = loss_and_gradients(theta, &xs, &t, &cfg.loss, objective, seed)?;
        if !g.value.is_finite() {
            return Err(Error::NonFinite(format!("student loss at step {}", losses.len())));
        }
        losses.push(g.value);
        if sums.is_empty() {
            sums = g.components.iter().map(|(k, _)| (k.clone(), 0.0)).collect();
        }
        for (acc, (_, v)) in sums.iter_mut().zip(&g.components) {
            acc.1 += v;
        }
        let next = gradient_step(theta, &g.weights, syn.student_lr)?;
        states.push(next);
    }
    let steps = losses.len().max(1) as f64;
    Ok(RolloutTape {
        states,
        batches,
        jitter_seeds,
        losses,
        components: sums.into_iter().map(|(k, v)| (k, v / steps)).collect(),
        student_lr: syn.student_lr,
    })
}

/// Re-runs the recorded rollout; the endpoint matches the original bit for bit.
pub fn replay_tape(
    tape: &RolloutTape,
    syn: &SyntheticSet,
    cfg: &DistillConfig,
    objective: &InnerObjective,
) -> Result<ProjectionHeads> {
    let t = replay(
        &tape.states[0],
        syn,
        &syn.similarity(),
        cfg,
        objective,
        tape.batches.clone(),
        tape.jitter_seeds.clone(),
    )?;
    Ok(t.endpoint().clone())
}

#[derive(Clone, Debug)]
pub struct MatchReport {
    pub value: f64,
    pub per_branch: Vec<f64>,
    /// `‖θ₀,m − θ_T,m‖²`
    pub denominators: Vec<f64>,
}

/// Teacher displacement per branch; errors when any branch barely moved.
pub fn teacher_motion(segment: &TeacherSegment) -> Result<Vec<f64>> {
    let (den, _) = param_distance(&segment.start, &segment.target)?;
    for (m, &d) in den.iter().enumerate() {
        if !(d >= MIN_TEACHER_MOTION) {
            return Err(Error::DegenerateSegment { branch: m, moved: d });
        }
    }
    Ok(den)
}

/// `Σ_m ‖θ_e,m − θ_T,m‖² / ‖θ₀,m − θ_T,m‖²`
pub fn matching_loss(endpoint: &ProjectionHeads, segment: &TeacherSegment) -> Result<MatchReport> {
    let denominators = teacher_motion(segment)?;
    let (num, _) = param_distance(endpoint, &segment.target)?;
    let per_branch: Vec<f64> = num.iter().zip(&denominators).map(|(a, b)| a / b).collect();
    Ok(MatchReport {
        value: per_branch.iter().sum(),
        per_branch,
        denominators,
    })
}

/// Gradient of the matching loss w.r.t. every learnable synthetic quantity.
#[derive(Clone, Debug)]
pub struct MetaGradient {
    pub data: Vec<Mat<f64>>,
    pub sim_a: Mat<f64>,
    pub sim_b: Mat<f64>,
    /// W.r.t. `ln η`.
    pub log_lr: f64,
    pub matching_loss: f64,
}

impl MetaGradient {
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(Mat::all_finite)
            && self.sim_a.all_finite()
            && self.sim_b.all_finite()
            && self.log_lr.is_finite()
            && self.matching_loss.is_finite()
    }
}

/// Reverse pass through the tape.
pub fn meta_gradient(
    syn: &SyntheticSet,
    tape: &RolloutTape,
    segment: &TeacherSegment,
    cfg: &DistillConfig,
    objective: &InnerObjective,
) -> Result<MetaGradient> {
    let report = matching_loss(tape.endpoint(), segment)?;
    let eta = tape.student_lr;
    let n = syn.n();
    let sim = syn.similarity();

    // ∂L/∂θ_t, branch-wise 2(θ_t − θ_T)/D_m
    let end = tape.endpoint().flatten();
    let target = segment.target.flatten();
    let sizes: Vec<usize> = segment.target.weights().iter().map(|w| w.as_slice().len()).collect();
    let mut adj = Vec::with_capacity(end.len());
    let mut off = 0;
    for (m, &size) in sizes.iter().enumerate() {
        for i in off..off + size {
            adj.push(2.0 * (end[i] - target[i]) / report.denominators[m]);
        }
        off += size;
    }

    let mut grad_data: Vec<Mat<f64>> = syn.modalities.iter().map(|m| Mat::zeros(m.rows(), m.cols())).collect();
    let mut grad_sim = Mat::<f64>::zeros(n, n);
    let mut grad_eta = 0.0;
    for r in (0..tape.batches.len()).rev() {
        let idx = &tape.batches[r];
        let heads = tape.states[r].with_tangent(&adj)?;
        let xs: Vec<Mat<Dual>> = syn
            .modalities
            .iter()
            .map(|m| m.select_rows(idx).map(Dual::constant))
            .collect();
        let t = Mat::from_fn(idx.len(), idx.len(), |a, c| Dual::constant(sim[(idx[a], idx[c])]));
        let g = loss_and_gradients(&heads, &xs, &t, &cfg.loss, objective, tape.jitter_seeds[r])?;
        let mut off = 0;
        let mut next = adj.clone();
        for w in &g.weights {
            for v in w.as_slice() {
                grad_eta -= adj[off] * v.re;
                next[off] -= eta * v.eps;
                off += 1;
            }
        }
        for (m, gi) in g.inputs.iter().enumerate() {
            for (row, &i) in idx.iter().enumerate() {
                for (o, v) in grad_data[m].row_mut(i).iter_mut().zip(gi.row(row)) {
                    *o -= eta * v.eps;
                }
            }
        }
        for (a, &i) in idx.iter().enumerate() {
            for (c, &j) in idx.iter().enumerate() {
                grad_sim[(i, j)] -= eta * g.targets[(a, c)].eps;
            }
        }
        adj = next;
    }

    let raw = syn.raw_similarity();
    let masked = Mat::from_fn(n, n, |i, j| {
        let v = raw[(i, j)];
        if v > TARGET_EPS && v < 1.0 - TARGET_EPS {
            grad_sim[(i, j)]
        } else {
            0.0
        }
    });
    let alpha = syn.sim_scale;
    let sim_a = masked.matmul(&syn.sim_b)?.map(|v| alpha * v);
    let sim_b = masked.transpose().matmul(&syn.sim_a)?.map(|v| alpha * v);
    Ok(MetaGradient {
        data: grad_data,
        sim_a,
        sim_b,
        log_lr: eta * grad_eta,
        matching_loss: report.value,
    })
}

/// Momentum-SGD states for the three outer parameter groups.
#[derive(Clone, Debug)]
pub struct OuterOptimizer {
    data: SgdState,
    sim: SgdState,
    lr: SgdState,
}

impl OuterOptimizer {
    pub fn new(cfg: &DistillConfig) -> Result<Self> {
        Ok(Self {
            data: SgdState::new(cfg.lr_data, cfg.momentum)?,
            sim: SgdState::new(cfg.lr_sim, cfg.momentum)?,
            lr: SgdState::new(cfg.lr_lr, cfg.momentum)?,
        })
    }
}

/// Applies one outer update. Groups with a zero learning rate are left bit-identical.
pub fn outer_step(syn: &SyntheticSet, grad: &MetaGradient, opt: &mut OuterOptimizer, learn_similarity: bool) -> Result<SyntheticSet> {
    if !grad.all_finite() {
        return Err(Error::NonFinite("meta-gradient".into()));
    }
    let mut out = syn.clone();
    if opt.data.learning_rate > 0.0 {
        let mut flat: Vec<f64> = out.modalities.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
        let g: Vec<f64> = grad.data.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
        opt.data.step(&mut flat, &g)?;
        let mut off = 0;
        for m in &mut out.modalities {
            let len = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&flat[off..off + len]);
            off += len;
        }
    }
    if learn_similarity && opt.sim.learning_rate > 0.0 {
        let mut flat: Vec<f64> = out.sim_a.as_slice().iter().chain(out.sim_b.as_slice()).copied().collect();
        let g: Vec<f64> = grad.sim_a.as_slice().iter().chain(grad.sim_b.as_slice()).copied().collect();
        opt.sim.step(&mut flat, &g)?;
        let na = out.sim_a.as_slice().len();
        out.sim_a.as_mut_slice().copy_from_slice(&flat[..na]);
        out.sim_b.as_mut_slice().copy_from_slice(&flat[na..]);
    }
    if opt.lr.learning_rate > 0.0 {
        let mut log_lr = [out.student_lr.ln()];
        opt.lr.step(&mut log_lr, &[grad.log_lr])?;
        out.student_lr = log_lr[0].exp();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub matching_loss: f64,
    pub eta: f64,
    pub segment_traj: usize,
    pub segment_start: usize,
    pub skipped: bool,
    pub components: Vec<(String, f64)>,
}

/// Draws a segment whose teacher moved on every branch, within the attempt budget.
fn sample_valid_segment(
    buffer: &[ExpertTrajectory],
    cfg: &DistillConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TeacherSegment> {
    let mut last = None;
    for _ in 0..SEGMENT_ATTEMPTS {
        let s = sample_segment(buffer, cfg.max_start_epoch, cfg.expert_epochs, rng)?;
        match teacher_motion(&s) {
            Ok(_) => return Ok(s),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

fn recoverable(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::DegenerateSpectrum { .. } | Error::Normalization { .. })
}

/// Outer loop from a given starting set.
pub fn distill_from(
    mut syn: SyntheticSet,
    buffer: &[ExpertTrajectory],
    cfg: &DistillConfig,
) -> Result<(SyntheticSet, Vec<IterationRecord>)> {
    cfg.validate()?;
    let objective = cfg.method.objective(&syn.names)?;
    objective.validate(syn.k())?;
    if let Some(t) = buffer.first() {
        let h = &t.checkpoints[0];
        if h.d_in() != syn.d_in() {
            return Err(Error::Dimension(format!(
                "buffer heads take inputs {:?}, synthetic set has {:?}",
                h.d_in(),
                syn.d_in()
            )));
        }
    }
    let mut seg_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    seg_rng.set_stream(SEGMENT_STREAM);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(BATCH_STREAM);
    let mut opt = OuterOptimizer::new(cfg)?;
    let mut log = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let segment = sample_valid_segment(buffer, cfg, &mut seg_rng)?;
        let eta = syn.student_lr;
        let jitter = step_seed(cfg.seed, iter, usize::MAX);
        let attempt = student_rollout(&segment.start, &syn, cfg, &objective, &mut batch_rng, jitter).and_then(|tape| {
            let g = meta_gradient(&syn, &tape, &segment, cfg, &objective)?;
            let next = outer_step(&syn, &g, &mut opt, cfg.method.learns_similarity())?;
            Ok((tape, g, next))
        });
        let mut record = IterationRecord {
            iter,
            matching_loss: f64::NAN,
            eta,
            segment_traj: segment.trajectory,
            segment_start: segment.start_epoch,
            skipped: false,
            components: Vec::new(),
        };
        match attempt {
            Ok((tape, g, next)) => {
                record.matching_loss = g.matching_loss;
                record.components = tape.components;
                syn = next;
            }
            Err(e) if recoverable(&e) => record.skipped = true,
            Err(e) => return Err(e),
        }
        log.push(record);
    }
    Ok((syn, log))
}

/// Initializes from a seeded real subset and runs `cfg.iterations` outer steps.
pub fn distill(
    ds: &OmniDataset,
    buffer: &[ExpertTrajectory],
    cfg: &DistillConfig,
) -> Result<(SyntheticSet, Vec<IterationRecord>)> {
    let syn = init_synthetic(ds, cfg, cfg.seed)?;
    distill_from(syn, buffer, cfg)
}

/// Same pipeline with the inner objective of `method`.
pub fn distill_baseline(
    method: Method,
    ds: &OmniDataset,
    buffer: &[ExpertTrajectory],
    cfg: &DistillConfig,
) -> Result<(SyntheticSet, Vec<IterationRecord>)> {
    distill(ds, buffer, &DistillConfig { method, ..cfg.clone() })
}

pub fn log_csv(method: Method, log: &[IterationRecord]) -> String {
    let names: Vec<String> = log
        .iter()
        .find(|r| !r.components.is_empty())
        .map(|r| r.components.iter().map(|(k, _)| k.clone()).collect())
        .unwrap_or_default();
    let mut out = format!("# method={method}\niter,matching_loss,eta,segment_traj,segment_start,skipped");
    for n in &names {
        out.push_str(&format!(",comp_{n}"));
    }
    out.push('\n');
    for r in log {
        out.push_str(&format!(
            "{},{:e},{:e},{},{},{}",
            r.iter,
            r.matching_loss,
            r.eta,
            r.segment_traj,
            r.segment_start,
            u8::from(r.skipped)
        ));
        for n in &names {
            let v = r.components.iter().find(|(k, _)| k == n).map_or(f64::NAN, |c| c.1);
            out.push_str(&format!(",{v:e}"));
        }
        out.push('\n');
    }
    out
}

pub fn encode_synthetic(syn: &SyntheticSet) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.begin_section();
    w.u32(VERSION);
    w.u64(syn.n() as u64);
    w.u32(syn.k() as u32);
    w.u64(syn.rank() as u64);
    for (name, m) in syn.names.iter().zip(&syn.modalities) {
        w.string(name);
        w.u64(m.cols() as u64);
    }
    w.end_section();
    for m in &syn.modalities {
        w.begin_section();
        w.f64s(m.as_slice());
        w.end_section();
    }
    for f in [&syn.sim_a, &syn.sim_b] {
        w.begin_section();
        w.f64s(f.as_slice());
        w.end_section();
    }
    w.begin_section();
    w.f64(syn.sim_scale);
    w.f64(syn.student_lr);
    w.end_section();
    w.finish()
}

pub fn decode_synthetic(bytes: &[u8]) -> Result<SyntheticSet> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    r.begin_section();
    r.version(VERSION)?;
    let n = r.len()?;
    let k = r.u32()? as usize;
    let rank = r.len()?;
    let mut names = Vec::with_capacity(k);
    let mut dims = Vec::with_capacity(k);
    for _ in 0..k {
        names.push(r.string()?);
        dims.push(r.len()?);
    }
    r.end_section("header")?;
    let mut modalities = Vec::with_capacity(k);
    for (m, &din) in dims.iter().enumerate() {
        r.begin_section();
        let data = r.f64s(n.checked_mul(din).ok_or_else(|| Error::Format("payload size overflows".into()))?)?;
        r.end_section(&format!("modality {} payload", names[m]))?;
        modalities.push(Mat::from_vec(n, din, data)?);
    }
    let mut factor = |label: &str| -> Result<Mat<f64>> {
        r.begin_section();
        let data = r.f64s(n.checked_mul(rank).ok_or_else(|| Error::Format("factor size overflows".into()))?)?;
        r.end_section(label)?;
        Mat::from_vec(n, rank, data)
    };
    let sim_a = factor("similarity factor A")?;
    let sim_b = factor("similarity factor B")?;
    r.begin_section();
    let sim_scale = r.f64()?;
    let student_lr = r.f64()?;
    r.end_section("scalars")?;
    r.finish()?;
    if !(student_lr > 0.0) {
        return Err(Error::Format(format!("student step size {student_lr} is not positive")));
    }
    Ok(SyntheticSet {
        names,
        modalities,
        sim_a,
        sim_b,
        sim_scale,
        student_lr,
    })
}

pub fn save_synthetic(syn: &SyntheticSet, path: &Path) -> Result<()> {
    write_atomic(path, &encode_synthetic(syn))
}

pub fn load_synthetic(path: &Path) -> Result<SyntheticSet> {
    decode_synthetic(&std::fs::read(path)?)
}
