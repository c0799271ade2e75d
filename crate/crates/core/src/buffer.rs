//! Expert trajectories: heads trained on real data with per-epoch snapshots, the
//! `OMTB` buffer format, and teacher-segment sampling.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{write_atomic, ByteReader, ByteWriter};
use crate::datagen::OmniDataset;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{loss_and_gradients, sgd_step, ProjectionHeads, SgdState};
use crate::objectives::{InnerObjective, LossConfig, SimilarityTargets};

const MAGIC: &[u8; 4] = b"OMTB";
const VERSION: u32 = 1;
/// RNG stream reserved for expert mini-batch shuffling.
const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertConfig {
    /// Shared embedding dimension of the heads.
    pub d: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_teacher: f64,
    pub loss: LossConfig,
    pub objective: InnerObjective,
    pub num_experts: usize,
    pub seed_base: u64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            d: 16,
            epochs: 10,
            batch_size: 128,
            lr_teacher: 0.01,
            loss: LossConfig::default(),
            objective: InnerObjective::hopa(),
            num_experts: 20,
            seed_base: 0,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.d == 0 || self.batch_size == 0 || self.num_experts == 0 {
            return Err(Error::InvalidArgument("d, batch_size and num_experts must be ≥ 1".into()));
        }
        if !(self.lr_teacher >= 0.0) || !self.lr_teacher.is_finite() {
            return Err(Error::InvalidArgument(format!("lr_teacher must be finite and ≥ 0, got {}", self.lr_teacher)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertTrajectory {
    pub seed: u64,
    /// `checkpoints[e]` are the heads after `e` epochs; index 0 is the initialization.
    pub checkpoints: Vec<ProjectionHeads>,
}

impl ExpertTrajectory {
    pub fn epochs(&self) -> usize {
        self.checkpoints.len() - 1
    }
}

#[derive(Clone, Debug)]
pub struct TeacherSegment {
    pub trajectory: usize,
    pub start_epoch: usize,
    pub span: usize,
    pub start: ProjectionHeads,
    pub target: ProjectionHeads,
}

/// Jitter seed for one optimization step, distinct across runs, epochs and steps.
pub(crate) fn step_seed(run: u64, epoch: usize, step: usize) -> u64 {
    let mut h = run.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    h ^= (epoch as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= (step as u64).wrapping_mul(0x94D0_49BB_1331_11EB);
    h
}

/// Mini-batch SGD on a fixed dataset with given targets; one snapshot per epoch.
/// Returns the checkpoints and the mean training loss of every epoch.
pub(crate) fn train_heads(
    ds_modalities: &[Mat<f64>],
    targets: &SimilarityTargets,
    init: ProjectionHeads,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    loss: &LossConfig,
    objective: &InnerObjective,
    seed: u64,
) -> Result<(Vec<ProjectionHeads>, Vec<f64>)> {
    let n = ds_modalities[0].rows();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..n).collect();
    let mut heads = init;
    let mut checkpoints = vec![heads.clone()];
    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut opt = SgdState::new(lr, 0.0)?;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (step, idx) in order.chunks(batch_size).enumerate() {
            let xs: Vec<Mat<f64>> = ds_modalities.iter().map(|m| m.select_rows(idx)).collect();
            let t = targets.sub_block(idx);
            let g = loss_and_gradients(&heads, &xs, t.entries(), loss, objective, step_seed(seed, epoch, step))
                .map_err(|e| with_context(e, epoch, step))?;
            if !g.value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, step {step}")));
            }
            total += g.value;
            batches += 1;
            heads = sgd_step(&heads, &g.weights, &mut opt).map_err(|e| with_context(e, epoch, step))?;
        }
        epoch_losses.push(total / batches as f64);
        checkpoints.push(heads.clone());
    }
    Ok((checkpoints, epoch_losses))
}

fn with_context(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}, step {step}")),
        other => other,
    }
}

/// One expert run on the full real dataset with identity targets.
pub fn train_expert(ds: &OmniDataset, cfg: &ExpertConfig, seed: u64) -> Result<(ExpertTrajectory, Vec<f64>)> {
    cfg.validate()?;
    cfg.objective.validate(ds.k())?;
    let init = ProjectionHeads::init(cfg.d, &ds.d_in(), seed)?;
    let targets = SimilarityTargets::identity(ds.n());
    let (checkpoints, losses) = train_heads(
        &ds.modalities,
        &targets,
        init,
        cfg.lr_teacher,
        cfg.epochs,
        cfg.batch_size,
        &cfg.loss,
        &cfg.objective,
        seed,
    )?;
    Ok((ExpertTrajectory { seed, checkpoints }, losses))
}

/// `num_experts` independent runs seeded `seed_base + run`.
pub fn build_buffer(ds: &OmniDataset, cfg: &ExpertConfig) -> Result<Vec<ExpertTrajectory>> {
    cfg.validate()?;
    (0..cfg.num_experts as u64)
        .map(|r| train_expert(ds, cfg, cfg.seed_base.wrapping_add(r)).map(|(t, _)| t))
        .collect()
}

/// Uniform over trajectories and start epochs `0..=max_start_epoch`.
pub fn sample_segment(
    buffer: &[ExpertTrajectory],
    max_start_epoch: usize,
    expert_epochs: usize,
    rng: &mut impl Rng,
) -> Result<TeacherSegment> {
    if buffer.is_empty() {
        return Err(Error::InvalidArgument("empty expert buffer".into()));
    }
    if expert_epochs == 0 {
        return Err(Error::InvalidArgument("expert_epochs must be ≥ 1".into()));
    }
    let shortest = buffer.iter().map(ExpertTrajectory::epochs).min().expect("nonempty");
    if max_start_epoch + expert_epochs > shortest {
        return Err(Error::InvalidArgument(format!(
            "max_start_epoch {max_start_epoch} + expert_epochs {expert_epochs} exceeds {shortest} recorded epochs"
        )));
    }
    let trajectory = rng.random_range(0..buffer.len());
    let start_epoch = rng.random_range(0..=max_start_epoch);
    let t = &buffer[trajectory];
    Ok(TeacherSegment {
        trajectory,
        start_epoch,
        span: expert_epochs,
        start: t.checkpoints[start_epoch].clone(),
        target: t.checkpoints[start_epoch + expert_epochs].clone(),
    })
}

pub fn encode_buffer(buffer: &[ExpertTrajectory]) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(buffer.len() as u32);
    for t in buffer {
        w.u64(t.seed);
        w.u32(t.epochs() as u32);
        for c in &t.checkpoints {
            for m in c.weights() {
                w.begin_section();
                w.u64(m.rows() as u64);
                w.u64(m.cols() as u64);
                w.f64s(m.as_slice());
                w.end_section();
            }
        }
    }
    w.finish()
}

/// Decodes a buffer whose heads have `k` modalities.
pub fn decode_buffer(bytes: &[u8], k: usize) -> Result<Vec<ExpertTrajectory>> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for ti in 0..count {
        let seed = r.u64()?;
        let epochs = r.u32()? as usize;
        let mut checkpoints = Vec::with_capacity(epochs + 1);
        for ci in 0..=epochs {
            let mut weights = Vec::with_capacity(k);
            for m in 0..k {
                r.begin_section();
                let rows = r.len()?;
                let cols = r.len()?;
                let count = rows
                    .checked_mul(cols)
                    .ok_or_else(|| Error::Format("checkpoint size overflows".into()))?;
                let data = r.f64s(count)?;
                r.end_section(&format!("trajectory {ti} checkpoint {ci} modality {m}"))?;
                weights.push(Mat::from_vec(rows, cols, data)?);
            }
            checkpoints.push(ProjectionHeads::new(weights)?);
        }
        if checkpoints.windows(2).any(|w| w[0].d_in() != w[1].d_in() || w[0].d() != w[1].d()) {
            return Err(Error::Format(format!("trajectory {ti} changes shape between checkpoints")));
        }
        out.push(ExpertTrajectory { seed, checkpoints });
    }
    r.finish()?;
    Ok(out)
}

pub fn save_buffer(buffer: &[ExpertTrajectory], path: &Path) -> Result<()> {
    write_atomic(path, &encode_buffer(buffer))
}

pub fn load_buffer(path: &Path, k: usize) -> Result<Vec<ExpertTrajectory>> {
    decode_buffer(&std::fs::read(path)?, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GeneratorConfig, Split};

    fn data() -> OmniDataset {
        generate(
            &GeneratorConfig {
                n: 64,
                num_classes: 8,
                ..GeneratorConfig::default()
            },
            Split::Train,
        )
        .unwrap()
    }

    fn cfg() -> ExpertConfig {
        ExpertConfig {
            epochs: 3,
            batch_size: 16,
            num_experts: 2,
            ..ExpertConfig::default()
        }
    }

    #[test]
    fn checkpoint_count_and_zero_lr() {
        let ds = data();
        let (t, losses) = train_expert(&ds, &cfg(), 1).unwrap();
        assert_eq!(t.checkpoints.len(), 4);
        assert_eq!(losses.len(), 3);
        assert_ne!(t.checkpoints[0], t.checkpoints[3]);
        let (t0, _) = train_expert(&ds, &ExpertConfig { lr_teacher: 0.0, ..cfg() }, 1).unwrap();
        assert!(t0.checkpoints.iter().all(|c| *c == t0.checkpoints[0]));
    }

    #[test]
    fn buffer_is_deterministic_and_roundtrips() {
        let ds = data();
        let b = build_buffer(&ds, &cfg()).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].seed, 1);
        assert_eq!(b, build_buffer(&ds, &cfg()).unwrap());
        let bytes = encode_buffer(&b);
        assert_eq!(decode_buffer(&bytes, 3).unwrap(), b);

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_buffer(&bad, 3), Err(Error::Version { found: 9, .. })));
        match decode_buffer(&bytes[..bytes.len() - 10], 3) {
            Err(Error::Truncated { expected, found, .. }) => assert!(found < expected),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn segments_respect_bounds() {
        let ds = data();
        let b = build_buffer(&ds, &cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let s = sample_segment(&b, 1, 2, &mut rng).unwrap();
            assert!(s.start_epoch <= 1);
            assert_eq!(s.target, b[s.trajectory].checkpoints[s.start_epoch + 2]);
        }
        let s = sample_segment(&b, 0, 1, &mut rng).unwrap();
        assert_eq!(s.start_epoch, 0);
        assert!(sample_segment(&b, 2, 2, &mut rng).is_err());
        assert!(sample_segment(&[], 0, 1, &mut rng).is_err());
    }
}
