//! Train-from-scratch evaluation: fresh heads trained on a coreset or synthetic set,
//! then cross-modal retrieval recall on held-out data.

use std::fmt::Write as _;
use std::thread;

use crate::buffer::train_heads;
use crate::datagen::{sample_real_subset, OmniDataset};
use crate::distill::SyntheticSet;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::ProjectionHeads;
use crate::objectives::{InnerObjective, LossConfig, SimilarityTargets};
use crate::scalar::dot;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Shared embedding dimension of the fresh heads.
    pub d: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Step size used for real coresets; synthetic sets bring their own.
    pub lr_teacher: f64,
    pub loss: LossConfig,
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            d: 16,
            epochs: 10,
            batch_size: 128,
            lr_teacher: 0.01,
            loss: LossConfig::default(),
            ks: DEFAULT_KS.to_vec(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.d == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("d and batch_size must be ≥ 1".into()));
        }
        if !(self.lr_teacher >= 0.0) || !self.lr_teacher.is_finite() {
            return Err(Error::InvalidArgument(format!("lr_teacher must be finite and ≥ 0, got {}", self.lr_teacher)));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::InvalidArgument(format!("recall cutoffs must be ≥ 1, got {:?}", self.ks)));
        }
        Ok(())
    }
}

/// What a student is trained on.
#[derive(Clone, Copy, Debug)]
pub enum TrainingSet<'a> {
    /// Real instances with identity targets, trained at `lr_teacher`.
    Coreset(&'a OmniDataset),
    /// Synthetic instances with their learned similarity, trained at their own step size.
    Synthetic(&'a SyntheticSet),
}

impl TrainingSet<'_> {
    pub fn names(&self) -> &[String] {
        match self {
            Self::Coreset(ds) => &ds.names,
            Self::Synthetic(s) => &s.names,
        }
    }

    fn parts(&self, cfg: &EvalConfig) -> Result<(&[Mat<f64>], SimilarityTargets, f64)> {
        match self {
            Self::Coreset(ds) => Ok((&ds.modalities, SimilarityTargets::identity(ds.n()), cfg.lr_teacher)),
            Self::Synthetic(s) => Ok((&s.modalities, SimilarityTargets::learned(&s.raw_similarity())?, s.student_lr)),
        }
    }
}

/// Fresh heads seeded by `seed`, trained for `cfg.epochs`. Returns the heads and the
/// mean loss per epoch.
pub fn train_student(
    set: TrainingSet<'_>,
    objective: &InnerObjective,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<(ProjectionHeads, Vec<f64>)> {
    cfg.validate()?;
    let (modalities, targets, lr) = set.parts(cfg)?;
    if modalities.is_empty() || modalities[0].rows() == 0 {
        return Err(Error::InvalidArgument("cannot train a student on an empty set".into()));
    }
    objective.validate(modalities.len())?;
    let d_in: Vec<usize> = modalities.iter().map(Mat::cols).collect();
    let init = ProjectionHeads::init(cfg.d, &d_in, seed)?;
    let (mut checkpoints, losses) = train_heads(
        modalities,
        &targets,
        init,
        lr,
        cfg.epochs,
        cfg.batch_size,
        &cfg.loss,
        objective,
        seed,
    )?;
    Ok((checkpoints.pop().expect("initial checkpoint"), losses))
}

/// Recall of one directed pair, one value per cutoff, in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecall {
    pub query: usize,
    pub candidate: usize,
    pub recall: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub names: Vec<String>,
    pub ks: Vec<usize>,
    pub pairs: Vec<PairRecall>,
    /// Mean over pairs, per cutoff.
    pub average: Vec<f64>,
    pub queries: usize,
}

impl RetrievalReport {
    pub fn pair_label(&self, p: &PairRecall) -> String {
        format!("{}->{}", self.names[p.query], self.names[p.candidate])
    }

    /// Average recall at cutoff `k`, if it was measured.
    pub fn average_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&c| c == k).map(|i| self.average[i])
    }
}

/// Zero-based rank of the true match `i` among candidates for query row `i`: candidates
/// scoring strictly higher come first, and equal scores are ordered by index.
pub fn true_match_rank(scores: &[f64], i: usize) -> usize {
    let own = scores[i];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > own || (s == own && j < i))
        .count()
}

/// Recall for every directed pair of per-modality `n×d` embeddings, scored by inner
/// product (cosine for unit rows).
pub fn recall_from_embeddings(names: &[String], emb: &[Mat<f64>], ks: &[usize]) -> Result<RetrievalReport> {
    let k = emb.len();
    if k < 2 || names.len() != k {
        return Err(Error::Dimension(format!("{k} embedding blocks for {} modality names", names.len())));
    }
    let n = emb[0].rows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty modality in test data".into()));
    }
    if emb.iter().any(|e| e.rows() != n || e.cols() != emb[0].cols()) {
        return Err(Error::Dimension("embedding blocks differ in shape".into()));
    }
    if let Some(&bad) = ks.iter().find(|&&c| c == 0 || c > n) {
        return Err(Error::InvalidArgument(format!("cutoff {bad} outside 1..={n}")));
    }
    let mut pairs = Vec::with_capacity(k * (k - 1));
    for a in 0..k {
        for b in 0..k {
            if a == b {
                continue;
            }
            let mut hits = vec![0usize; ks.len()];
            let mut scores = vec![0.0; n];
            for i in 0..n {
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = dot(emb[a].row(i), emb[b].row(j));
                }
                let rank = true_match_rank(&scores, i);
                for (h, &c) in hits.iter_mut().zip(ks) {
                    *h += usize::from(rank < c);
                }
            }
            let recall = hits.iter().map(|&h| 100.0 * h as f64 / n as f64).collect();
            pairs.push(PairRecall {
                query: a,
                candidate: b,
                recall,
            });
        }
    }
    let average = (0..ks.len())
        .map(|c| pairs.iter().map(|p| p.recall[c]).sum::<f64>() / pairs.len() as f64)
        .collect();
    Ok(RetrievalReport {
        names: names.to_vec(),
        ks: ks.to_vec(),
        pairs,
        average,
        queries: n,
    })
}

/// Per-modality `n×d` matrix of normalized embeddings.
pub fn encode(heads: &ProjectionHeads, ds: &OmniDataset) -> Result<Vec<Mat<f64>>> {
    let enc = heads.forward_batch(&ds.modalities)?;
    Ok((0..heads.k())
        .map(|m| Mat::from_fn(ds.n(), heads.d(), |i, j| enc.z[i][(m, j)]))
        .collect())
}

pub fn retrieval_recall(heads: &ProjectionHeads, test: &OmniDataset, ks: &[usize]) -> Result<RetrievalReport> {
    if test.k() != heads.k() {
        return Err(Error::Dimension(format!("test has {} modalities, heads {}", test.k(), heads.k())));
    }
    recall_from_embeddings(&test.names, &encode(heads, test)?, ks)
}

/// Mean and population standard deviation of every cell over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<RetrievalReport>,
    pub mean: RetrievalReport,
    pub std: RetrievalReport,
}

impl ProtocolReport {
    fn aggregate(seeds: Vec<u64>, runs: Vec<RetrievalReport>) -> Self {
        let first = &runs[0];
        let count = runs.len() as f64;
        let cell = |f: &dyn Fn(&RetrievalReport) -> f64| {
            let xs: Vec<f64> = runs.iter().map(f).collect();
            let mean = xs.iter().sum::<f64>() / count;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / count;
            (mean, var.sqrt())
        };
        let mut mean = first.clone();
        let mut std = first.clone();
        for (p, pair) in first.pairs.iter().enumerate() {
            for c in 0..pair.recall.len() {
                let (m, s) = cell(&|r| r.pairs[p].recall[c]);
                mean.pairs[p].recall[c] = m;
                std.pairs[p].recall[c] = s;
            }
        }
        for c in 0..first.average.len() {
            let (m, s) = cell(&|r| r.average[c]);
            mean.average[c] = m;
            std.average[c] = s;
        }
        Self { seeds, runs, mean, std }
    }

    /// Rows per directed pair plus `Avg`, mean and std per cutoff, one decimal.
    pub fn to_csv(&self) -> String {
        let m = &self.mean;
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut out = format!("# modalities={} seeds={} queries={}\npair", m.names.join(","), seeds.join(","), m.queries);
        for k in &m.ks {
            let _ = write!(out, ",R@{k}_mean,R@{k}_std");
        }
        out.push('\n');
        let mut row = |label: String, means: &[f64], stds: &[f64]| {
            out.push_str(&label);
            for (mu, sd) in means.iter().zip(stds) {
                let _ = write!(out, ",{mu:.1},{sd:.1}");
            }
            out.push('\n');
        };
        for (p, s) in m.pairs.iter().zip(&self.std.pairs) {
            row(m.pair_label(p), &p.recall, &s.recall);
        }
        row("Avg".into(), &m.average, &self.std.average);
        out
    }
}

/// Trains and evaluates one student per seed, concurrently, and aggregates.
pub fn evaluate_protocol(
    set: TrainingSet<'_>,
    test: &OmniDataset,
    objective: &InnerObjective,
    cfg: &EvalConfig,
    seeds: &[u64],
) -> Result<ProtocolReport> {
    evaluate_seeds(test, cfg, seeds, |seed| train_student(set, objective, cfg, seed))
}

/// A seeded real subset of size `n` per seed, trained with identity targets.
pub fn random_coreset_eval(
    train: &OmniDataset,
    test: &OmniDataset,
    n: usize,
    objective: &InnerObjective,
    cfg: &EvalConfig,
    seeds: &[u64],
) -> Result<ProtocolReport> {
    evaluate_seeds(test, cfg, seeds, |seed| {
        let core = sample_real_subset(train, n, seed)?;
        train_student(TrainingSet::Coreset(&core), objective, cfg, seed)
    })
}

fn evaluate_seeds<F>(test: &OmniDataset, cfg: &EvalConfig, seeds: &[u64], train: F) -> Result<ProtocolReport>
where
    F: Fn(u64) -> Result<(ProjectionHeads, Vec<f64>)> + Sync,
{
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one evaluation seed is required".into()));
    }
    cfg.validate()?;
    let runs: Vec<Result<RetrievalReport>> = thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let train = &train;
                scope.spawn(move || {
                    let (heads, _) = train(seed)?;
                    retrieval_recall(&heads, test, &cfg.ks)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(ProtocolReport::aggregate(seeds.to_vec(), runs))
}
