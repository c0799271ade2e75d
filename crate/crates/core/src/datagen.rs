//! Synthetic omnimodal embedding datasets with planted cross-modal semantics, and the
//! `OMDS` on-disk format.
//!
//! Every instance has a latent vector drawn around its class centroid. Each modality
//! observes it through a fixed linear view, a shared base map plus a modality-specific
//! distortion, followed by additive noise and row normalization. Train and test
//! splits drawn from one seed share centroids and views.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::binio::{write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::objectives::{AUDIO, TEXT, VIDEO};
use crate::scalar::norm;

const MAGIC: &[u8; 4] = b"OMDS";
const VERSION: u32 = 1;
const UNLABELED: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub n: usize,
    pub modality_names: Vec<String>,
    pub d_in: Vec<usize>,
    pub latent_dim: usize,
    pub num_classes: usize,
    pub within_class_spread: f64,
    /// Scale of each modality's private distortion of the shared view.
    pub view_distortion: f64,
    pub modality_noise: Vec<f64>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            modality_names: vec![VIDEO.into(), TEXT.into(), AUDIO.into()],
            d_in: vec![48, 32, 40],
            latent_dim: 12,
            num_classes: 20,
            within_class_spread: 0.6,
            view_distortion: 0.8,
            modality_noise: vec![0.5, 0.6, 0.7],
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn k(&self) -> usize {
        self.d_in.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 modalities, got {k}")));
        }
        if self.modality_names.len() != k || self.modality_noise.len() != k {
            return Err(Error::Dimension(format!(
                "{k} input dims but {} names and {} noise levels",
                self.modality_names.len(),
                self.modality_noise.len()
            )));
        }
        let min_din = *self.d_in.iter().min().expect("k ≥ 2");
        if self.latent_dim == 0 || self.latent_dim > min_din {
            return Err(Error::InvalidArgument(format!(
                "latent_dim {} must be in 1..={min_din}",
                self.latent_dim
            )));
        }
        if self.num_classes == 0 || self.num_classes > self.n {
            return Err(Error::InvalidArgument(format!(
                "num_classes {} must be in 1..={}",
                self.num_classes, self.n
            )));
        }
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(self.within_class_spread) || !nonneg(self.view_distortion) || !self.modality_noise.iter().all(|&v| nonneg(v)) {
            return Err(Error::InvalidArgument("spread, distortion and noise must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OmniDataset {
    pub names: Vec<String>,
    /// Per modality `N×d_in(m)`, row `i` of every modality is instance `i`.
    pub modalities: Vec<Mat<f64>>,
    pub labels: Vec<Option<u32>>,
    /// Not stored on disk.
    pub split: Option<Split>,
}

impl OmniDataset {
    pub fn new(names: Vec<String>, modalities: Vec<Mat<f64>>, labels: Vec<Option<u32>>, split: Option<Split>) -> Result<Self> {
        if modalities.is_empty() || names.len() != modalities.len() {
            return Err(Error::Dimension(format!(
                "{} names for {} modalities",
                names.len(),
                modalities.len()
            )));
        }
        let n = modalities[0].rows();
        if modalities.iter().any(|m| m.rows() != n) || labels.len() != n {
            return Err(Error::Dimension("modalities and labels must share N".into()));
        }
        Ok(Self {
            names,
            modalities,
            labels,
            split,
        })
    }

    pub fn n(&self) -> usize {
        self.modalities[0].rows()
    }

    pub fn k(&self) -> usize {
        self.modalities.len()
    }

    pub fn d_in(&self) -> Vec<usize> {
        self.modalities.iter().map(Mat::cols).collect()
    }

    /// Instances `idx`, in that order, aligned across modalities.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            names: self.names.clone(),
            modalities: self.modalities.iter().map(|m| m.select_rows(idx)).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }

    /// Per-modality batch matrices for `idx`.
    pub fn batch(&self, idx: &[usize]) -> Vec<Mat<f64>> {
        self.modalities.iter().map(|m| m.select_rows(idx)).collect()
    }
}

fn normal_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
    Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Draws one split. Both splits of a seed share class centroids and modality views.
pub fn generate(cfg: &GeneratorConfig, split: Split) -> Result<OmniDataset> {
    cfg.validate()?;
    let (k, l) = (cfg.k(), cfg.latent_dim);
    let max_din = *cfg.d_in.iter().max().expect("validated");

    let mut world = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centroids = normal_mat(&mut world, cfg.num_classes, l);
    let base = normal_mat(&mut world, max_din, l);
    let views: Vec<Mat<f64>> = cfg
        .d_in
        .iter()
        .map(|&din| {
            let private = normal_mat(&mut world, din, l);
            let inv = 1.0 / (l as f64).sqrt();
            Mat::from_fn(din, l, |r, c| inv * (base[(r, c)] + cfg.view_distortion * private[(r, c)]))
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(split.stream());
    let mut modalities: Vec<Mat<f64>> = cfg.d_in.iter().map(|&din| Mat::zeros(cfg.n, din)).collect();
    let mut labels = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let class = i % cfg.num_classes;
        labels.push(Some(class as u32));
        let latent: Vec<f64> = centroids
            .row(class)
            .iter()
            .map(|&c| c + cfg.within_class_spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for m in 0..k {
            let mut x = views[m].matvec(&latent);
            for v in &mut x {
                *v += cfg.modality_noise[m] * rng.sample::<f64, _>(StandardNormal);
            }
            let nx = norm(&x);
            if !(nx > 1e-12) {
                return Err(Error::Normalization { modality: m, norm: nx });
            }
            for (o, v) in modalities[m].row_mut(i).iter_mut().zip(&x) {
                *o = v / nx;
            }
        }
    }
    OmniDataset::new(cfg.modality_names.clone(), modalities, labels, Some(split))
}

/// Seeded uniform subset of size `n` without replacement, kept in index order.
pub fn sample_real_subset(ds: &OmniDataset, n: usize, seed: u64) -> Result<OmniDataset> {
    if n > ds.n() {
        return Err(Error::InvalidArgument(format!("subset of {n} requested from {} instances", ds.n())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, ds.n(), n).into_vec();
    idx.sort_unstable();
    Ok(ds.subset(&idx))
}

pub fn encode_dataset(ds: &OmniDataset) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u64(ds.n() as u64);
    w.u32(ds.k() as u32);
    for (name, m) in ds.names.iter().zip(&ds.modalities) {
        w.string(name);
        w.u64(m.cols() as u64);
    }
    for m in &ds.modalities {
        w.begin_section();
        w.f64s(m.as_slice());
        w.end_section();
    }
    w.begin_section();
    for l in &ds.labels {
        w.u32(l.unwrap_or(UNLABELED));
    }
    w.end_section();
    w.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<OmniDataset> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let n = r.len()?;
    let k = r.u32()? as usize;
    let mut names = Vec::with_capacity(k);
    let mut dims = Vec::with_capacity(k);
    for _ in 0..k {
        names.push(r.string()?);
        dims.push(r.len()?);
    }
    let mut modalities = Vec::with_capacity(k);
    for (m, &din) in dims.iter().enumerate() {
        r.begin_section();
        let count = n
            .checked_mul(din)
            .ok_or_else(|| Error::Format(format!("modality {m} payload size overflows")))?;
        let data = r.f64s(count)?;
        r.end_section(&format!("modality {} payload", names[m]))?;
        modalities.push(Mat::from_vec(n, din, data)?);
    }
    r.begin_section();
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let l = r.u32()?;
        labels.push((l != UNLABELED).then_some(l));
    }
    r.end_section("labels")?;
    r.finish()?;
    OmniDataset::new(names, modalities, labels, None)
}

pub fn write_dataset(ds: &OmniDataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode_dataset(ds))
}

pub fn read_dataset(path: &Path) -> Result<OmniDataset> {
    decode_dataset(&std::fs::read(path)?)
}

/// Mean cross-modal cosine between instances of the same class (excluding the
/// instance itself) and between instances of different classes, after keeping the
/// first `d` input coordinates of every modality, which all views share.
pub fn class_margin(ds: &OmniDataset, d: usize) -> Result<(f64, f64)> {
    let emb = truncated_embeddings(ds, d)?;
    let labels: Vec<u32> = ds
        .labels
        .iter()
        .map(|l| l.ok_or_else(|| Error::InvalidArgument("class margin needs labels".into())))
        .collect::<Result<_>>()?;
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for a in 0..ds.k() {
        for b in 0..ds.k() {
            if a == b {
                continue;
            }
            for i in 0..ds.n() {
                for j in 0..ds.n() {
                    if i == j {
                        continue;
                    }
                    let c = crate::scalar::dot(emb[a].row(i), emb[b].row(j));
                    if labels[i] == labels[j] {
                        within += c;
                        nw += 1;
                    } else {
                        between += c;
                        nb += 1;
                    }
                }
            }
        }
    }
    if nw == 0 || nb == 0 {
        return Err(Error::InvalidArgument("need both same-class and cross-class pairs".into()));
    }
    Ok((within / nw as f64, between / nb as f64))
}

/// Rows restricted to the first `d` coordinates and renormalized.
pub fn truncated_embeddings(ds: &OmniDataset, d: usize) -> Result<Vec<Mat<f64>>> {
    if d == 0 || ds.d_in().iter().any(|&din| din < d) {
        return Err(Error::Dimension(format!("cannot truncate dims {:?} to {d}", ds.d_in())));
    }
    ds.modalities
        .iter()
        .enumerate()
        .map(|(m, x)| {
            let mut out = Mat::from_fn(x.rows(), d, |i, j| x[(i, j)]);
            for i in 0..x.rows() {
                let nr = norm(out.row(i));
                if !(nr > 1e-12) {
                    return Err(Error::Normalization { modality: m, norm: nr });
                }
                out.row_mut(i).iter_mut().for_each(|v| *v /= nr);
            }
            Ok(out)
        })
        .collect()
}
