//! Abnormality scores.
//!
//! Every Gaussian draw is keyed by `(seed, sample id, stream, role, draw)`,
//! so a score depends only on the sample, never on how samples are batched,
//! ordered or spread over threads.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::data::container::{load_container, save_container, Array};
use crate::data::ImageBatch;
use crate::diffusion::{Denoiser, SigmaSchedule};
use crate::distances::Distance;
use crate::error::{Error, Result};
use crate::projection::{project_single, Projector};
use crate::rng::{gaussian_rows, NoiseKey, Role};
use crate::tensor::Tensor;

/// Largest number of rows pushed through a model at once.
pub const MAX_ROWS: usize = 32;

pub const DEFAULT_N_ALPHA: usize = 40;
pub const DEFAULT_N_BETA: usize = 10;

pub const CIFAR_ENSEMBLE: [(usize, usize); 8] = [(7, 6), (7, 7), (8, 7), (8, 8), (9, 8), (9, 9), (10, 9), (10, 10)];
pub const SVHN_ENSEMBLE: [(usize, usize); 4] = [(10, 10), (11, 10), (11, 11), (12, 11)];

pub fn score_key(seed: u64, sample: u64, stream: u64, role: Role, draw: u64) -> NoiseKey {
    NoiseKey::new(seed, sample, stream, role, draw)
}

/// Noise stream of a timestep pair. Keyed by the pair itself, so a pair
/// listed twice sees the same noise and ensembles over disjoint sets add up.
pub fn pair_stream(alpha: usize, beta: usize) -> u64 {
    ((alpha as u64) << 32) | beta as u64
}

fn check_ids(x: &Tensor, ids: &[u64]) -> Result<()> {
    if ids.len() != x.rows() {
        return Err(Error::Shape(format!("{} ids for {} images", ids.len(), x.rows())));
    }
    Ok(())
}

fn check_count(name: &str, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument(format!("{} must be >= 1", name)));
    }
    Ok(())
}

/// Repeats each row of `x` `n` times, keeping repeats of a row adjacent.
fn repeat_rows(x: &Tensor, n: usize) -> Tensor {
    let idx: Vec<usize> = (0..x.rows()).flat_map(|r| std::iter::repeat_n(r, n)).collect();
    x.select_rows(&idx)
}

/// Projects row `r` of `x` with noise drawn from `keys[r]`, `MAX_ROWS` at a time.
pub fn project_keyed(p: &dyn Projector, x: &Tensor, i: usize, keys: &[NoiseKey]) -> Result<Tensor> {
    let shape = &x.shape()[1..];
    let mut parts = Vec::new();
    for (c, chunk) in x.chunks(MAX_ROWS).iter().enumerate() {
        let k = &keys[c * MAX_ROWS..c * MAX_ROWS + chunk.rows()];
        parts.push(p.project(chunk, i, &gaussian_rows(k, shape))?);
    }
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

fn distance_keyed(d: &dyn Distance, x: &Tensor, y: &Tensor, keys: &[NoiseKey]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.rows());
    for (c, (a, b)) in x.chunks(MAX_ROWS).iter().zip(y.chunks(MAX_ROWS)).enumerate() {
        let k = &keys[c * MAX_ROWS..c * MAX_ROWS + a.rows()];
        out.extend(d.distance(a, &b, k)?);
    }
    Ok(out)
}

fn group_means(v: &[f64], group: usize) -> Vec<f64> {
    v.chunks(group).map(|c| c.iter().sum::<f64>() / group as f64).collect()
}

/// `(1/n) Σ_k d(x, proj(x, i, z_k))` per row, with `z_k` keyed by the row's
/// id, stream `i`, role `Proj` and draw `k`.
pub fn score_projection(
    p: &dyn Projector,
    x: &Tensor,
    ids: &[u64],
    seed: u64,
    i: usize,
    d: &dyn Distance,
    n: usize,
) -> Result<Vec<f64>> {
    check_ids(x, ids)?;
    check_count("n", n)?;
    p.schedule().check_index(i)?;
    let keys: Vec<NoiseKey> = ids
        .iter()
        .flat_map(|&id| (0..n as u64).map(move |k| score_key(seed, id, i as u64, Role::Proj, k)))
        .collect();
    let xr = repeat_rows(x, n);
    let proj = project_keyed(p, &xr, i, &keys)?;
    Ok(group_means(&distance_keyed(d, &xr, &proj, &keys)?, n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrConfig {
    pub alpha: usize,
    pub beta: usize,
    pub n_alpha: usize,
    pub n_beta: usize,
    pub ensemble: Vec<(usize, usize)>,
}

impl Default for PrConfig {
    fn default() -> Self {
        PrConfig {
            alpha: 8,
            beta: 8,
            n_alpha: DEFAULT_N_ALPHA,
            n_beta: DEFAULT_N_BETA,
            ensemble: CIFAR_ENSEMBLE.to_vec(),
        }
    }
}

impl PrConfig {
    pub fn validate(&self, schedule: &SigmaSchedule) -> Result<()> {
        check_count("n_alpha", self.n_alpha)?;
        check_count("n_beta", self.n_beta)?;
        schedule.check_index(self.alpha)?;
        schedule.check_index(self.beta)?;
        for &(a, b) in &self.ensemble {
            schedule.check_index(a)?;
            schedule.check_index(b)?;
        }
        Ok(())
    }
}

/// Projection Regret for one pair, evaluated in batch:
///
/// * `dx`: mean of `d(x, Π^β(x, z))` over `n_α·n_β` draws,
/// * `y_j = Π^α(x, z_j)` for `j < n_α`,
/// * `dy`: mean over `j` and `n_β` inner draws of `d(y_j, Π^β(y_j, z))`,
///
/// and the score is `dx − dy`.
#[allow(clippy::too_many_arguments)]
pub fn score_pr(
    p: &dyn Projector,
    x: &Tensor,
    ids: &[u64],
    seed: u64,
    alpha: usize,
    beta: usize,
    n_alpha: usize,
    n_beta: usize,
    d: &dyn Distance,
) -> Result<Vec<f64>> {
    check_ids(x, ids)?;
    check_count("n_alpha", n_alpha)?;
    check_count("n_beta", n_beta)?;
    p.schedule().check_index(alpha)?;
    p.schedule().check_index(beta)?;
    let stream = pair_stream(alpha, beta);
    let nab = n_alpha * n_beta;

    let dx_keys: Vec<NoiseKey> = ids
        .iter()
        .flat_map(|&id| (0..nab as u64).map(move |r| score_key(seed, id, stream, Role::Dx, r)))
        .collect();
    let xr = repeat_rows(x, nab);
    let px = project_keyed(p, &xr, beta, &dx_keys)?;
    let dx = group_means(&distance_keyed(d, &xr, &px, &dx_keys)?, nab);

    let y_keys: Vec<NoiseKey> = ids
        .iter()
        .flat_map(|&id| (0..n_alpha as u64).map(move |j| score_key(seed, id, stream, Role::Y, j)))
        .collect();
    let y = project_keyed(p, &repeat_rows(x, n_alpha), alpha, &y_keys)?;

    let yp_keys: Vec<NoiseKey> = ids
        .iter()
        .flat_map(|&id| (0..nab as u64).map(move |r| score_key(seed, id, stream, Role::YProj, r)))
        .collect();
    let yr = repeat_rows(&y, n_beta);
    let py = project_keyed(p, &yr, beta, &yp_keys)?;
    let dy = group_means(&distance_keyed(d, &yr, &py, &yp_keys)?, nab);

    Ok(dx.iter().zip(&dy).map(|(a, b)| a - b).collect())
}

/// Unweighted sum of [`score_pr`] over the pairs of `cfg.ensemble`, in order.
pub fn score_pr_ensemble(
    p: &dyn Projector,
    x: &Tensor,
    ids: &[u64],
    seed: u64,
    cfg: &PrConfig,
    d: &dyn Distance,
) -> Result<Vec<f64>> {
    if cfg.ensemble.is_empty() {
        return Err(Error::InvalidArgument("ensemble set C is empty".into()));
    }
    let mut total = vec![0.0; x.rows()];
    for &(a, b) in &cfg.ensemble {
        let s = score_pr(p, x, ids, seed, a, b, cfg.n_alpha, cfg.n_beta, d)?;
        total.iter_mut().zip(s).for_each(|(t, v)| *t += v);
    }
    Ok(total)
}

/// Per-index estimates of `E_z ‖(π(x, z, t_i) − x)/t_i‖²`, one vector per row.
pub fn score_msma(
    m: &dyn Denoiser,
    x: &Tensor,
    ids: &[u64],
    seed: u64,
    indices: &[usize],
    n: usize,
) -> Result<Vec<Vec<f64>>> {
    check_ids(x, ids)?;
    check_count("n", n)?;
    if indices.is_empty() {
        return Err(Error::InvalidArgument("no noise levels given".into()));
    }
    let mut out = vec![Vec::with_capacity(indices.len()); x.rows()];
    let xr = repeat_rows(x, n);
    let shape = &x.shape()[1..];
    for &i in indices {
        m.schedule().check_index(i)?;
        let t = m.schedule().t(i);
        let keys: Vec<NoiseKey> = ids
            .iter()
            .flat_map(|&id| (0..n as u64).map(move |k| score_key(seed, id, i as u64, Role::Msma, k)))
            .collect();
        let mut vals = Vec::with_capacity(xr.rows());
        for (c, chunk) in xr.chunks(MAX_ROWS).iter().enumerate() {
            let k = &keys[c * MAX_ROWS..c * MAX_ROWS + chunk.rows()];
            let pi = project_single(m, chunk, i, &gaussian_rows(k, shape))?;
            let diff = pi.sub(chunk)?;
            vals.extend((0..diff.rows()).map(|r| diff.row(r).iter().map(|v| v * v).sum::<f64>() / (t * t)));
        }
        for (o, v) in out.iter_mut().zip(group_means(&vals, n)) {
            o.push(v);
        }
    }
    Ok(out)
}

pub const MSMA_SHRINKAGE: f64 = 1e-3;

/// Mahalanobis distance under a Gaussian fitted to training vectors.
#[derive(Clone, Debug)]
pub struct MsmaAggregator {
    mean: Vec<f64>,
    /// Lower Cholesky factor of the shrunk covariance, row-major.
    chol: Vec<f64>,
    dim: usize,
}

impl MsmaAggregator {
    pub fn fit(train: &[Vec<f64>], shrinkage: f64) -> Result<Self> {
        let n = train.len();
        if n == 0 {
            return Err(Error::InvalidArgument("no training vectors".into()));
        }
        let dim = train[0].len();
        if dim == 0 || train.iter().any(|v| v.len() != dim) {
            return Err(Error::Shape("training vectors must share a positive length".into()));
        }
        let mean: Vec<f64> = (0..dim).map(|k| train.iter().map(|v| v[k]).sum::<f64>() / n as f64).collect();
        let mut cov = vec![0.0; dim * dim];
        for v in train {
            for a in 0..dim {
                for b in 0..dim {
                    cov[a * dim + b] += (v[a] - mean[a]) * (v[b] - mean[b]);
                }
            }
        }
        let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
        cov.iter_mut().for_each(|c| *c /= denom);
        for a in 0..dim {
            cov[a * dim + a] += shrinkage;
        }
        let chol = cholesky(&cov, dim)?;
        Ok(MsmaAggregator { mean, chol, dim })
    }

    pub fn score(&self, v: &[f64]) -> Result<f64> {
        if v.len() != self.dim {
            return Err(Error::Shape(format!("vector of length {} for a {}-dim fit", v.len(), self.dim)));
        }
        // forward substitution: L w = v − μ
        let mut w = vec![0.0; self.dim];
        for a in 0..self.dim {
            let mut s = v[a] - self.mean[a];
            for b in 0..a {
                s -= self.chol[a * self.dim + b] * w[b];
            }
            w[a] = s / self.chol[a * self.dim + a];
        }
        Ok(w.iter().map(|x| x * x).sum::<f64>().sqrt())
    }
}

fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::SingularCovariance);
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// `msma_aggregate(train, test)`: fit on `train` and score `test`.
pub fn msma_aggregate(train: &[Vec<f64>], test: &[f64]) -> Result<f64> {
    MsmaAggregator::fit(train, MSMA_SHRINKAGE)?.score(test)
}

/// A per-sample score computed on a batch of rows with their sample ids.
pub trait Scorer: Sync {
    fn score_rows(&self, x: &Tensor, ids: &[u64], seed: u64) -> Result<Vec<f64>>;
}

pub struct ProjectionScorer<'a> {
    pub projector: &'a dyn Projector,
    pub distance: &'a dyn Distance,
    pub index: usize,
    pub n: usize,
}

impl Scorer for ProjectionScorer<'_> {
    fn score_rows(&self, x: &Tensor, ids: &[u64], seed: u64) -> Result<Vec<f64>> {
        score_projection(self.projector, x, ids, seed, self.index, self.distance, self.n)
    }
}

pub struct PrScorer<'a> {
    pub projector: &'a dyn Projector,
    pub distance: &'a dyn Distance,
    pub cfg: PrConfig,
    /// Sum over `cfg.ensemble` instead of the single `(alpha, beta)` pair.
    pub ensemble: bool,
}

impl Scorer for PrScorer<'_> {
    fn score_rows(&self, x: &Tensor, ids: &[u64], seed: u64) -> Result<Vec<f64>> {
        if self.ensemble {
            score_pr_ensemble(self.projector, x, ids, seed, &self.cfg, self.distance)
        } else {
            let c = &self.cfg;
            score_pr(self.projector, x, ids, seed, c.alpha, c.beta, c.n_alpha, c.n_beta, self.distance)
        }
    }
}

pub struct MsmaScorer<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub indices: Vec<usize>,
    pub n: usize,
    pub aggregator: MsmaAggregator,
}

impl<'a> MsmaScorer<'a> {
    /// Fits the aggregator on `train`, whose draws use `seed` and ids `0..`.
    pub fn fit(
        denoiser: &'a dyn Denoiser,
        indices: Vec<usize>,
        n: usize,
        train: &ImageBatch,
        seed: u64,
    ) -> Result<Self> {
        let ids: Vec<u64> = (0..train.len() as u64).collect();
        let mut vecs = Vec::with_capacity(train.len());
        for (c, chunk) in train.tensor().chunks(MAX_ROWS).iter().enumerate() {
            vecs.extend(score_msma(denoiser, chunk, &ids[c * MAX_ROWS..c * MAX_ROWS + chunk.rows()], seed, &indices, n)?);
        }
        let aggregator = MsmaAggregator::fit(&vecs, MSMA_SHRINKAGE)?;
        Ok(MsmaScorer {
            denoiser,
            indices,
            n,
            aggregator,
        })
    }
}

impl Scorer for MsmaScorer<'_> {
    fn score_rows(&self, x: &Tensor, ids: &[u64], seed: u64) -> Result<Vec<f64>> {
        score_msma(self.denoiser, x, ids, seed, &self.indices, self.n)?
            .iter()
            .map(|v| self.aggregator.score(v))
            .collect()
    }
}

/// Samples per scoring task.
const SAMPLE_CHUNK: usize = 4;

/// Scores every image, using `ids` as the noise keys of the samples.
pub fn batch_score_ids(
    data: &ImageBatch,
    ids: &[u64],
    scorer: &dyn Scorer,
    seed: u64,
    parallel: bool,
) -> Result<Vec<f64>> {
    check_ids(data.tensor(), ids)?;
    let starts: Vec<usize> = (0..data.len()).step_by(SAMPLE_CHUNK).collect();
    let run = |&s: &usize| -> Result<Vec<f64>> {
        let idx: Vec<usize> = (s..(s + SAMPLE_CHUNK).min(data.len())).collect();
        scorer.score_rows(&data.tensor().select_rows(&idx), &ids[s..s + idx.len()], seed)
    };
    let parts: Vec<Result<Vec<f64>>> = if parallel {
        starts.par_iter().map(run).collect()
    } else {
        starts.iter().map(run).collect()
    };
    let mut out = Vec::with_capacity(data.len());
    for p in parts {
        out.extend(p?);
    }
    if let Some(index) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteScore { index });
    }
    Ok(out)
}

/// Scores every image with ids `0..len`, in parallel.
pub fn batch_score(data: &ImageBatch, scorer: &dyn Scorer, seed: u64) -> Result<Vec<f64>> {
    let ids: Vec<u64> = (0..data.len() as u64).collect();
    batch_score_ids(data, &ids, scorer, seed, true)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Scores plus the provenance written next to them.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub config_hash: String,
    pub seed: u64,
    pub metric: String,
    pub method: String,
    pub ensemble: Vec<(usize, usize)>,
    /// Free-form `key=value` notes, for example applied shifts.
    pub notes: BTreeMap<String, String>,
}

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Self {
        ScoreVector {
            scores,
            config_hash: String::new(),
            seed: 0,
            metric: String::new(),
            method: String::new(),
            ensemble: Vec::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn manifest_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".manifest.txt");
        PathBuf::from(s)
    }

    fn manifest_text(&self) -> String {
        let pairs: Vec<String> = self.ensemble.iter().map(|(a, b)| format!("{}:{}", a, b)).collect();
        let mut s = format!(
            "config_hash={}\nseed={}\nmetric={}\nmethod={}\nensemble={}\nlength={}\n",
            self.config_hash,
            self.seed,
            self.metric,
            self.method,
            pairs.join(","),
            self.scores.len()
        );
        for (k, v) in &self.notes {
            s.push_str(&format!("note.{}={}\n", k, v));
        }
        s
    }

    /// Writes the scores as an f64 container at `path` and the manifest
    /// next to it. Returns the SHA-256 of the container bytes.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        if let Some(index) = self.scores.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteScore { index });
        }
        let arr = Array::from_tensor_f64(&Tensor::from_vec(&[self.scores.len()], self.scores.clone())?);
        save_container(&arr, path)?;
        let mp = Self::manifest_path(path);
        fs::write(&mp, self.manifest_text()).map_err(|e| Error::io(&mp, e))?;
        Ok(sha256_hex(&arr.to_bytes()))
    }

    /// Loads scores; the manifest is optional.
    pub fn load(path: impl AsRef<Path>) -> Result<ScoreVector> {
        let path = path.as_ref();
        let t = load_container(path)?.to_tensor();
        if t.shape().len() != 1 {
            return Err(Error::Shape(format!("score file holds shape {:?}", t.shape())));
        }
        let mut sv = ScoreVector::new(t.into_data());
        let mp = Self::manifest_path(path);
        if mp.exists() {
            let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
            let bad = |reason: String| Error::Manifest { path: mp.clone(), reason };
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad line '{}'", line)))?;
                match k {
                    "config_hash" => sv.config_hash = v.to_string(),
                    "seed" => sv.seed = v.parse().map_err(|_| bad(format!("bad seed '{}'", v)))?,
                    "metric" => sv.metric = v.to_string(),
                    "method" => sv.method = v.to_string(),
                    "length" => {}
                    "ensemble" => {
                        sv.ensemble = v
                            .split(',')
                            .filter(|p| !p.is_empty())
                            .map(|p| {
                                let (a, b) = p.split_once(':').ok_or_else(|| bad(format!("bad pair '{}'", p)))?;
                                Ok((
                                    a.parse().map_err(|_| bad(format!("bad pair '{}'", p)))?,
                                    b.parse().map_err(|_| bad(format!("bad pair '{}'", p)))?,
                                ))
                            })
                            .collect::<Result<_>>()?
                    }
                    other => match other.strip_prefix("note.") {
                        Some(n) => {
                            sv.notes.insert(n.to_string(), v.to_string());
                        }
                        None => return Err(bad(format!("unknown key '{}'", other))),
                    },
                }
            }
        }
        Ok(sv)
    }
}
