//! Evaluation metric suite: distribution distance (FID), text-motion
//! distance, diversity, per-caption multimodality and retrieval precision,
//! all over clip-space feature vectors.

use crate::crossdomain::{CrossError, JointModel};
use crate::motion::MotionSequence;
use crate::motionae::MotionBatch;
use crate::real::Real;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("non-finite values in feature statistics")]
    NonFiniteStats,
    #[error("need at least {need} samples, got {got}")]
    InsufficientSamples { need: usize, got: usize },
    #[error("retrieval pool of {pool} exceeds the {n} available samples")]
    PoolTooLarge { pool: usize, n: usize },
    #[error("feature sets disagree: {0}")]
    Mismatch(String),
}

/// N feature rows of fixed width.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len() % dim, 0);
        FeatureSet { dim, data }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.dim);
        self.data.extend_from_slice(row);
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

// ---------------------------------------------------------------------------
// Gaussian statistics and FID
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// dim x dim, exactly symmetric by construction.
    pub cov: Vec<f64>,
}

/// Sample mean and unbiased covariance.
pub fn gaussian_stats(fs: &FeatureSet) -> Result<GaussianStats, MetricError> {
    let n = fs.len();
    if n < 2 {
        return Err(MetricError::InsufficientSamples { need: 2, got: n });
    }
    let d = fs.dim;
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &x) in mean.iter_mut().zip(fs.row(i)) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let row = fs.row(i);
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in a..d {
                cov[a * d + b] += da * (row[b] - mean[b]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / denom;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    if !mean.iter().chain(cov.iter()).all(|v| v.is_finite()) {
        return Err(MetricError::NonFiniteStats);
    }
    Ok(GaussianStats { dim: d, mean, cov })
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns the
/// eigenvalues and, when requested, the eigenvectors as columns.
pub fn sym_eig(matrix: &[f64], n: usize, with_vectors: bool) -> (Vec<f64>, Option<Vec<f64>>) {
    let mut a = matrix.to_vec();
    let mut v = if with_vectors {
        let mut id = vec![0.0; n * n];
        for i in 0..n {
            id[i * n + i] = 1.0;
        }
        Some(id)
    } else {
        None
    };
    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += a[i * n + j] * a[i * n + j];
            }
        }
        s
    };
    let fro: f64 = a.iter().map(|x| x * x).sum();
    let tol = 1e-24 * fro.max(1e-300);
    for _sweep in 0..60 {
        if off(&a) <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                if let Some(vv) = v.as_mut() {
                    for k in 0..n {
                        let vkp = vv[k * n + p];
                        let vkq = vv[k * n + q];
                        vv[k * n + p] = c * vkp - s * vkq;
                        vv[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }
    let vals = (0..n).map(|i| a[i * n + i]).collect();
    (vals, v)
}

fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

/// Symmetric PSD square root via eigendecomposition, negative eigenvalues
/// clamped to zero.
fn psd_sqrt(m: &[f64], n: usize) -> Vec<f64> {
    let (vals, vecs) = sym_eig(m, n, true);
    let v = vecs.unwrap();
    let mut out = vec![0.0; n * n];
    // out = V sqrt(L) V^T
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                let l = vals[k].max(0.0).sqrt();
                acc += v[i * n + k] * l * v[j * n + k];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Squared mean distance plus Tr(Sa + Sb - 2 (Sa Sb)^(1/2)); the cross term
/// comes from the symmetric form sqrt(Sa^(1/2) Sb Sa^(1/2)).
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64, MetricError> {
    if a.dim != b.dim {
        return Err(MetricError::Mismatch(format!(
            "dims {} vs {}",
            a.dim, b.dim
        )));
    }
    let finite = a
        .mean
        .iter()
        .chain(&b.mean)
        .chain(&a.cov)
        .chain(&b.cov)
        .all(|v| v.is_finite());
    if !finite {
        return Err(MetricError::NonFiniteStats);
    }
    let n = a.dim;
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let tr_a: f64 = (0..n).map(|i| a.cov[i * n + i]).sum();
    let tr_b: f64 = (0..n).map(|i| b.cov[i * n + i]).sum();
    let sa_half = psd_sqrt(&a.cov, n);
    let inner = mat_mul(&sa_half, &mat_mul(&b.cov, &sa_half, n), n);
    // symmetrize against rounding
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = 0.5 * (inner[i * n + j] + inner[j * n + i]);
        }
    }
    let (vals, _) = sym_eig(&sym, n, false);
    let tr_cross: f64 = vals.iter().map(|&l| l.max(0.0).sqrt()).sum();
    Ok(mean_term + tr_a + tr_b - 2.0 * tr_cross)
}

// ---------------------------------------------------------------------------
// Paired and sampled metrics
// ---------------------------------------------------------------------------

/// Mean Euclidean distance between aligned feature pairs.
pub fn mm_dist(pred: &FeatureSet, text: &FeatureSet) -> Result<f64, MetricError> {
    if pred.dim != text.dim || pred.len() != text.len() {
        return Err(MetricError::Mismatch(format!(
            "{}x{} vs {}x{}",
            pred.len(),
            pred.dim,
            text.len(),
            text.dim
        )));
    }
    if pred.is_empty() {
        return Err(MetricError::InsufficientSamples { need: 1, got: 0 });
    }
    let n = pred.len();
    let sum: f64 = (0..n).map(|i| euclidean(pred.row(i), text.row(i))).sum();
    Ok(sum / n as f64)
}

/// Mean distance over `s_dis` disjoint pairs drawn from a seeded shuffle:
/// the first s_dis shuffled rows pair with the next s_dis.
pub fn diversity(pred: &FeatureSet, s_dis: usize, seed: u64) -> Result<f64, MetricError> {
    let n = pred.len();
    if s_dis == 0 || 2 * s_dis > n {
        return Err(MetricError::InsufficientSamples {
            need: 2 * s_dis.max(1),
            got: n,
        });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::keyed(seed, &[0xd17e]).shuffle(&mut idx);
    let sum: f64 = (0..s_dis)
        .map(|i| euclidean(pred.row(idx[i]), pred.row(idx[s_dis + i])))
        .sum();
    Ok(sum / s_dis as f64)
}

/// Within-caption diversity: for every caption, two seeded disjoint subsets
/// of `subset` generations are paired elementwise; the metric is
/// sum(||f_ij - f'_ij||) / (subset * captions).
pub fn mmodality(
    per_caption: &[FeatureSet],
    subset: usize,
    seed: u64,
) -> Result<f64, MetricError> {
    if per_caption.is_empty() || subset == 0 {
        return Err(MetricError::InsufficientSamples { need: 1, got: 0 });
    }
    let mut total = 0.0;
    for (ci, fs) in per_caption.iter().enumerate() {
        let n = fs.len();
        if n < 2 * subset {
            return Err(MetricError::InsufficientSamples {
                need: 2 * subset,
                got: n,
            });
        }
        let mut rng = Rng::keyed(seed, &[0x3307, ci as u64]);
        let picks = rng.choose_distinct(n, 2 * subset);
        for j in 0..subset {
            total += euclidean(fs.row(picks[j]), fs.row(picks[subset + j]));
        }
    }
    Ok(total / (subset * per_caption.len()) as f64)
}

/// Retrieval accuracy: each generated feature ranks its own text among a
/// seeded pool of `pool_size` candidate texts by Euclidean distance.
/// Returns the top-1..=k_max fractions.
pub fn r_precision(
    pred: &FeatureSet,
    text: &FeatureSet,
    pool_size: usize,
    k_max: usize,
    seed: u64,
) -> Result<Vec<f64>, MetricError> {
    if pred.dim != text.dim || pred.len() != text.len() {
        return Err(MetricError::Mismatch(format!(
            "{}x{} vs {}x{}",
            pred.len(),
            pred.dim,
            text.len(),
            text.dim
        )));
    }
    let n = pred.len();
    if pool_size > n {
        return Err(MetricError::PoolTooLarge { pool: pool_size, n });
    }
    if pool_size == 0 || k_max == 0 || k_max > pool_size {
        return Err(MetricError::Mismatch(format!(
            "pool {pool_size}, k_max {k_max}"
        )));
    }
    let mut hits = vec![0usize; k_max];
    for i in 0..n {
        let mut rng = Rng::keyed(seed, &[0x9f3c, i as u64]);
        // pool: the true caption plus pool_size-1 seeded distractors
        let mut pool = Vec::with_capacity(pool_size);
        pool.push(i);
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        rng.shuffle(&mut others);
        pool.extend_from_slice(&others[..pool_size - 1]);
        let d_true = euclidean(pred.row(i), text.row(i));
        let rank = pool
            .iter()
            .filter(|&&j| euclidean(pred.row(i), text.row(j)) < d_true)
            .count();
        for (k, h) in hits.iter_mut().enumerate() {
            if rank <= k {
                *h += 1;
            }
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / n as f64).collect())
}

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

/// Clip-space features of motions: encode with the autoencoder whose
/// skeleton matches, then map through the selected latent head ("animal"
/// by default; "human" reuses the human-side head on the shared latent).
pub fn motion_features<R: Real>(
    model: &JointModel<R>,
    motions: &[&MotionSequence],
    human_side_head: bool,
) -> Result<FeatureSet, CrossError> {
    let cfg = &model.cfg;
    let mut out = FeatureSet::new(cfg.clip_dim, Vec::new());
    if motions.is_empty() {
        return Ok(out);
    }
    let animal_skel = motions[0].skeleton == model.animal_skel.name;
    let (skel, encoder) = if animal_skel {
        (&model.animal_skel, &model.animal)
    } else {
        (&model.human_skel, &model.human)
    };
    let head_owner = if human_side_head {
        &model.human
    } else {
        &model.animal
    };
    for chunk in motions.chunks(16) {
        let batch = MotionBatch::from_motions(chunk, skel, cfg)?;
        let mut g: crate::tensor::Graph<R> = crate::tensor::Graph::new();
        let bind = model.store.bind(&mut g);
        let d = batch.constant(&mut g);
        let z = encoder.encode(&mut g, &bind, cfg, d, &batch.mask)?;
        let c = head_owner.latent_to_clip(&mut g, &bind, cfg, z)?;
        out.data
            .extend(g.values(c).iter().map(|&v| v.to_f64()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Repeated-evaluation protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricStat {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

pub fn summarize(values: &[f64]) -> MetricStat {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MetricStat {
        mean,
        std: var.sqrt(),
        values: values.to_vec(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub mode: String,
    pub runs: usize,
    pub seed0: u64,
    pub feature_side: String,
    pub metrics: BTreeMap<String, MetricStat>,
}
