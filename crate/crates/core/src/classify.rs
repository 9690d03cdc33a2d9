//! Identity classifiers on gait signatures: one-vs-all linear SVMs, PCA
//! compression with nearest-neighbour search, and majority voting.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("need samples of at least 2 classes")]
    SingleClass,
    #[error("class {0} has no samples")]
    MissingClass(u32),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("{0} and {1} differ in length")]
    LengthMismatch(&'static str, &'static str),
    #[error("empty input")]
    Empty,
    #[error("PCA target dimension {k} needs k < samples ({samples}) and k <= dim ({dim})")]
    InvalidK { k: usize, samples: usize, dim: usize },
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Identities ordered best first with their scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub entries: Vec<(u32, f64)>,
}

impl RankedPrediction {
    /// Sorts by score descending, ties by ascending label.
    pub fn from_scores(scores: impl IntoIterator<Item = (u32, f64)>) -> Self {
        let mut entries: Vec<(u32, f64)> = scores.into_iter().collect();
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        RankedPrediction { entries }
    }

    pub fn top(&self) -> Option<u32> {
        self.entries.first().map(|e| e.0)
    }

    pub fn top_score(&self) -> Option<f64> {
        self.entries.first().map(|e| e.1)
    }

    /// Whether `label` is among the first `k` identities.
    pub fn hit_at(&self, label: u32, k: usize) -> bool {
        self.entries.iter().take(k).any(|e| e.0 == label)
    }
}

fn check_dim(expected: usize, got: usize) -> Result<(), ClassifyError> {
    if expected != got {
        return Err(ClassifyError::DimMismatch { expected, got });
    }
    Ok(())
}

/// One linear classifier per class, classes `0..C`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvmEnsemble {
    pub dim: usize,
    pub weights: Vec<Vec<f32>>,
    pub biases: Vec<f32>,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmParams {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            lambda: 1e-4,
            epochs: 40,
            seed: 0,
        }
    }
}

impl SvmEnsemble {
    pub fn classes(&self) -> usize {
        self.weights.len()
    }

    pub fn scores(&self, x: &[f32]) -> Result<Vec<f64>, ClassifyError> {
        check_dim(self.dim, x.len())?;
        Ok(self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, &b)| dot(w, x) + b as f64)
            .collect())
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&p, &q)| p as f64 * q as f64).sum()
}

/// Averaged stochastic sub-gradient descent on
/// `λ/2·‖w‖² + mean(max(0, 1 − y(w·x + b)))` with step `1 / (1 + λt)`.
/// The visiting order is shared by every class, so a problem and its
/// label-flipped twin produce exactly negated solutions.
fn train_binary(xs: &[&[f32]], ys: &[f64], order: &[Vec<usize>], lambda: f64) -> (Vec<f64>, f64) {
    let dim = xs[0].len();
    let mut w = vec![0.0f64; dim];
    let mut b = 0.0f64;
    let mut w_avg = vec![0.0f64; dim];
    let mut b_avg = 0.0f64;
    let mut averaged = 0usize;
    let average_from = order.len() / 2;
    let mut t = 0usize;
    for (epoch, perm) in order.iter().enumerate() {
        for &i in perm {
            let eta = 1.0 / (1.0 + lambda * t as f64);
            let x = xs[i];
            let margin = ys[i] * (x.iter().zip(&w).map(|(&a, &c)| a as f64 * c).sum::<f64>() + b);
            let shrink = 1.0 - eta * lambda;
            if margin < 1.0 {
                let step = eta * ys[i];
                for (wj, &xj) in w.iter_mut().zip(x) {
                    *wj = *wj * shrink + step * xj as f64;
                }
                b += step;
            } else {
                w.iter_mut().for_each(|wj| *wj *= shrink);
            }
            t += 1;
            if epoch >= average_from {
                averaged += 1;
                let r = 1.0 / averaged as f64;
                for (a, &c) in w_avg.iter_mut().zip(&w) {
                    *a += (c - *a) * r;
                }
                b_avg += (b - b_avg) * r;
            }
        }
    }
    (w_avg, b_avg)
}

fn class_count(labels: &[u32]) -> Result<usize, ClassifyError> {
    let classes = labels.iter().max().map(|&m| m as usize + 1).ok_or(ClassifyError::Empty)?;
    if classes < 2 {
        return Err(ClassifyError::SingleClass);
    }
    for c in 0..classes as u32 {
        if !labels.contains(&c) {
            return Err(ClassifyError::MissingClass(c));
        }
    }
    Ok(classes)
}

fn check_table(sigs: &[Vec<f32>], labels: &[u32]) -> Result<usize, ClassifyError> {
    if sigs.len() != labels.len() {
        return Err(ClassifyError::LengthMismatch("signatures", "labels"));
    }
    let dim = sigs.first().map(|s| s.len()).ok_or(ClassifyError::Empty)?;
    for s in sigs {
        check_dim(dim, s.len())?;
    }
    Ok(dim)
}

fn visiting_order(n: usize, params: &SvmParams) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    (0..params.epochs.max(1))
        .map(|_| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect()
}

/// One-vs-all linear SVMs; labels must cover `0..C` with `C ≥ 2`.
pub fn train_ovr_svm(sigs: &[Vec<f32>], labels: &[u32], params: &SvmParams) -> Result<SvmEnsemble, ClassifyError> {
    let dim = check_table(sigs, labels)?;
    let classes = class_count(labels)?;
    let xs: Vec<&[f32]> = sigs.iter().map(|s| s.as_slice()).collect();
    let order = visiting_order(sigs.len(), params);
    let members: Vec<(Vec<f64>, f64)> = (0..classes as u32)
        .into_par_iter()
        .map(|c| {
            let ys: Vec<f64> = labels.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
            train_binary(&xs, &ys, &order, params.lambda)
        })
        .collect();
    Ok(SvmEnsemble {
        dim,
        weights: members.iter().map(|(w, _)| w.iter().map(|&v| v as f32).collect()).collect(),
        biases: members.iter().map(|(_, b)| *b as f32).collect(),
        lambda: params.lambda,
    })
}

/// Binary classifier for class 1 against class 0, stored as a two-member
/// ensemble whose class-0 member is the negation of the class-1 member. A
/// positive class-1 score decides class 1.
pub fn train_gender_svm(sigs: &[Vec<f32>], labels: &[u32], params: &SvmParams) -> Result<SvmEnsemble, ClassifyError> {
    let dim = check_table(sigs, labels)?;
    if labels.iter().any(|&l| l > 1) {
        return Err(ClassifyError::Malformed("gender labels must be 0 or 1".into()));
    }
    if class_count(labels)? != 2 {
        return Err(ClassifyError::SingleClass);
    }
    let xs: Vec<&[f32]> = sigs.iter().map(|s| s.as_slice()).collect();
    let ys: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
    let (w, b) = train_binary(&xs, &ys, &visiting_order(sigs.len(), params), params.lambda);
    let w1: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    Ok(SvmEnsemble {
        dim,
        weights: vec![w1.iter().map(|v| -v).collect(), w1],
        biases: vec![-(b as f32), b as f32],
        lambda: params.lambda,
    })
}

/// All classes ranked by `w_c·x + b_c`.
pub fn svm_rank(ens: &SvmEnsemble, sig: &[f32]) -> Result<RankedPrediction, ClassifyError> {
    let scores = ens.scores(sig)?;
    Ok(RankedPrediction::from_scores(
        scores.into_iter().enumerate().map(|(c, s)| (c as u32, s)),
    ))
}

const GFSV_MAGIC: &[u8; 4] = b"GFSV";
const GFPC_MAGIC: &[u8; 4] = b"GFPC";
const GFGL_MAGIC: &[u8; 4] = b"GFGL";

fn put_f32s(out: &mut Vec<u8>, v: impl IntoIterator<Item = f32>) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn open(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self, ClassifyError> {
        if bytes.len() < 4 || &bytes[..4] != magic {
            return Err(ClassifyError::Malformed(format!(
                "missing {} magic",
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(Cursor { bytes, pos: 4 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ClassifyError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ClassifyError::Malformed("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, ClassifyError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, ClassifyError> {
        let len = n.checked_mul(4).ok_or_else(|| ClassifyError::Malformed("size overflow".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<(), ClassifyError> {
        if self.pos != self.bytes.len() {
            return Err(ClassifyError::Malformed("trailing bytes".into()));
        }
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ClassifyError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(bytes)?;
    out.flush()?;
    Ok(())
}

/// `GFSV`: magic, `u32` C, `u32` dim, per class `dim` weights then the bias
/// as `f32`, then `λ` as `f64`.
pub fn write_svm(path: &Path, ens: &SvmEnsemble) -> Result<(), ClassifyError> {
    let mut b = GFSV_MAGIC.to_vec();
    b.extend_from_slice(&(ens.classes() as u32).to_le_bytes());
    b.extend_from_slice(&(ens.dim as u32).to_le_bytes());
    for (w, &bias) in ens.weights.iter().zip(&ens.biases) {
        put_f32s(&mut b, w.iter().copied().chain([bias]));
    }
    b.extend_from_slice(&ens.lambda.to_le_bytes());
    write_file(path, &b)
}

pub fn read_svm(path: &Path) -> Result<SvmEnsemble, ClassifyError> {
    let bytes = fs::read(path)?;
    let mut r = Cursor::open(&bytes, GFSV_MAGIC)?;
    let (classes, dim) = (r.u32()?, r.u32()?);
    let mut weights = Vec::with_capacity(classes);
    let mut biases = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut w = r.f32s(dim + 1)?;
        biases.push(w.pop().unwrap());
        weights.push(w);
    }
    let lambda = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
    r.finish()?;
    Ok(SvmEnsemble {
        dim,
        weights,
        biases,
        lambda,
    })
}

/// Principal subspace of L2-normalized signatures.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k` orthonormal basis vectors of length `dim`.
    pub basis: Vec<Vec<f64>>,
    /// Variance along each basis vector.
    pub eigenvalues: Vec<f64>,
    pub total_variance: f64,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.basis.len()
    }

    pub fn explained_variance_ratio(&self) -> f64 {
        if self.total_variance == 0.0 {
            return 1.0;
        }
        self.eigenvalues.iter().sum::<f64>() / self.total_variance
    }
}

fn unit(v: &[f32]) -> Result<Vec<f64>, ClassifyError> {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(ClassifyError::ZeroVector);
    }
    Ok(v.iter().map(|&x| x as f64 / norm).collect())
}

/// Flips `v` so its largest-magnitude component (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Top-`k` eigenvectors of the covariance of the normalized, centered
/// signatures. With fewer samples than dimensions the eigenproblem is solved
/// on the `n × n` Gram matrix instead.
pub fn fit_pca(sigs: &[Vec<f32>], k: usize) -> Result<PcaModel, ClassifyError> {
    let n = sigs.len();
    let dim = sigs.first().map(|s| s.len()).ok_or(ClassifyError::Empty)?;
    if k == 0 || k >= n || k > dim {
        return Err(ClassifyError::InvalidK { k, samples: n, dim });
    }
    let mut rows = Vec::with_capacity(n);
    for s in sigs {
        check_dim(dim, s.len())?;
        rows.push(unit(s)?);
    }
    let mut mean = vec![0.0; dim];
    for r in &rows {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, dim, |i, j| rows[i][j] - mean[j]);
    let scale = 1.0 / (n - 1) as f64;
    let total_variance = x.iter().map(|v| v * v).sum::<f64>() * scale;

    let (values, vectors): (Vec<f64>, Vec<Vec<f64>>) = if n < dim {
        let eig = SymmetricEigen::new(&x * x.transpose());
        let order = descending(eig.eigenvalues.as_slice());
        order[..k]
            .iter()
            .map(|&i| {
                let lambda = eig.eigenvalues[i].max(0.0);
                let v = x.transpose() * eig.eigenvectors.column(i);
                let norm = v.norm();
                let v: Vec<f64> = if norm > 0.0 {
                    v.iter().map(|a| a / norm).collect()
                } else {
                    vec![0.0; dim]
                };
                (lambda * scale, v)
            })
            .unzip()
    } else {
        let eig = SymmetricEigen::new(x.transpose() * &x);
        let order = descending(eig.eigenvalues.as_slice());
        order[..k]
            .iter()
            .map(|&i| (eig.eigenvalues[i].max(0.0) * scale, eig.eigenvectors.column(i).iter().copied().collect()))
            .unzip()
    };
    let mut basis = vectors;
    basis.iter_mut().for_each(|v| fix_sign(v));
    Ok(PcaModel {
        mean,
        basis,
        eigenvalues: values,
        total_variance,
    })
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// `basisᵀ · (normalize(sig) − mean)`.
pub fn pca_project(m: &PcaModel, sig: &[f32]) -> Result<Vec<f64>, ClassifyError> {
    check_dim(m.dim(), sig.len())?;
    let x = unit(sig)?;
    Ok(m.basis
        .iter()
        .map(|b| b.iter().zip(&x).zip(&m.mean).map(|((&bj, &xj), &mj)| bj * (xj - mj)).sum())
        .collect())
}

/// `mean + basis · z`.
pub fn pca_backproject(m: &PcaModel, z: &[f64]) -> Result<Vec<f64>, ClassifyError> {
    check_dim(m.k(), z.len())?;
    let mut out = m.mean.clone();
    for (b, &zj) in m.basis.iter().zip(z) {
        for (o, &bj) in out.iter_mut().zip(b) {
            *o += zj * bj;
        }
    }
    Ok(out)
}

/// `GFPC`: magic, `u32` dim, `u32` k, `f32` mean, then the `dim × k` basis
/// matrix row-major (basis vectors are its columns).
pub fn write_pca(path: &Path, m: &PcaModel) -> Result<(), ClassifyError> {
    let mut b = GFPC_MAGIC.to_vec();
    b.extend_from_slice(&(m.dim() as u32).to_le_bytes());
    b.extend_from_slice(&(m.k() as u32).to_le_bytes());
    put_f32s(&mut b, m.mean.iter().map(|&v| v as f32));
    for r in 0..m.dim() {
        put_f32s(&mut b, m.basis.iter().map(|v| v[r] as f32));
    }
    write_file(path, &b)
}

/// Reads a `GFPC` model. Variances are not stored and come back empty.
pub fn read_pca(path: &Path) -> Result<PcaModel, ClassifyError> {
    let bytes = fs::read(path)?;
    let mut r = Cursor::open(&bytes, GFPC_MAGIC)?;
    let (dim, k) = (r.u32()?, r.u32()?);
    let mean = r.f32s(dim)?.into_iter().map(f64::from).collect();
    let flat = r.f32s(dim.checked_mul(k).ok_or_else(|| ClassifyError::Malformed("size overflow".into()))?)?;
    r.finish()?;
    let basis = (0..k).map(|j| (0..dim).map(|i| flat[i * k + j] as f64).collect()).collect();
    Ok(PcaModel {
        mean,
        basis,
        eigenvalues: vec![],
        total_variance: 0.0,
    })
}

/// Labeled reference vectors searched by [`nn_rank`].
#[derive(Clone, Debug, PartialEq)]
pub struct GallerySet {
    dim: usize,
    labels: Vec<u32>,
    rows: Vec<f32>,
}

impl GallerySet {
    pub fn new(vectors: &[Vec<f32>], labels: &[u32]) -> Result<Self, ClassifyError> {
        let dim = check_table(vectors, labels)?;
        Ok(GallerySet {
            dim,
            labels: labels.to_vec(),
            rows: vectors.concat(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Every gallery identity scored by minus its nearest distance to `q`.
pub fn nn_rank(g: &GallerySet, q: &[f32]) -> Result<RankedPrediction, ClassifyError> {
    check_dim(g.dim, q.len())?;
    let mut best: std::collections::BTreeMap<u32, f64> = Default::default();
    for (i, &label) in g.labels.iter().enumerate() {
        let d = euclidean(g.row(i), q);
        best.entry(label)
            .and_modify(|b| {
                if d < *b {
                    *b = d
                }
            })
            .or_insert(d);
    }
    Ok(RankedPrediction::from_scores(best.into_iter().map(|(l, d)| (l, -d))))
}

/// `GFGL`: magic, `u32` count, `u32` dim, then per row a `u32` label and
/// `dim` `f32` values.
pub fn write_gallery(path: &Path, g: &GallerySet) -> Result<(), ClassifyError> {
    let mut b = GFGL_MAGIC.to_vec();
    b.extend_from_slice(&(g.len() as u32).to_le_bytes());
    b.extend_from_slice(&(g.dim as u32).to_le_bytes());
    for i in 0..g.len() {
        b.extend_from_slice(&g.labels[i].to_le_bytes());
        put_f32s(&mut b, g.row(i).iter().copied());
    }
    write_file(path, &b)
}

pub fn read_gallery(path: &Path) -> Result<GallerySet, ClassifyError> {
    let bytes = fs::read(path)?;
    let mut r = Cursor::open(&bytes, GFGL_MAGIC)?;
    let (count, dim) = (r.u32()?, r.u32()?);
    let mut labels = Vec::with_capacity(count);
    let mut rows = Vec::with_capacity(count.saturating_mul(dim));
    for _ in 0..count {
        labels.push(r.u32()? as u32);
        rows.extend(r.f32s(dim)?);
    }
    r.finish()?;
    if labels.is_empty() {
        return Err(ClassifyError::Empty);
    }
    Ok(GallerySet { dim, labels, rows })
}

/// Identity with the most top-1 votes; ties go to the highest mean top-1
/// score among the tied identities, then the smallest label.
pub fn majority_vote(preds: &[RankedPrediction]) -> Result<u32, ClassifyError> {
    video_rank(preds)?.top().ok_or(ClassifyError::Empty)
}

/// Video-level ranking of every identity seen in `preds`: by top-1 votes,
/// then mean top-1 score of those votes, then mean score over all
/// predictions, then label. Scores are vote fractions.
pub fn video_rank(preds: &[RankedPrediction]) -> Result<RankedPrediction, ClassifyError> {
    if preds.is_empty() || preds.iter().any(|p| p.entries.is_empty()) {
        return Err(ClassifyError::Empty);
    }
    #[derive(Default)]
    struct Tally {
        votes: usize,
        top_sum: f64,
        sum: f64,
        seen: usize,
    }
    let mut t: std::collections::BTreeMap<u32, Tally> = Default::default();
    for p in preds {
        let (label, score) = p.entries[0];
        let e = t.entry(label).or_default();
        e.votes += 1;
        e.top_sum += score;
        for &(l, s) in &p.entries {
            let e = t.entry(l).or_default();
            e.sum += s;
            e.seen += 1;
        }
    }
    let key = |x: &Tally| {
        let top = if x.votes > 0 { x.top_sum / x.votes as f64 } else { f64::NEG_INFINITY };
        (x.votes, top, x.sum / x.seen.max(1) as f64)
    };
    let mut ids: Vec<(u32, (usize, f64, f64))> = t.iter().map(|(&l, x)| (l, key(x))).collect();
    ids.sort_by(|a, b| {
        b.1 .0
            .cmp(&a.1 .0)
            .then(b.1 .1.total_cmp(&a.1 .1))
            .then(b.1 .2.total_cmp(&a.1 .2))
            .then(a.0.cmp(&b.0))
    });
    let n = preds.len() as f64;
    Ok(RankedPrediction {
        entries: ids.into_iter().map(|(l, k)| (l, k.0 as f64 / n)).collect(),
    })
}

/// Softmax class probabilities as a ranking.
pub fn probability_rank(probs: &[f32]) -> RankedPrediction {
    RankedPrediction::from_scores(probs.iter().enumerate().map(|(c, &p)| (c as u32, p as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn e(i: usize, d: usize) -> Vec<f32> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn orthogonal_classes_are_separated() {
        let mut sigs = vec![];
        let mut labels = vec![];
        for c in 0..2u32 {
            for _ in 0..10 {
                sigs.push(e(c as usize, 4));
                labels.push(c);
            }
        }
        let ens = train_ovr_svm(&sigs, &labels, &SvmParams::default()).unwrap();
        for (s, &l) in sigs.iter().zip(&labels) {
            assert_eq!(svm_rank(&ens, s).unwrap().top(), Some(l));
        }
    }

    #[test]
    fn missing_class_or_single_class_fails() {
        let sigs = vec![e(0, 3), e(1, 3)];
        assert!(matches!(
            train_ovr_svm(&sigs, &[0, 2], &SvmParams::default()),
            Err(ClassifyError::MissingClass(1))
        ));
        assert!(matches!(
            train_ovr_svm(&sigs, &[0, 0], &SvmParams::default()),
            Err(ClassifyError::SingleClass)
        ));
        assert!(matches!(
            train_gender_svm(&sigs, &[1, 1], &SvmParams::default()),
            Err(ClassifyError::MissingClass(0))
        ));
    }

    #[test]
    fn rank_order_and_tie_rule() {
        let ens = SvmEnsemble {
            dim: 1,
            weights: vec![vec![0.9], vec![0.1], vec![-0.3]],
            biases: vec![0.0; 3],
            lambda: 1e-4,
        };
        let r = svm_rank(&ens, &[1.0]).unwrap();
        assert_eq!(r.entries.iter().map(|e| e.0).collect::<Vec<_>>(), [0, 1, 2]);
        let tie = RankedPrediction::from_scores([(2, 0.5), (1, 0.5), (0, 0.1)]);
        assert_eq!(tie.top(), Some(1));
        assert!(matches!(svm_rank(&ens, &[1.0, 2.0]), Err(ClassifyError::DimMismatch { .. })));
    }

    #[test]
    fn gender_svm_is_mirrored_two_class_ensemble() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sigs = vec![];
        let mut labels = vec![];
        for i in 0..40 {
            let g = u32::from(i % 3 == 0);
            let mut v: Vec<f32> = (0..6).map(|_| rng.gen_range(-0.2..0.2)).collect();
            v[g as usize] += 1.0;
            sigs.push(v);
            labels.push(g);
        }
        let p = SvmParams::default();
        let g = train_gender_svm(&sigs, &labels, &p).unwrap();
        let ovr = train_ovr_svm(&sigs, &labels, &p).unwrap();
        assert_eq!(g, ovr);
        for (s, &l) in sigs.iter().zip(&labels) {
            assert_eq!(svm_rank(&g, s).unwrap().top(), Some(l));
        }
    }

    #[test]
    fn pca_mean_projects_to_zero_and_basis_to_unit_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sigs: Vec<Vec<f32>> = (0..30).map(|_| (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let m = fit_pca(&sigs, 4).unwrap();
        // the mean of unit vectors is not itself unit length, so go through
        // the centered coordinates directly
        for (j, b) in m.basis.iter().enumerate() {
            let z: Vec<f64> = m.basis.iter().map(|c| c.iter().zip(b).map(|(p, q)| p * q).sum()).collect();
            for (i, &zi) in z.iter().enumerate() {
                assert!((zi - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9);
            }
            let biggest = b.iter().fold(0.0f64, |a, &v| if v.abs() > a.abs() { v } else { a });
            assert!(biggest > 0.0);
        }
    }

    #[test]
    fn pca_rejects_bad_k() {
        let sigs = vec![vec![1.0f32, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        assert!(matches!(fit_pca(&sigs, 3), Err(ClassifyError::InvalidK { .. })));
        assert!(matches!(fit_pca(&sigs, 0), Err(ClassifyError::InvalidK { .. })));
        let m = fit_pca(&sigs, 1).unwrap();
        assert!(pca_project(&m, &[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn isotropic_full_rank_explains_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let normal = rand_distr::StandardNormal;
        let sigs: Vec<Vec<f32>> = (0..200)
            .map(|_| (0..5).map(|_| rng.sample::<f64, _>(normal) as f32).collect())
            .collect();
        let m = fit_pca(&sigs, 5).unwrap();
        assert!((m.explained_variance_ratio() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn nn_basic_cases() {
        let g = GallerySet::new(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]], &[5, 7, 9]).unwrap();
        let r = nn_rank(&g, &[1.0, 0.0]).unwrap();
        assert_eq!(r.entries[0], (7, 0.0));
        let r = nn_rank(&g, &[0.0, 0.0]).unwrap();
        assert_eq!(r.entries.iter().map(|e| e.0).collect::<Vec<_>>(), [5, 7, 9]);
        assert!(nn_rank(&g, &[0.0]).is_err());
    }

    #[test]
    fn vote_rules() {
        let p = |l: u32, s: f64| RankedPrediction {
            entries: vec![(l, s), (if l == 0 { 1 } else { 0 }, s - 1.0)],
        };
        assert_eq!(majority_vote(&[p(0, 0.5), p(0, 0.4), p(1, 0.9)]).unwrap(), 0);
        assert_eq!(majority_vote(&[p(0, 0.9), p(1, 0.5)]).unwrap(), 0);
        assert_eq!(majority_vote(&[p(0, 0.5), p(1, 0.9)]).unwrap(), 1);
        assert!(majority_vote(&[]).is_err());
    }

    #[test]
    fn model_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ens = SvmEnsemble {
            dim: 2,
            weights: vec![vec![1.0, -2.0], vec![0.5, 0.25]],
            biases: vec![0.1, -0.1],
            lambda: 1e-4,
        };
        write_svm(&dir.path().join("m.gfsv"), &ens).unwrap();
        assert_eq!(read_svm(&dir.path().join("m.gfsv")).unwrap(), ens);
        let g = GallerySet::new(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]], &[3, 1]).unwrap();
        write_gallery(&dir.path().join("g.gfgl"), &g).unwrap();
        assert_eq!(read_gallery(&dir.path().join("g.gfgl")).unwrap(), g);
        let sigs = vec![vec![1.0f32, 0.0, 0.5], vec![0.0, 1.0, 0.5], vec![1.0, 1.0, 0.0], vec![0.2, 0.1, 1.0]];
        let m = fit_pca(&sigs, 2).unwrap();
        write_pca(&dir.path().join("p.gfpc"), &m).unwrap();
        let back = read_pca(&dir.path().join("p.gfpc")).unwrap();
        for (a, b) in m.basis.iter().flatten().zip(back.basis.iter().flatten()) {
            assert!((a - b).abs() < 1e-7);
        }
        std::fs::write(dir.path().join("bad"), b"GFSV\x01").unwrap();
        assert!(matches!(read_svm(&dir.path().join("bad")), Err(ClassifyError::Malformed(_))));
    }
}
