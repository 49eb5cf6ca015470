//! Linear concept probes: first principal component of signed contrastive
//! differences, one probe per layer.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, SeededRng};
use crate::store::{self, ActivationRecord, ContainerHeader, ContrastivePair, StoreError};

/// Above this dimension the top component is found by power iteration;
/// at or below it a dense Jacobi eigendecomposition is used.
pub const DENSE_SOLVER_MAX_DIM: usize = 64;
pub const POWER_TOLERANCE: f64 = 1e-10;
pub const POWER_MAX_ITERATIONS: usize = 10_000;
pub const DEFAULT_SPLIT_FRACTION: f64 = 0.8;
/// Fewest training pairs a layer may be fitted on.
pub const MIN_TRAIN_PAIRS: usize = 4;

const PROBE_FORMAT: &str = "meco-probes";
const PROBE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("insufficient data{}: {reason}", layer_suffix(.layer))]
    InsufficientData { layer: Option<u32>, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate data{}: all difference rows are identical after centering", layer_suffix(.layer))]
    Degenerate { layer: Option<u32> },
    #[error(
        "power iteration did not converge{} after {iterations} iterations (last step {last_step:.3e}, tolerance {tolerance:.1e})",
        layer_suffix(.layer)
    )]
    NotConverged {
        layer: Option<u32>,
        iterations: usize,
        last_step: f64,
        tolerance: f64,
    },
    #[error("probe set has no probe for layer {0}")]
    MissingLayer(u32),
    #[error("probe file: {0}")]
    Format(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn layer_suffix(layer: &Option<u32>) -> String {
    layer.map(|l| format!(" at layer {l}")).unwrap_or_default()
}

pub type Result<T, E = ProbeError> = std::result::Result<T, E>;

/// Rows `(-1)^i (plus_i - minus_i)` in pair-ordinal order.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    /// `(-1)^ordinal` for each row, so `sign * row` recovers `plus - minus`.
    signs: Vec<f64>,
}

impl DifferenceMatrix {
    /// Builds a matrix from already-signed rows, treating the row index as the
    /// pair ordinal.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(ProbeError::Shape("rows have differing lengths".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
            signs: (0..rows.len()).map(alternating_sign).collect(),
        })
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// `plus - minus` for row `i`.
    fn unsigned_row(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        let s = self.signs[i];
        self.row(i).iter().map(move |x| s * x)
    }
}

fn alternating_sign(ordinal: usize) -> f64 {
    if ordinal.is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

pub fn build_difference_matrix(pairs: &[ContrastivePair]) -> Result<DifferenceMatrix> {
    if pairs.len() < 2 {
        return Err(ProbeError::InsufficientData {
            layer: pairs.first().map(|p| p.layer_index),
            reason: format!("need at least 2 pairs, got {}", pairs.len()),
        });
    }
    let cols = pairs[0].plus.len();
    for p in pairs {
        if p.plus.len() != cols || p.minus.len() != cols {
            return Err(ProbeError::Shape(format!(
                "pair (query {}, k {}) has arms of dimension {}/{}, expected {cols}",
                p.query_id,
                p.truncation_index,
                p.plus.len(),
                p.minus.len()
            )));
        }
    }
    let mut order: Vec<&ContrastivePair> = pairs.iter().collect();
    order.sort_by_key(|p| p.ordinal);

    let mut data = Vec::with_capacity(pairs.len() * cols);
    let mut signs = Vec::with_capacity(pairs.len());
    for p in order {
        let sign = alternating_sign(p.ordinal);
        signs.push(sign);
        data.extend(
            p.plus
                .iter()
                .zip(&p.minus)
                .map(|(&a, &b)| sign * (f64::from(a) - f64::from(b))),
        );
    }
    Ok(DifferenceMatrix {
        rows: pairs.len(),
        cols,
        data,
        signs,
    })
}

/// One layer's concept direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub layer_index: u32,
    /// Unit-norm first principal component.
    pub direction: Vec<f64>,
    /// Mean of the signed difference rows the probe was fitted on.
    pub center: Vec<f64>,
    pub heldout_accuracy: f64,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
}

impl Probe {
    pub fn project(&self, vector: &[f32]) -> f64 {
        dot_f32(&self.direction, vector)
    }
}

fn dot_f32(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, &y)| x * f64::from(y)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Fits the first principal component of the mean-centered rows and orients
/// it so that the Experimental arm projects higher on average.
/// `heldout_accuracy` of the result is left at zero.
pub fn fit_probe(matrix: &DifferenceMatrix, layer_index: u32) -> Result<Probe> {
    let (n, d) = (matrix.nrows(), matrix.ncols());
    if n < 2 || d == 0 {
        return Err(ProbeError::InsufficientData {
            layer: Some(layer_index),
            reason: format!("need >= 2 rows and >= 1 column, got {n}x{d}"),
        });
    }

    let mut center = vec![0.0; d];
    for row in matrix.rows() {
        for (c, x) in center.iter_mut().zip(row) {
            *c += x;
        }
    }
    center.iter_mut().for_each(|c| *c /= n as f64);

    let mut centered = Vec::with_capacity(n * d);
    for row in matrix.rows() {
        centered.extend(row.iter().zip(&center).map(|(x, c)| x - c));
    }
    let raw_energy: f64 = matrix.data.iter().map(|x| x * x).sum();
    let centered_energy: f64 = centered.iter().map(|x| x * x).sum();
    if centered_energy <= 1e-24 * raw_energy.max(f64::MIN_POSITIVE) {
        return Err(ProbeError::Degenerate {
            layer: Some(layer_index),
        });
    }

    let mut direction = if d <= DENSE_SOLVER_MAX_DIM {
        let cov = covariance(&centered, n, d);
        dense_top_eigenvector(&cov, d)
    } else {
        power_iteration(&centered, n, d).map_err(|e| match e {
            ProbeError::NotConverged {
                iterations,
                last_step,
                tolerance,
                ..
            } => ProbeError::NotConverged {
                layer: Some(layer_index),
                iterations,
                last_step,
                tolerance,
            },
            other => other,
        })?
    };

    let len = norm(&direction);
    direction.iter_mut().for_each(|x| *x /= len);

    let mean_margin: f64 = (0..n)
        .map(|i| {
            matrix
                .unsigned_row(i)
                .zip(&direction)
                .map(|(x, v)| x * v)
                .sum::<f64>()
        })
        .sum::<f64>()
        / n as f64;
    if mean_margin < 0.0 {
        direction.iter_mut().for_each(|x| *x = -*x);
    }

    Ok(Probe {
        layer_index,
        direction,
        center,
        heldout_accuracy: 0.0,
        train_pairs: n,
        heldout_pairs: 0,
    })
}

/// Sample covariance `Xc^T Xc / (n - 1)`, row-major `d x d`.
fn covariance(centered: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut cov = vec![0.0; d * d];
    for row in centered.chunks_exact(d) {
        for i in 0..d {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for j in i..d {
                cov[i * d + j] += ri * row[j];
            }
        }
    }
    let scale = 1.0 / (n as f64 - 1.0);
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] * scale;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    cov
}

/// Cyclic Jacobi rotations; returns the eigenvector of the largest eigenvalue.
fn dense_top_eigenvector(cov: &[f64], d: usize) -> Vec<f64> {
    let mut a = cov.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let total: f64 = a.iter().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j] * a[i * d + j])
            .sum();
        if off <= 1e-30 * total {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let top = (0..d)
        .max_by(|&i, &j| a[i * d + i].total_cmp(&a[j * d + j]))
        .expect("d > 0");
    (0..d).map(|k| v[k * d + top]).collect()
}

/// Power iteration on the implicit covariance `Xc^T (Xc v)`, which avoids
/// forming the `d x d` matrix. Starts from the centered row of largest norm.
fn power_iteration(centered: &[f64], n: usize, d: usize) -> Result<Vec<f64>> {
    let start = centered
        .chunks_exact(d)
        .max_by(|a, b| norm(a).total_cmp(&norm(b)))
        .expect("n >= 2");
    let mut v: Vec<f64> = start.to_vec();
    let len = norm(&v);
    v.iter_mut().for_each(|x| *x /= len);

    let mut projections = vec![0.0; n];
    let mut next = vec![0.0; d];
    let mut last_step = f64::INFINITY;
    for _ in 0..POWER_MAX_ITERATIONS {
        for (p, row) in projections.iter_mut().zip(centered.chunks_exact(d)) {
            *p = dot(row, &v);
        }
        next.iter_mut().for_each(|x| *x = 0.0);
        for (p, row) in projections.iter().zip(centered.chunks_exact(d)) {
            for (acc, x) in next.iter_mut().zip(row) {
                *acc += p * x;
            }
        }
        let len = norm(&next);
        if len == 0.0 {
            // Start vector orthogonal to every row: cannot happen for a row of
            // the matrix itself unless the data is degenerate.
            return Err(ProbeError::Degenerate { layer: None });
        }
        next.iter_mut().for_each(|x| *x /= len);
        last_step = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        std::mem::swap(&mut v, &mut next);
        if last_step < POWER_TOLERANCE {
            return Ok(v);
        }
    }
    Err(ProbeError::NotConverged {
        layer: None,
        iterations: POWER_MAX_ITERATIONS,
        last_step,
        tolerance: POWER_TOLERANCE,
    })
}

/// Fraction of pairs whose Experimental arm projects strictly higher than
/// the Reference arm. Ties count as misclassified.
pub fn classify_pair_accuracy(probe: &Probe, heldout: &[ContrastivePair]) -> Result<f64> {
    if heldout.is_empty() {
        return Err(ProbeError::InsufficientData {
            layer: Some(probe.layer_index),
            reason: "empty held-out set".into(),
        });
    }
    let d = probe.direction.len();
    let mut correct = 0usize;
    for p in heldout {
        if p.plus.len() != d || p.minus.len() != d {
            return Err(ProbeError::Shape(format!(
                "held-out pair dimension {} does not match probe dimension {d}",
                p.plus.len()
            )));
        }
        if probe.project(&p.plus) > probe.project(&p.minus) {
            correct += 1;
        }
    }
    Ok(correct as f64 / heldout.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeTraining {
    pub seed: u64,
    pub split_fraction: f64,
}

impl ProbeTraining {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            split_fraction: DEFAULT_SPLIT_FRACTION,
        }
    }
}

/// One probe per layer plus the provenance needed to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub concept: String,
    pub model_id: String,
    pub d: usize,
    pub layers: u32,
    pub training: ProbeTraining,
    /// Indexed by layer.
    pub probes: Vec<Probe>,
}

impl ProbeSet {
    pub fn probe(&self, layer_index: u32) -> Result<&Probe> {
        self.probes
            .get(layer_index as usize)
            .ok_or(ProbeError::MissingLayer(layer_index))
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.probes.iter().map(|p| p.heldout_accuracy).collect()
    }
}

/// Result of [`fit_probe_set`]: the probes and any unpaired records found.
#[derive(Debug, Clone)]
pub struct ProbeSetFit {
    pub probe_set: ProbeSet,
    pub orphans: Vec<store::Orphan>,
}

/// Fits one probe per layer. Each layer's pairs are shuffled with a seed
/// derived from `(seed, layer)`, split into train and held-out parts, and the
/// probe is scored on the held-out part. Layers are fitted in parallel; the
/// result does not depend on scheduling.
pub fn fit_probe_set(
    header: &ContainerHeader,
    records: &[ActivationRecord],
    training: ProbeTraining,
) -> Result<ProbeSetFit> {
    if !(training.split_fraction > 0.0 && training.split_fraction < 1.0) {
        return Err(ProbeError::InsufficientData {
            layer: None,
            reason: format!("split fraction {} outside (0, 1)", training.split_fraction),
        });
    }
    let mut by_layer = store::pair_all_layers(records)?;
    let mut layer_pairs = Vec::with_capacity(header.layers as usize);
    let mut orphans = Vec::new();
    for layer in 0..header.layers {
        let pairing = by_layer.remove(&layer).unwrap_or_default();
        if pairing.pairs.is_empty() {
            return Err(ProbeError::InsufficientData {
                layer: Some(layer),
                reason: "no contrastive pairs".into(),
            });
        }
        orphans.extend(pairing.orphans);
        layer_pairs.push((layer, pairing.pairs));
    }
    if let Some((&layer, _)) = by_layer.iter().next() {
        return Err(ProbeError::Store(StoreError::LayerOutOfRange {
            layer: i64::from(layer),
            layers: header.layers,
        }));
    }

    let probes = layer_pairs
        .into_par_iter()
        .map(|(layer, pairs)| fit_layer(layer, pairs, training))
        .collect::<Result<Vec<_>>>()?;

    Ok(ProbeSetFit {
        probe_set: ProbeSet {
            concept: header.concept.clone(),
            model_id: header.model_id.clone(),
            d: header.d,
            layers: header.layers,
            training,
            probes,
        },
        orphans,
    })
}

fn fit_layer(layer: u32, pairs: Vec<ContrastivePair>, training: ProbeTraining) -> Result<Probe> {
    let n = pairs.len();
    let n_train = ((n as f64 * training.split_fraction).floor() as usize).min(n - 1);
    if n_train < MIN_TRAIN_PAIRS {
        return Err(ProbeError::InsufficientData {
            layer: Some(layer),
            reason: format!(
                "{n} pairs give {n_train} training pairs, need at least {MIN_TRAIN_PAIRS}"
            ),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(derive_seed(training.seed, u64::from(layer))).shuffle(&mut order);
    let (train_idx, heldout_idx) = order.split_at(n_train);

    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();
    // Renumber so the sign alternation runs over the training subset itself.
    let train: Vec<ContrastivePair> = train_idx
        .iter()
        .enumerate()
        .map(|(ordinal, &i)| ContrastivePair {
            ordinal,
            ..pairs[i].clone()
        })
        .collect();
    let heldout: Vec<ContrastivePair> = heldout_idx.iter().map(|&i| pairs[i].clone()).collect();

    let matrix = build_difference_matrix(&train)?;
    let mut probe = fit_probe(&matrix, layer)?;
    probe.heldout_accuracy = classify_pair_accuracy(&probe, &heldout)?;
    probe.heldout_pairs = heldout.len();
    Ok(probe)
}

#[derive(Debug, Serialize, Deserialize)]
struct ProbeManifest {
    format: String,
    version: u32,
    concept: String,
    model_id: String,
    d: usize,
    #[serde(rename = "L")]
    layers: u32,
    seed: u64,
    split_fraction: f64,
    blob: String,
    blob_layout: String,
    probes: Vec<ManifestLayer>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLayer {
    layer_index: u32,
    heldout_accuracy: f64,
    train_pairs: usize,
    heldout_pairs: usize,
}

const BLOB_LAYOUT: &str = "per layer in order: direction d x f32le, then center d x f32le";

/// Path of the binary blob that accompanies a manifest (`x.json` -> `x.bin`).
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn encode_blob(set: &ProbeSet) -> Vec<u8> {
    let mut blob = Vec::with_capacity(set.probes.len() * set.d * 8);
    for probe in &set.probes {
        for x in probe.direction.iter().chain(&probe.center) {
            blob.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    blob
}

fn encode_manifest(set: &ProbeSet, blob_name: &str) -> Vec<u8> {
    let manifest = ProbeManifest {
        format: PROBE_FORMAT.into(),
        version: PROBE_FORMAT_VERSION,
        concept: set.concept.clone(),
        model_id: set.model_id.clone(),
        d: set.d,
        layers: set.layers,
        seed: set.training.seed,
        split_fraction: set.training.split_fraction,
        blob: blob_name.into(),
        blob_layout: BLOB_LAYOUT.into(),
        probes: set
            .probes
            .iter()
            .map(|p| ManifestLayer {
                layer_index: p.layer_index,
                heldout_accuracy: p.heldout_accuracy,
                train_pairs: p.train_pairs,
                heldout_pairs: p.heldout_pairs,
            })
            .collect(),
    };
    let mut out = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    out.push(b'\n');
    out
}

/// Writes the JSON manifest and its sibling float32 blob. Both files are
/// staged first; nothing is renamed into place unless both were written.
pub fn save_probe_set(set: &ProbeSet, manifest_path: &Path) -> Result<()> {
    let blob_file = blob_path(manifest_path);
    let blob_name = blob_file
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| ProbeError::Format("manifest path has no file name".into()))?
        .to_string();
    let blob = encode_blob(set);
    let manifest = encode_manifest(set, &blob_name);
    let staged_blob =
        crate::io::stage(&blob_file, |f| f.write_all(&blob).map_err(ProbeError::from))?;
    let staged_manifest = crate::io::stage(manifest_path, |f| {
        f.write_all(&manifest).map_err(ProbeError::from)
    })?;
    staged_blob.commit(&blob_file)?;
    staged_manifest.commit(manifest_path)?;
    Ok(())
}

/// Loads a probe set. Directions are re-normalized in f64 after the float32
/// round trip.
pub fn load_probe_set(manifest_path: &Path) -> Result<ProbeSet> {
    let manifest: ProbeManifest = serde_json::from_slice(&fs::read(manifest_path)?)
        .map_err(|e| ProbeError::Format(e.to_string()))?;
    if manifest.format != PROBE_FORMAT || manifest.version != PROBE_FORMAT_VERSION {
        return Err(ProbeError::Format(format!(
            "unsupported probe format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let blob_file = manifest_path.with_file_name(&manifest.blob);
    let blob = fs::read(&blob_file)?;
    let d = manifest.d;
    let expected = manifest.layers as usize * 2 * d * 4;
    if blob.len() != expected {
        return Err(ProbeError::Format(format!(
            "blob {} has {} bytes, expected {expected}",
            blob_file.display(),
            blob.len()
        )));
    }
    if manifest.probes.len() != manifest.layers as usize
        || manifest
            .probes
            .iter()
            .enumerate()
            .any(|(i, p)| p.layer_index as usize != i)
    {
        return Err(ProbeError::Format(
            "manifest must list layers 0..L-1 exactly once, in order".into(),
        ));
    }
    let floats: Vec<f64> = blob
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let probes = manifest
        .probes
        .iter()
        .zip(floats.chunks_exact(2 * d.max(1)))
        .map(|(meta, chunk)| {
            let mut direction = chunk[..d].to_vec();
            let len = norm(&direction);
            if len > 0.0 {
                direction.iter_mut().for_each(|x| *x /= len);
            }
            Probe {
                layer_index: meta.layer_index,
                direction,
                center: chunk[d..].to_vec(),
                heldout_accuracy: meta.heldout_accuracy,
                train_pairs: meta.train_pairs,
                heldout_pairs: meta.heldout_pairs,
            }
        })
        .collect();
    Ok(ProbeSet {
        concept: manifest.concept,
        model_id: manifest.model_id,
        d,
        layers: manifest.layers,
        training: ProbeTraining {
            seed: manifest.seed,
            split_fraction: manifest.split_fraction,
        },
        probes,
    })
}
