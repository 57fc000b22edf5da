//! Shifted 12-class azimuth grids and the LDA ensemble trained on them.
//!
//! Class `j` of grid `k` covers the arc `[30j + 5k, 30j + 5k + 30)` degrees,
//! so grid 0 has a class boundary at 0 degrees and the six grids together
//! resolve 5 degree bins.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureFrame, FilterbankConfig};
use crate::hash::{mix_seed, sha256_hex};

pub const CLASS_COUNT: usize = 12;
pub const SET_COUNT: usize = 6;
pub const CLASS_WIDTH_DEG: f64 = 30.0;
pub const SET_SHIFT_DEG: f64 = 5.0;
/// Condition number above which the pooled covariance is shrunk.
pub const MAX_CONDITION: f64 = 1e8;
pub const GRID_CONVENTION: &str = "edge-aligned:start=30j+5k:v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassGrid {
    set_index: usize,
}

impl ClassGrid {
    pub fn new(set_index: usize) -> Result<Self> {
        if set_index >= SET_COUNT {
            return Err(Error::Argument(format!(
                "grid index {set_index} out of 0..{SET_COUNT}"
            )));
        }
        Ok(Self { set_index })
    }

    pub fn all() -> impl Iterator<Item = ClassGrid> {
        (0..SET_COUNT).map(|k| ClassGrid { set_index: k })
    }

    pub fn set_index(&self) -> usize {
        self.set_index
    }

    pub fn shift_deg(&self) -> f64 {
        SET_SHIFT_DEG * self.set_index as f64
    }

    /// Start of the class arc in degrees, in [0, 360).
    pub fn arc_start_deg(&self, class: usize) -> f64 {
        (CLASS_WIDTH_DEG * class as f64 + self.shift_deg()).rem_euclid(360.0)
    }

    pub fn class_of(&self, azimuth_deg: f64) -> Result<usize> {
        if !(0.0..360.0).contains(&azimuth_deg) {
            return Err(Error::Argument(format!(
                "azimuth {azimuth_deg} outside [0, 360)"
            )));
        }
        let rel = (azimuth_deg - self.shift_deg()).rem_euclid(360.0);
        Ok(((rel / CLASS_WIDTH_DEG).floor() as usize).min(CLASS_COUNT - 1))
    }
}

pub fn class_of_azimuth(azimuth_deg: f64, grid: &ClassGrid) -> Result<usize> {
    grid.class_of(azimuth_deg)
}

/// Gaussian classifier with class means and a shared covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaModel {
    pub dim: usize,
    /// `None` for classes absent from the training data.
    pub class_means: Vec<Option<Vec<f64>>>,
    /// Row-major `dim x dim` inverse of the (possibly shrunk) pooled covariance.
    pub covariance_inverse: Vec<f64>,
    pub class_priors: Vec<f64>,
    pub shrinkage_used: f64,
    weights: Vec<Option<Vec<f64>>>,
    biases: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LdaModel {
    /// Fit on `rows` with labels in `0..class_count`.
    pub fn fit(rows: &[&[f64]], labels: &[usize], class_count: usize) -> Result<Self> {
        if rows.len() != labels.len() || rows.is_empty() {
            return Err(Error::Training(format!(
                "{} feature rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let dim = rows[0].len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Training(
                "feature rows must share a nonzero length".into(),
            ));
        }
        if rows.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::Training("features must be finite".into()));
        }
        let mut counts = vec![0usize; class_count];
        for &l in labels {
            if l >= class_count {
                return Err(Error::Training(format!(
                    "label {l} out of 0..{class_count}"
                )));
            }
            counts[l] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 1) {
            return Err(Error::Training(format!("class {c} has a single sample")));
        }
        let present = counts.iter().filter(|&&n| n > 0).count();
        let n = rows.len();
        if n <= present {
            return Err(Error::Training(
                "not enough samples for a pooled covariance".into(),
            ));
        }

        let mut sums = vec![vec![0.0; dim]; class_count];
        for (r, &l) in rows.iter().zip(labels) {
            for (s, v) in sums[l].iter_mut().zip(r.iter()) {
                *s += v;
            }
        }
        let means: Vec<Option<Vec<f64>>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
            .collect();

        let residuals = DMatrix::from_fn(n, dim, |i, j| {
            rows[i][j]
                - means[labels[i]]
                    .as_ref()
                    .expect("labelled class has a mean")[j]
        });
        let scatter = residuals.transpose() * &residuals;
        let pooled = &scatter / (n - present) as f64;
        let trace = pooled.trace();
        if !(trace > 1e-300) {
            return Err(Error::DegenerateData(
                "features do not vary within classes".into(),
            ));
        }

        let (covariance, shrinkage_used) = shrink_if_ill_conditioned(&pooled, &residuals);
        let inverse = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::DegenerateData("covariance is not positive definite".into()))?
            .inverse();
        let inverse = (&inverse + inverse.transpose()) * 0.5;

        let prior = 1.0 / present as f64;
        let class_priors: Vec<f64> = counts
            .iter()
            .map(|&c| if c > 0 { prior } else { 0.0 })
            .collect();
        let mut weights = Vec::with_capacity(class_count);
        let mut biases = Vec::with_capacity(class_count);
        for (mean, &p) in means.iter().zip(&class_priors) {
            match mean {
                Some(mu) => {
                    let w = &inverse * DVector::from_column_slice(mu);
                    let w: Vec<f64> = w.iter().copied().collect();
                    biases.push(-0.5 * dot(&w, mu) + p.ln());
                    weights.push(Some(w));
                }
                None => {
                    biases.push(0.0);
                    weights.push(None);
                }
            }
        }
        Ok(Self {
            dim,
            class_means: means,
            covariance_inverse: inverse.transpose().iter().copied().collect(),
            class_priors,
            shrinkage_used,
            weights,
            biases,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_means.len()
    }

    /// Linear discriminant scores; absent classes score `-inf`.
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| match w {
                Some(w) => dot(w, x) + b,
                None => f64::NEG_INFINITY,
            })
            .collect()
    }

    /// Highest-scoring class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (c, s) in self.scores(x).into_iter().enumerate() {
            if s > best_score {
                best = c;
                best_score = s;
            }
        }
        best
    }
}

/// Shrink toward a scaled identity when the condition number exceeds
/// [`MAX_CONDITION`]. The intensity is the larger of the Ledoit-Wolf estimate
/// and the smallest intensity meeting the condition bound.
fn shrink_if_ill_conditioned(
    pooled: &DMatrix<f64>,
    residuals: &DMatrix<f64>,
) -> (DMatrix<f64>, f64) {
    let p = pooled.nrows();
    let eig = SymmetricEigen::new(pooled.clone());
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min().max(0.0);
    if lmin > 0.0 && lmax / lmin <= MAX_CONDITION {
        return (pooled.clone(), 0.0);
    }
    let mu = pooled.trace() / p as f64;
    let target = MAX_CONDITION * 0.5;
    let bound =
        ((lmax - target * lmin) / (lmax - target * lmin + mu * (target - 1.0))).clamp(0.0, 1.0);

    let n = residuals.nrows() as f64;
    let identity_gap = pooled - DMatrix::identity(p, p) * mu;
    let d2 = identity_gap.norm_squared();
    let s_norm2 = pooled.norm_squared();
    let mut b2 = 0.0;
    for row in residuals.row_iter() {
        let x = row.transpose();
        let xx = x.norm_squared();
        b2 += xx * xx - 2.0 * (x.transpose() * pooled * &x)[(0, 0)] + s_norm2;
    }
    let b2 = (b2 / (n * n)).min(d2);
    let lw = if d2 > 0.0 { b2 / d2 } else { 1.0 };

    let delta = lw.max(bound).clamp(0.0, 1.0);
    let shrunk = pooled * (1.0 - delta) + DMatrix::identity(p, p) * (delta * mu);
    (shrunk, delta)
}

pub fn train_lda(features: &[FeatureFrame], labels: &[usize]) -> Result<LdaModel> {
    let rows: Vec<&[f64]> = features.iter().map(|f| f.values.as_slice()).collect();
    LdaModel::fit(&rows, labels, CLASS_COUNT)
}

/// A feature frame with its ground-truth source azimuth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledFrame {
    pub features: FeatureFrame,
    pub azimuth_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingOptions {
    pub repeats: usize,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        Self {
            repeats: 5,
            folds: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub set_index: usize,
    pub class_index: usize,
}

/// `SET_COUNT` grids, each with `repeats * folds` cross-validation models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaEnsemble {
    pub grid_convention: String,
    #[serde(with = "crate::hash::hex_serde")]
    pub config_hash: u64,
    pub filterbank_config: FilterbankConfig,
    pub seed: u64,
    pub repeats: usize,
    pub folds: usize,
    /// Mean held-out misclassification rate over all models.
    pub cv_error: f64,
    pub models: Vec<Vec<LdaModel>>,
}

/// Stratified fold index of every sample, for one grid and one repeat.
pub fn fold_assignment(labels: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; labels.len()];
    for class in 0..CLASS_COUNT {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for (pos, &i) in members.iter().enumerate() {
            assignment[i] = pos % folds;
        }
    }
    assignment
}

fn split_seed(seed: u64, set: usize, repeat: usize) -> u64 {
    mix_seed(mix_seed(seed, set as u64 + 1), repeat as u64 + 101)
}

struct FoldTask {
    set: usize,
    repeat: usize,
}

fn train_repeat(
    rows: &[&[f64]],
    labels: &[usize],
    folds: usize,
    seed: u64,
    task: &FoldTask,
) -> Result<(Vec<LdaModel>, usize, usize)> {
    let assignment = fold_assignment(labels, folds, split_seed(seed, task.set, task.repeat));
    let mut models = Vec::with_capacity(folds);
    let (mut wrong, mut tested) = (0, 0);
    for fold in 0..folds {
        let (train_rows, train_labels): (Vec<&[f64]>, Vec<usize>) = rows
            .iter()
            .zip(labels)
            .zip(&assignment)
            .filter(|(_, &a)| a != fold)
            .map(|((r, l), _)| (*r, *l))
            .unzip();
        let model = LdaModel::fit(&train_rows, &train_labels, CLASS_COUNT)?;
        for ((r, &l), _) in rows
            .iter()
            .zip(labels)
            .zip(&assignment)
            .filter(|(_, &a)| a == fold)
        {
            tested += 1;
            if model.predict(r) != l {
                wrong += 1;
            }
        }
        models.push(model);
    }
    Ok((models, wrong, tested))
}

/// Train `SET_COUNT x repeats x folds` models with stratified repeated
/// k-fold cross-validation on each grid's relabelling of the data.
pub fn train_ensemble(
    dataset: &[LabeledFrame],
    filterbank: &FilterbankConfig,
    options: &TrainingOptions,
) -> Result<LdaEnsemble> {
    let TrainingOptions {
        repeats,
        folds,
        seed,
    } = *options;
    if repeats == 0 || folds < 2 {
        return Err(Error::Training(
            "need at least one repeat and two folds".into(),
        ));
    }
    let first = dataset
        .first()
        .ok_or_else(|| Error::Training("empty dataset".into()))?;
    let config_hash = first.features.config_hash;
    if dataset
        .iter()
        .any(|f| f.features.config_hash != config_hash)
    {
        return Err(Error::Training(
            "frames come from different configurations".into(),
        ));
    }
    let mut per_azimuth = [0usize; 72];
    for f in dataset {
        if !(0.0..360.0).contains(&f.azimuth_deg) {
            return Err(Error::Training(format!(
                "azimuth {} outside [0, 360)",
                f.azimuth_deg
            )));
        }
        per_azimuth[(f.azimuth_deg / SET_SHIFT_DEG).floor() as usize % 72] += 1;
    }
    if let Some(b) = per_azimuth.iter().position(|&c| c < folds) {
        return Err(Error::Training(format!(
            "direction {} deg has {} frames, {folds}-fold cross-validation needs {folds}",
            b as f64 * SET_SHIFT_DEG,
            per_azimuth[b]
        )));
    }

    let rows: Vec<&[f64]> = dataset
        .iter()
        .map(|f| f.features.values.as_slice())
        .collect();
    let grid_labels: Vec<Vec<usize>> = ClassGrid::all()
        .map(|g| {
            dataset
                .iter()
                .map(|f| g.class_of(f.azimuth_deg))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let tasks: Vec<FoldTask> = (0..SET_COUNT)
        .flat_map(|set| (0..repeats).map(move |repeat| FoldTask { set, repeat }))
        .collect();
    let run = |t: &FoldTask| train_repeat(&rows, &grid_labels[t.set], folds, seed, t);
    #[cfg(feature = "parallel")]
    let results: Vec<_> = {
        use rayon::prelude::*;
        tasks.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = tasks.iter().map(run).collect();

    let mut models: Vec<Vec<LdaModel>> = (0..SET_COUNT)
        .map(|_| Vec::with_capacity(repeats * folds))
        .collect();
    let (mut wrong, mut tested) = (0, 0);
    for (task, result) in tasks.iter().zip(results) {
        let (m, w, t) = result?;
        models[task.set].extend(m);
        wrong += w;
        tested += t;
    }
    Ok(LdaEnsemble {
        grid_convention: GRID_CONVENTION.to_string(),
        config_hash,
        filterbank_config: filterbank.clone(),
        seed,
        repeats,
        folds,
        cv_error: wrong as f64 / tested.max(1) as f64,
        models,
    })
}

impl LdaEnsemble {
    pub fn model_count(&self) -> usize {
        self.models.iter().map(Vec::len).sum()
    }

    pub fn predict(&self, frame: &FeatureFrame) -> Result<Vec<Prediction>> {
        if frame.config_hash != self.config_hash {
            return Err(Error::Compatibility(format!(
                "frame stamped {:016x}, ensemble trained on {:016x}",
                frame.config_hash, self.config_hash
            )));
        }
        Ok(self
            .models
            .iter()
            .enumerate()
            .flat_map(|(set_index, set)| {
                set.iter().map(move |m| Prediction {
                    set_index,
                    class_index: m.predict(&frame.values),
                })
            })
            .collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("ensemble serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let e: Self = serde_json::from_str(text)?;
        if e.grid_convention != GRID_CONVENTION {
            return Err(Error::Compatibility(format!(
                "model uses grid convention {:?}, expected {GRID_CONVENTION:?}",
                e.grid_convention
            )));
        }
        Ok(e)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the serialized model file.
    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }
}

pub fn predict_frame(ensemble: &LdaEnsemble, frame: &FeatureFrame) -> Result<Vec<Prediction>> {
    ensemble.predict(frame)
}
