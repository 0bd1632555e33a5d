//! Linear SVM benchmark on the per-run feature vectors.
//!
//! Standardization is fit on training rows only. The SVM minimizes the
//! L2-regularized hinge loss by full-batch subgradient descent and returns
//! the best averaged iterate, so training is a pure function of the data.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureRecord, FEATURE_NAMES};
use crate::io::{self, IoError};
use crate::seeds::{derive_seed, stream_rng, LABEL_FOLDS, LABEL_PERMUTATION};

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("column {column} has zero variance")]
    Degenerate { column: usize },
    #[error("both classes are required, got {positives} positive and {negatives} negative")]
    SingleClass { positives: usize, negatives: usize },
    #[error("cannot stratify: class {class} has {count} members for {k} folds")]
    Stratification { class: bool, count: usize, k: usize },
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<ClassifyError>,
    },
    #[error("non-finite value at row {row}, column {column}")]
    NonFinite { row: usize, column: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid classifier config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    pub run_ids: Vec<usize>,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        rows: Vec<Vec<f64>>,
        labels: Vec<bool>,
        run_ids: Vec<usize>,
        feature_names: Vec<String>,
    ) -> Result<Self, ClassifyError> {
        if rows.len() != labels.len() || rows.len() != run_ids.len() {
            return Err(ClassifyError::Shape(format!(
                "{} rows, {} labels, {} ids",
                rows.len(),
                labels.len(),
                run_ids.len()
            )));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != feature_names.len() {
                return Err(ClassifyError::Shape(format!(
                    "row {i} has {} columns, expected {}",
                    r.len(),
                    feature_names.len()
                )));
            }
            if let Some(j) = r.iter().position(|v| !v.is_finite()) {
                return Err(ClassifyError::NonFinite { row: i, column: j });
            }
        }
        Ok(Self {
            rows,
            labels,
            run_ids,
            feature_names,
        })
    }

    /// Valid records only, in the fixed four-feature column order.
    pub fn from_records(records: &[FeatureRecord]) -> Result<Self, ClassifyError> {
        let valid: Vec<&FeatureRecord> = records.iter().filter(|r| r.features.valid).collect();
        Self::new(
            valid.iter().map(|r| r.features.slopes().to_vec()).collect(),
            valid.iter().map(|r| r.features.label).collect(),
            valid.iter().map(|r| r.run_id).collect(),
            FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// `(negatives, positives)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l).count();
        (self.labels.len() - pos, pos)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            run_ids: idx.iter().map(|&i| self.run_ids[i]).collect(),
            feature_names: self.feature_names.clone(),
        }
    }

    pub fn without_column(&self, col: usize) -> Self {
        let drop = |r: &Vec<f64>| {
            r.iter()
                .enumerate()
                .filter(|(j, _)| *j != col)
                .map(|(_, v)| *v)
                .collect()
        };
        Self {
            rows: self.rows.iter().map(drop).collect(),
            labels: self.labels.clone(),
            run_ids: self.run_ids.clone(),
            feature_names: self
                .feature_names
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != col)
                .map(|(_, n)| n.clone())
                .collect(),
        }
    }

    fn require_both_classes(&self) -> Result<(), ClassifyError> {
        let (negatives, positives) = self.class_counts();
        if negatives == 0 || positives == 0 {
            return Err(ClassifyError::SingleClass { positives, negatives });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Column means and population standard deviations.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self, ClassifyError> {
        let m = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if m == 0 {
            return Err(ClassifyError::Shape("empty training set".into()));
        }
        let mut mean = vec![0.0; p];
        for r in rows {
            for (acc, v) in mean.iter_mut().zip(r) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0; p];
        for r in rows {
            for j in 0..p {
                var[j] += (r[j] - mean[j]).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / m as f64).sqrt()).collect();
        if let Some(column) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(ClassifyError::Degenerate { column });
        }
        Ok(Self { mean, std })
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn transform(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.transform_row(r)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmHyperparams {
    /// Regularization strength; `None` means `1/(2m)` for `m` training rows.
    pub lambda: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
    pub eta0: f64,
    pub t0: f64,
}

impl Default for SvmHyperparams {
    fn default() -> Self {
        Self {
            lambda: None,
            max_iter: 10_000,
            tol: 1e-6,
            eta0: 1.0,
            t0: 100.0,
        }
    }
}

impl SvmHyperparams {
    pub fn validate(&self) -> Result<(), ClassifyError> {
        if let Some(l) = self.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(ClassifyError::InvalidConfig(format!("lambda = {l}")));
            }
        }
        if self.max_iter == 0 {
            return Err(ClassifyError::InvalidConfig("max_iter = 0".into()));
        }
        if !(self.tol >= 0.0) || !(self.eta0 > 0.0) || !(self.t0 > 0.0) {
            return Err(ClassifyError::InvalidConfig("tol must be >= 0, eta0 and t0 > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub w: Vec<f64>,
    pub b: f64,
    pub lambda: f64,
}

impl SvmModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b
    }

    /// Breakdown is predicted on the non-negative side of the boundary.
    pub fn predict(&self, x: &[f64]) -> bool {
        self.decision(x) >= 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmFit {
    pub model: SvmModel,
    /// Objective of the best averaged iterate after each iteration.
    pub loss_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn sign(label: bool) -> f64 {
    if label {
        1.0
    } else {
        -1.0
    }
}

/// `(1/m) Σ max(0, 1 − yᵢ(w·xᵢ + b)) + λ‖w‖²`.
pub fn svm_objective(x: &[Vec<f64>], y: &[bool], w: &[f64], b: f64, lambda: f64) -> f64 {
    let m = x.len() as f64;
    let hinge: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, &yi)| {
            let f: f64 = w.iter().zip(xi).map(|(a, v)| a * v).sum::<f64>() + b;
            (1.0 - sign(yi) * f).max(0.0)
        })
        .sum();
    hinge / m + lambda * w.iter().map(|v| v * v).sum::<f64>()
}

pub fn svm_train(x: &[Vec<f64>], y: &[bool], hp: &SvmHyperparams) -> Result<SvmFit, ClassifyError> {
    hp.validate()?;
    let m = x.len();
    let p = x.first().map_or(0, Vec::len);
    let positives = y.iter().filter(|&&l| l).count();
    if positives == 0 || positives == m {
        return Err(ClassifyError::SingleClass {
            positives,
            negatives: m - positives,
        });
    }
    let lambda = hp.lambda.unwrap_or(1.0 / (2.0 * m as f64));
    let ys: Vec<f64> = y.iter().map(|&l| sign(l)).collect();

    let mut w = vec![0.0; p];
    let mut b = 0.0;
    let mut w_sum = vec![0.0; p];
    let mut b_sum = 0.0;
    let mut best = (svm_objective(x, y, &w, b, lambda), w.clone(), b);
    let mut trace = Vec::with_capacity(hp.max_iter);
    let mut last_check = best.0;
    let mut converged = false;
    let mut iterations = 0;

    let mut gw = vec![0.0; p];
    for t in 0..hp.max_iter {
        iterations = t + 1;
        gw.iter_mut().zip(&w).for_each(|(g, wj)| *g = 2.0 * lambda * wj);
        let mut gb = 0.0;
        for (xi, yi) in x.iter().zip(&ys) {
            let f: f64 = w.iter().zip(xi).map(|(a, v)| a * v).sum::<f64>() + b;
            if yi * f < 1.0 {
                for (g, v) in gw.iter_mut().zip(xi) {
                    *g -= yi * v / m as f64;
                }
                gb -= yi / m as f64;
            }
        }
        let eta = hp.eta0 * hp.t0 / (hp.t0 + t as f64);
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= eta * g;
        }
        b -= eta * gb;

        for (s, wj) in w_sum.iter_mut().zip(&w) {
            *s += wj;
        }
        b_sum += b;
        let n = (t + 1) as f64;
        let w_avg: Vec<f64> = w_sum.iter().map(|s| s / n).collect();
        let b_avg = b_sum / n;
        let obj = svm_objective(x, y, &w_avg, b_avg, lambda);
        if obj < best.0 {
            best = (obj, w_avg, b_avg);
        }
        trace.push(best.0);

        if (t + 1) % 100 == 0 {
            if last_check - best.0 < hp.tol {
                converged = true;
                break;
            }
            last_check = best.0;
        }
    }
    let (_, w, b) = best;
    if w.iter().any(|v| !v.is_finite()) || !b.is_finite() {
        return Err(ClassifyError::Shape("optimizer produced non-finite weights".into()));
    }
    Ok(SvmFit {
        model: SvmModel { w, b, lambda },
        loss_trace: trace,
        iterations,
        converged,
    })
}

/// Mean of the per-class recalls.
pub fn balanced_accuracy(y_true: &[bool], y_pred: &[bool]) -> Result<f64, ClassifyError> {
    if y_true.len() != y_pred.len() {
        return Err(ClassifyError::Shape("prediction length mismatch".into()));
    }
    let (mut tp, mut pos, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t {
            pos += 1;
            tp += usize::from(p);
        } else {
            neg += 1;
            tn += usize::from(!p);
        }
    }
    if pos == 0 || neg == 0 {
        return Err(ClassifyError::SingleClass {
            positives: pos,
            negatives: neg,
        });
    }
    Ok(0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64))
}

/// Fold index per sample. Each class is shuffled with the seeded RNG and dealt
/// round-robin; the fold pointer carries over between classes so fold sizes
/// stay balanced too.
pub fn stratified_kfold(labels: &[bool], k: usize, seed: u64) -> Result<Vec<usize>, ClassifyError> {
    if k < 2 {
        return Err(ClassifyError::InvalidConfig(format!("k = {k}")));
    }
    let mut rng = stream_rng(derive_seed(seed, LABEL_FOLDS, 0), 0);
    let mut folds = vec![0; labels.len()];
    let mut next = 0;
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < k {
            return Err(ClassifyError::Stratification {
                class,
                count: idx.len(),
                k,
            });
        }
        idx.shuffle(&mut rng);
        for i in idx {
            folds[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(folds)
}

fn split(folds: &[usize], fold: usize) -> (Vec<usize>, Vec<usize>) {
    (0..folds.len()).partition(|&i| folds[i] != fold)
}

/// Scaler and model trained on one fold's training rows.
#[derive(Debug, Clone)]
pub struct FoldModel {
    pub fold: usize,
    pub scaler: Scaler,
    pub model: SvmModel,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub score: f64,
}

fn fit_fold(data: &Dataset, folds: &[usize], fold: usize, hp: &SvmHyperparams) -> Result<FoldModel, ClassifyError> {
    let (train, validation) = split(folds, fold);
    let tr = data.subset(&train);
    tr.require_both_classes()?;
    let scaler = Scaler::fit(&tr.rows)?;
    let fit = svm_train(&scaler.transform(&tr.rows), &tr.labels, hp)?;
    let va = data.subset(&validation);
    let pred: Vec<bool> = va
        .rows
        .iter()
        .map(|r| fit.model.predict(&scaler.transform_row(r)))
        .collect();
    let score = balanced_accuracy(&va.labels, &pred)?;
    Ok(FoldModel {
        fold,
        scaler,
        model: fit.model,
        train,
        validation,
        score,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub scores: Vec<f64>,
    pub mean: f64,
}

/// Trains one model per fold of a precomputed assignment.
pub fn fit_folds(
    data: &Dataset,
    folds: &[usize],
    k: usize,
    hp: &SvmHyperparams,
) -> Result<Vec<FoldModel>, ClassifyError> {
    if folds.len() != data.len() {
        return Err(ClassifyError::Shape("fold assignment length".into()));
    }
    (0..k)
        .into_par_iter()
        .map(|f| {
            fit_fold(data, folds, f, hp).map_err(|e| ClassifyError::Fold {
                fold: f,
                source: Box::new(e),
            })
        })
        .collect()
}

fn summarize(models: &[FoldModel]) -> CvResult {
    let scores: Vec<f64> = models.iter().map(|m| m.score).collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    CvResult { scores, mean }
}

pub fn cross_validate(data: &Dataset, k: usize, seed: u64, hp: &SvmHyperparams) -> Result<CvResult, ClassifyError> {
    let folds = stratified_kfold(&data.labels, k, seed)?;
    Ok(summarize(&fit_folds(data, &folds, k, hp)?))
}

/// Full-set CV mean minus the CV mean with each column removed.
pub fn drop_column_importance(
    data: &Dataset,
    folds: &[usize],
    k: usize,
    hp: &SvmHyperparams,
) -> Result<Vec<f64>, ClassifyError> {
    if data.n_features() < 2 {
        return Err(ClassifyError::Shape("need at least two features".into()));
    }
    let full = summarize(&fit_folds(data, folds, k, hp)?).mean;
    (0..data.n_features())
        .map(|j| Ok(full - summarize(&fit_folds(&data.without_column(j), folds, k, hp)?).mean))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub mean: f64,
    pub std: f64,
}

/// Balanced accuracy of a fold model after shuffling column `col` among the
/// given validation rows.
pub fn permuted_score(
    fm: &FoldModel,
    rows: &[Vec<f64>],
    labels: &[bool],
    col: usize,
    seed: u64,
) -> Result<f64, ClassifyError> {
    let mut column: Vec<f64> = rows.iter().map(|r| r[col]).collect();
    column.shuffle(&mut stream_rng(seed, 0));
    let pred: Vec<bool> = rows
        .iter()
        .zip(&column)
        .map(|(r, &v)| {
            let mut r = r.clone();
            r[col] = v;
            fm.model.predict(&fm.scaler.transform_row(&r))
        })
        .collect();
    balanced_accuracy(labels, &pred)
}

/// Drop in validation balanced accuracy when one column is shuffled, over
/// `repeats` seeded permutations of every fold.
pub fn permutation_importance(
    data: &Dataset,
    models: &[FoldModel],
    repeats: usize,
    seed: u64,
) -> Result<Vec<Importance>, ClassifyError> {
    let k = models.len();
    (0..data.n_features())
        .map(|col| {
            let drops: Vec<f64> = (0..repeats * k)
                .into_par_iter()
                .map(|i| {
                    let (r, f) = (i / k, i % k);
                    let fm = &models[f];
                    let va = data.subset(&fm.validation);
                    let s = derive_seed(seed, LABEL_PERMUTATION, ((col * repeats + r) * k + f) as u64);
                    Ok(fm.score - permuted_score(fm, &va.rows, &va.labels, col, s)?)
                })
                .collect::<Result<_, ClassifyError>>()?;
            let n = drops.len() as f64;
            let mean = drops.iter().sum::<f64>() / n;
            let var = drops.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
            Ok(Importance { mean, std: var.sqrt() })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// `(pc1, pc2)` per sample.
    pub coords: Vec<[f64; 2]>,
    pub explained_variance: [f64; 2],
    /// Loadings of the two components, one vector per component.
    pub components: [Vec<f64>; 2],
}

/// Projection onto the top two eigenvectors of the sample covariance.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Pca, ClassifyError> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    if n < 2 || p < 2 {
        return Err(ClassifyError::Shape(format!(
            "pca needs >= 2 rows and columns, got {n}x{p}"
        )));
    }
    let mut mean = vec![0.0; p];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, p, |i, j| rows[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    if !(total > 0.0) {
        return Err(ClassifyError::Degenerate { column: 0 });
    }
    let component = |c: usize| -> Vec<f64> {
        let v: Vec<f64> = eig.eigenvectors.column(order[c]).iter().copied().collect();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        if lead < 0.0 {
            v.iter().map(|x| -x).collect()
        } else {
            v
        }
    };
    let components = [component(0), component(1)];
    let coords = (0..n)
        .map(|i| {
            let proj = |c: &Vec<f64>| (0..p).map(|j| centered[(i, j)] * c[j]).sum::<f64>();
            [proj(&components[0]), proj(&components[1])]
        })
        .collect();
    Ok(Pca {
        coords,
        explained_variance: [
            eig.eigenvalues[order[0]].max(0.0) / total,
            eig.eigenvalues[order[1]].max(0.0) / total,
        ],
        components,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaSummary {
    pub coords: String,
    pub explained_variance: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub cv_scores: Vec<f64>,
    pub cv_mean: f64,
    pub drop_column: BTreeMap<String, f64>,
    pub permutation: BTreeMap<String, Importance>,
    pub pca: PcaSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub k_folds: usize,
    pub permutation_repeats: usize,
    pub svm: SvmHyperparams,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            k_folds: 5,
            permutation_repeats: 20,
            svm: SvmHyperparams::default(),
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<(), ClassifyError> {
        if self.k_folds < 2 {
            return Err(ClassifyError::InvalidConfig(format!("k_folds = {}", self.k_folds)));
        }
        if self.permutation_repeats == 0 {
            return Err(ClassifyError::InvalidConfig("permutation_repeats = 0".into()));
        }
        self.svm.validate()
    }
}

/// Everything the classification stage produces before it is written out.
#[derive(Debug, Clone)]
pub struct Classification {
    pub cv: CvResult,
    pub drop_column: Vec<f64>,
    pub permutation: Vec<Importance>,
    pub pca: Pca,
    /// SVM trained on the whole standardized dataset, for the decision line.
    pub full_model: SvmModel,
}

pub fn classify(data: &Dataset, cfg: &ClassifierConfig, seed: u64) -> Result<Classification, ClassifyError> {
    cfg.validate()?;
    data.require_both_classes()?;
    let k = cfg.k_folds;
    let folds = stratified_kfold(&data.labels, k, seed)?;
    let models = fit_folds(data, &folds, k, &cfg.svm)?;
    let cv = summarize(&models);
    let drop_column = drop_column_importance(data, &folds, k, &cfg.svm)?;
    let permutation = permutation_importance(data, &models, cfg.permutation_repeats, seed)?;
    let scaler = Scaler::fit(&data.rows)?;
    let standardized = scaler.transform(&data.rows);
    let pca = pca_2d(&standardized)?;
    let full_model = svm_train(&standardized, &data.labels, &cfg.svm)?.model;
    Ok(Classification {
        cv,
        drop_column,
        permutation,
        pca,
        full_model,
    })
}

impl Classification {
    pub fn report(&self, data: &Dataset, coords_path: &str) -> ClassificationReport {
        let names = &data.feature_names;
        ClassificationReport {
            cv_scores: self.cv.scores.clone(),
            cv_mean: self.cv.mean,
            drop_column: names.iter().cloned().zip(self.drop_column.iter().copied()).collect(),
            permutation: names.iter().cloned().zip(self.permutation.iter().copied()).collect(),
            pca: PcaSummary {
                coords: coords_path.to_string(),
                explained_variance: self.pca.explained_variance,
            },
        }
    }

    /// Decision function restricted to the PC plane: `a·pc1 + b·pc2 + c`.
    pub fn decision_line(&self) -> [f64; 3] {
        let w = &self.full_model.w;
        let dot = |c: &Vec<f64>| w.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
        [
            dot(&self.pca.components[0]),
            dot(&self.pca.components[1]),
            self.full_model.b,
        ]
    }
}

pub fn write_pca_csv(path: &Path, data: &Dataset, pca: &Pca) -> Result<(), IoError> {
    let mut w = io::csv_writer(path)?;
    let err = io::csv_err(path);
    w.write_record(["run_id", "pc1", "pc2", "label"]).map_err(&err)?;
    for ((id, c), l) in data.run_ids.iter().zip(&pca.coords).zip(&data.labels) {
        w.write_record([id.to_string(), io::fmt_f64(c[0]), io::fmt_f64(c[1]), l.to_string()])
            .map_err(&err)?;
    }
    w.flush().map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::NormalStream;

    fn ds(rows: Vec<Vec<f64>>, labels: Vec<bool>) -> Dataset {
        let p = rows[0].len();
        let n = rows.len();
        Dataset::new(
            rows,
            labels,
            (0..n).collect(),
            (0..p).map(|j| format!("f{j}")).collect(),
        )
        .unwrap()
    }

    /// Two Gaussian classes centred at ±shift on the first axis.
    fn gaussian_toy(n: usize, shift: f64, extra: usize, seed: u64) -> Dataset {
        let mut s = NormalStream::new(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let l = i % 2 == 0;
            let mut r = vec![s.next_normal() + if l { shift } else { -shift }];
            for _ in 0..extra {
                r.push(s.next_normal());
            }
            rows.push(r);
            labels.push(l);
        }
        ds(rows, labels)
    }

    #[test]
    fn scaler_examples() {
        let s = Scaler::fit(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(s.transform(&[vec![0.0], vec![2.0]]), vec![vec![-1.0], vec![1.0]]);
        assert!(matches!(
            Scaler::fit(&[vec![1.0, 3.0], vec![2.0, 3.0]]),
            Err(ClassifyError::Degenerate { column: 1 })
        ));
        let d = gaussian_toy(50, 1.0, 2, 3);
        let s = Scaler::fit(&d.rows).unwrap();
        let t = s.transform(&d.rows);
        for j in 0..3 {
            let col: Vec<f64> = t.iter().map(|r| r[j]).collect();
            let m = col.iter().sum::<f64>() / 50.0;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 50.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn balanced_accuracy_examples() {
        let y = [true, true, false, false, false];
        assert_eq!(balanced_accuracy(&y, &y).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&y, &[true; 5]).unwrap(), 0.5);
        assert_eq!(balanced_accuracy(&y, &[false; 5]).unwrap(), 0.5);
        let mut t = vec![true; 10];
        t.extend([false; 10]);
        let mut p = vec![true; 9];
        p.push(false);
        p.extend([false; 7]);
        p.extend([true; 3]);
        assert!((balanced_accuracy(&t, &p).unwrap() - 0.8).abs() < 1e-15);
        assert!(balanced_accuracy(&[true, true], &[true, false]).is_err());
    }

    #[test]
    fn kfold_balanced_and_counts() {
        let labels: Vec<bool> = (0..10).map(|i| i < 5).collect();
        let f = stratified_kfold(&labels, 5, 1).unwrap();
        for k in 0..5 {
            let pos = (0..10).filter(|&i| f[i] == k && labels[i]).count();
            let neg = (0..10).filter(|&i| f[i] == k && !labels[i]).count();
            assert_eq!((pos, neg), (1, 1));
        }
        assert_eq!(f, stratified_kfold(&labels, 5, 1).unwrap());
        assert_ne!(
            stratified_kfold(&(0..200).map(|i| i % 3 == 0).collect::<Vec<_>>(), 5, 1).unwrap(),
            stratified_kfold(&(0..200).map(|i| i % 3 == 0).collect::<Vec<_>>(), 5, 2).unwrap()
        );

        let labels: Vec<bool> = (0..200).map(|i| i < 103).collect();
        let f = stratified_kfold(&labels, 5, 9).unwrap();
        for k in 0..5 {
            let pos = (0..200).filter(|&i| f[i] == k && labels[i]).count();
            let neg = (0..200).filter(|&i| f[i] == k && !labels[i]).count();
            assert!((20..=21).contains(&pos), "{pos}");
            assert!((19..=20).contains(&neg), "{neg}");
        }
        assert!(matches!(
            stratified_kfold(&[true, true, false, false, false, false, false], 5, 0),
            Err(ClassifyError::Stratification {
                class: true,
                count: 2,
                k: 5
            })
        ));
    }

    #[test]
    fn svm_separable() {
        let rows = vec![
            vec![2.0, 0.5],
            vec![1.5, -1.0],
            vec![3.0, 1.0],
            vec![-2.0, 0.3],
            vec![-1.2, -0.4],
            vec![-2.5, 1.5],
        ];
        let labels = vec![true, true, true, false, false, false];
        let fit = svm_train(&rows, &labels, &SvmHyperparams::default()).unwrap();
        for (r, l) in rows.iter().zip(&labels) {
            assert_eq!(fit.model.predict(r), *l);
        }
        assert!(fit.loss_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn svm_label_flip_negates() {
        let d = gaussian_toy(60, 0.7, 1, 5);
        let hp = SvmHyperparams::default();
        let a = svm_train(&d.rows, &d.labels, &hp).unwrap().model;
        let flipped: Vec<bool> = d.labels.iter().map(|l| !l).collect();
        let b = svm_train(&d.rows, &flipped, &hp).unwrap().model;
        assert_eq!(a.b, -b.b);
        for (x, y) in a.w.iter().zip(&b.w) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn svm_recovers_bayes_direction() {
        let d = gaussian_toy(200, 1.0, 1, 11);
        let m = svm_train(&d.rows, &d.labels, &SvmHyperparams::default()).unwrap().model;
        let angle = m.w[1].atan2(m.w[0]).to_degrees().abs();
        assert!(angle < 10.0, "{angle}");
    }

    #[test]
    fn svm_single_class_rejected() {
        assert!(matches!(
            svm_train(&[vec![1.0], vec![2.0]], &[true, true], &SvmHyperparams::default()),
            Err(ClassifyError::SingleClass { .. })
        ));
    }

    #[test]
    fn svm_is_deterministic() {
        let d = gaussian_toy(80, 0.5, 3, 2);
        let hp = SvmHyperparams::default();
        assert_eq!(
            svm_train(&d.rows, &d.labels, &hp).unwrap(),
            svm_train(&d.rows, &d.labels, &hp).unwrap()
        );
    }

    #[test]
    fn cv_on_separated_classes() {
        let d = gaussian_toy(100, 8.0, 2, 4);
        let cv = cross_validate(&d, 5, 0, &SvmHyperparams::default()).unwrap();
        assert_eq!(cv.scores.len(), 5);
        assert_eq!(cv.mean, 1.0);
    }

    #[test]
    fn cv_under_permuted_labels_is_chance() {
        let d = gaussian_toy(400, 1.5, 2, 8);
        let mut shuffled = d.clone();
        shuffled.labels.shuffle(&mut stream_rng(99, 0));
        let cv = cross_validate(&shuffled, 5, 0, &SvmHyperparams::default()).unwrap();
        assert!((cv.mean - 0.5).abs() < 0.1, "{}", cv.mean);
    }

    #[test]
    fn label_copy_gives_perfect_cv() {
        let mut d = gaussian_toy(100, 0.2, 2, 6);
        for (r, l) in d.rows.iter_mut().zip(&d.labels) {
            r.push(if *l { 1.0 } else { 0.0 });
        }
        d.feature_names.push("label".into());
        let cv = cross_validate(&d, 5, 3, &SvmHyperparams::default()).unwrap();
        assert_eq!(cv.mean, 1.0);
    }

    #[test]
    fn scaler_ignores_validation_rows() {
        let d = gaussian_toy(100, 1.0, 2, 12);
        let folds = stratified_kfold(&d.labels, 5, 0).unwrap();
        let a = fit_folds(&d, &folds, 5, &SvmHyperparams::default()).unwrap();
        for (f, fm) in a.iter().enumerate() {
            let mut m = d.clone();
            let victim = folds.iter().position(|&x| x == f).unwrap();
            m.rows[victim] = vec![1e6, -1e6, 3e5];
            let b = fit_fold(&m, &folds, f, &SvmHyperparams::default()).unwrap();
            assert_eq!(fm.scaler, b.scaler);
            assert_eq!(fm.model, b.model);
        }
    }

    #[test]
    fn drop_column_redundant_and_noise() {
        let base = gaussian_toy(300, 1.0, 1, 21);
        let mut dup = base.clone();
        for r in dup.rows.iter_mut() {
            r.insert(1, r[0]);
        }
        dup.feature_names.insert(1, "copy".into());
        let folds = stratified_kfold(&dup.labels, 5, 0).unwrap();
        let hp = SvmHyperparams::default();
        let d = drop_column_importance(&dup, &folds, 5, &hp).unwrap();
        assert!(d[0].abs() < 0.02 && d[1].abs() < 0.02, "{d:?}");
        assert!(d[2].abs() < 0.02, "{d:?}");
    }

    #[test]
    fn permutation_of_constant_column_is_zero() {
        let d = gaussian_toy(100, 1.0, 1, 30);
        let folds = stratified_kfold(&d.labels, 5, 0).unwrap();
        let models = fit_folds(&d, &folds, 5, &SvmHyperparams::default()).unwrap();
        let fm = &models[0];
        let mut va = d.subset(&fm.validation);
        for r in va.rows.iter_mut() {
            r[1] = 0.25;
        }
        let pred: Vec<bool> = va
            .rows
            .iter()
            .map(|r| fm.model.predict(&fm.scaler.transform_row(r)))
            .collect();
        let base = balanced_accuracy(&va.labels, &pred).unwrap();
        for s in 0..10 {
            assert_eq!(permuted_score(fm, &va.rows, &va.labels, 1, s).unwrap(), base);
        }
    }

    #[test]
    fn permutation_of_only_informative_column() {
        let d = gaussian_toy(400, 10.0, 1, 31);
        let folds = stratified_kfold(&d.labels, 5, 0).unwrap();
        let models = fit_folds(&d, &folds, 5, &SvmHyperparams::default()).unwrap();
        let imp = permutation_importance(&d, &models, 10, 7).unwrap();
        assert!((imp[0].mean - 0.5).abs() < 0.06, "{imp:?}");
        assert!(imp[1].mean.abs() < 0.02, "{imp:?}");
    }

    #[test]
    fn pca_examples() {
        let line: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, 2.0 * i as f64 + 1.0]).collect();
        let p = pca_2d(&line).unwrap();
        assert!(p.explained_variance[0] > 0.999);
        assert!(p.components[0].iter().all(|&v| v > 0.0));

        let mut s = NormalStream::new(44);
        let iso: Vec<Vec<f64>> = (0..10_000).map(|_| vec![s.next_normal(), s.next_normal()]).collect();
        let p = pca_2d(&iso).unwrap();
        assert!((p.explained_variance[0] - 0.5).abs() < 0.02);
        assert!((p.explained_variance[1] - 0.5).abs() < 0.02);

        assert!(pca_2d(&[vec![1.0, 1.0], vec![1.0, 1.0]]).is_err());
    }

    #[test]
    fn pca_invariant_to_row_order() {
        let d = gaussian_toy(60, 1.0, 2, 50);
        let a = pca_2d(&d.rows).unwrap();
        let mut rev = d.rows.clone();
        rev.reverse();
        let b = pca_2d(&rev).unwrap();
        for (i, c) in a.coords.iter().enumerate() {
            let r = b.coords[59 - i];
            assert!((c[0] - r[0]).abs() < 1e-9 && (c[1] - r[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn dataset_rejects_non_finite() {
        assert!(matches!(
            Dataset::new(vec![vec![f64::NAN]], vec![true], vec![0], vec!["a".into()]),
            Err(ClassifyError::NonFinite { row: 0, column: 0 })
        ));
    }
}
