//! Training harness: model variants, deterministic k-fold splits, first-order
//! optimization with adaptive moment estimates and plateau-driven learning
//! rate decay, and the scaled-MSE / eCDF metrics the reports are built from.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homogenization::Dataset;
use crate::io::{fmt_g17, write_text};
use crate::nn::{
    batch_loss, loss_and_param_grads, predict, Architecture, BatchItem, GraphInput, LossKind,
    ModelParams, ParamGrads,
};
use crate::tensor::from_voigt;

/// Model/training combinations compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Dense branch only, energy-value loss.
    #[serde(rename = "M_L2_mlp")]
    L2Mlp,
    /// Dense branch only, value-and-gradient loss.
    #[serde(rename = "M_H1_mlp")]
    H1Mlp,
    /// Graph encoder + dense branch, value-and-gradient loss.
    #[serde(rename = "M_H1_hybrid")]
    H1Hybrid,
    /// Hybrid with dropout and weight decay on the graph branch.
    #[serde(rename = "M_H1_reg")]
    H1Reg,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::L2Mlp, Variant::H1Mlp, Variant::H1Hybrid, Variant::H1Reg];

    pub fn label(self) -> &'static str {
        match self {
            Variant::L2Mlp => "M_L2_mlp",
            Variant::H1Mlp => "M_H1_mlp",
            Variant::H1Hybrid => "M_H1_hybrid",
            Variant::H1Reg => "M_H1_reg",
        }
    }

    pub fn loss_kind(self) -> LossKind {
        match self {
            Variant::L2Mlp => LossKind::L2,
            _ => LossKind::H1,
        }
    }

    pub fn is_hybrid(self) -> bool {
        matches!(self, Variant::H1Hybrid | Variant::H1Reg)
    }

    pub fn architecture(self, n_max: usize) -> Architecture {
        match self {
            Variant::L2Mlp | Variant::H1Mlp => Architecture::mlp(),
            Variant::H1Hybrid => Architecture::hybrid(n_max),
            Variant::H1Reg => Architecture::hybrid_regularized(n_max),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown model variant {s:?}; expected one of M_L2_mlp, M_H1_mlp, M_H1_hybrid, M_H1_reg"
                ))
            })
    }
}

/// Optimization settings shared by every variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before the learning rate decays.
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Fraction of the training set held out to drive the plateau scheduler
    /// and best-parameter selection; 0 tracks the training loss instead.
    pub validation_fraction: f64,
    pub seed: u64,
    /// Node capacity of hybrid architectures.
    pub n_max: usize,
    /// Fit the componentwise input map to the training set (otherwise the
    /// raw identity-shifted inputs are used).
    pub normalize_inputs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 32,
            learning_rate: 1e-3,
            plateau_patience: 20,
            plateau_factor: 0.5,
            validation_fraction: 0.1,
            seed: 0,
            n_max: 50,
            normalize_inputs: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.plateau_patience == 0 {
            return Err(Error::config("plateau_patience must be at least 1"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::config("plateau_factor must lie in (0, 1]"));
        }
        if !(0.0..=0.5).contains(&self.validation_fraction) {
            return Err(Error::config("validation_fraction must lie in [0, 0.5]"));
        }
        if self.n_max == 0 {
            return Err(Error::config("n_max must be at least 1"));
        }
        Ok(())
    }
}

/// One line of the optimization history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub validation_loss: f64,
}

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best validation loss seen during the run.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
}

/// splitmix64 step; folds run-derived tags into reproducible sub-seeds.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut state: u64 = 0x9E3779B97F4A7C15;
    for &p in parts {
        state = state.wrapping_add(p).wrapping_mul(0xBF58476D1CE4E5B9);
        state ^= state >> 31;
        state = state.wrapping_mul(0x94D049BB133111EB);
        state ^= state >> 27;
    }
    state
}

/// First-order optimizer with adaptive moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    m: ParamGrads,
    v: ParamGrads,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Adam {
    pub fn new(p: &ModelParams) -> Self {
        Adam {
            m: ParamGrads::zeros_like(p),
            v: ParamGrads::zeros_like(p),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step(&mut self, p: &mut ModelParams, g: &ParamGrads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (li, layer) in p.layers.iter_mut().enumerate() {
            let (gw, gb) = &g.layers[li];
            let (mw, mb) = &mut self.m.layers[li];
            let (vw, vb) = &mut self.v.layers[li];
            for (((w, gw), mw), vw) in
                layer.w.iter_mut().zip(gw.iter()).zip(mw.iter_mut()).zip(vw.iter_mut())
            {
                *mw = self.beta1 * *mw + (1.0 - self.beta1) * gw;
                *vw = self.beta2 * *vw + (1.0 - self.beta2) * gw * gw;
                *w -= lr * (*mw / bc1) / ((*vw / bc2).sqrt() + self.epsilon);
            }
            for (((b, gb), mb), vb) in
                layer.b.iter_mut().zip(gb.iter()).zip(mb.iter_mut()).zip(vb.iter_mut())
            {
                *mb = self.beta1 * *mb + (1.0 - self.beta1) * gb;
                *vb = self.beta2 * *vb + (1.0 - self.beta2) * gb * gb;
                *b -= lr * (*mb / bc1) / ((*vb / bc2).sqrt() + self.epsilon);
            }
        }
    }
}

/// Trains one variant on the given labeled set.
///
/// Mini-batch optimization with per-epoch reshuffling; the learning rate is
/// multiplied by `plateau_factor` whenever the tracked loss fails to improve
/// for `plateau_patience` consecutive epochs. Returns the parameters from
/// the best tracked epoch. Zero epochs return the initialization unchanged.
pub fn train(
    variant: Variant,
    cfg: &TrainConfig,
    items: &[BatchItem],
    graphs: &[GraphInput],
) -> Result<TrainOutcome> {
    if items.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let arch = variant.architecture(cfg.n_max);
    let mut params = ModelParams::init(arch, cfg.seed)?;
    if cfg.normalize_inputs {
        let inputs: Vec<[f64; 6]> = items.iter().map(|it| it.c).collect();
        params.norm = crate::nn::Normalization::fit(&inputs)?;
    }
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { params, history: Vec::new() });
    }

    // Deterministic holdout for plateau tracking and best-epoch selection.
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut split_rng = ChaCha12Rng::seed_from_u64(derive_seed(&[cfg.seed, 1]));
    order.shuffle(&mut split_rng);
    let n_val = ((items.len() as f64 * cfg.validation_fraction).round() as usize)
        .min(items.len().saturating_sub(1));
    let val_items: Vec<BatchItem> = order[..n_val].iter().map(|&i| items[i]).collect();
    let mut train_idx: Vec<usize> = order[n_val..].to_vec();
    train_idx.sort_unstable();

    let kind = variant.loss_kind();
    let mut adam = Adam::new(&params);
    let mut lr = cfg.learning_rate;
    let mut best_loss = f64::INFINITY;
    let mut best_params = params.clone();
    let mut wait = 0usize;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut epoch_rng = ChaCha12Rng::seed_from_u64(derive_seed(&[cfg.seed, 2, epoch as u64]));
        let mut shuffled = train_idx.clone();
        shuffled.shuffle(&mut epoch_rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in shuffled.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<BatchItem> = chunk.iter().map(|&i| items[i]).collect();
            let dropout_seed = derive_seed(&[cfg.seed, 3, epoch as u64, bi as u64]);
            let (loss, grads) = loss_and_param_grads(&params, graphs, &batch, kind, dropout_seed)?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "training diverged: non-finite loss at epoch {epoch}, batch {bi}"
                )));
            }
            adam.step(&mut params, &grads, lr);
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / train_idx.len() as f64;
        let tracked = if val_items.is_empty() {
            train_loss
        } else {
            batch_loss(&params, graphs, &val_items, kind)?
        };
        if !tracked.is_finite() {
            return Err(Error::numeric(format!(
                "training diverged: non-finite validation loss at epoch {epoch}"
            )));
        }
        history.push(EpochRecord { epoch, learning_rate: lr, train_loss, validation_loss: tracked });
        if tracked < best_loss {
            best_loss = tracked;
            best_params = params.clone();
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.plateau_patience {
                lr *= cfg.plateau_factor;
                wait = 0;
            }
        }
    }
    Ok(TrainOutcome { params: best_params, history })
}

// ---------------------------------------------------------------------------
// Metrics.

/// Mean squared error after mapping both series through the min-max scaling
/// of the TRUE series; a pure rescaling of plain MSE by the true range.
pub fn scaled_mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::config(format!(
            "scaled MSE needs equal lengths, got {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if truth.len() < 2 {
        return Err(Error::config("scaled MSE needs at least 2 values"));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &t in truth {
        lo = lo.min(t);
        hi = hi.max(t);
    }
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return Err(Error::config("scaled MSE undefined for a constant true series"));
    }
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let d = (p - lo) / range - (t - lo) / range;
            d * d
        })
        .sum();
    Ok(sum / truth.len() as f64)
}

/// Empirical CDF as a right-continuous step curve: one `(value, F)` point per
/// distinct value, F jumping to r/N where r counts values ≤ the point.
pub fn ecdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN metric values"));
    let n = sorted.len() as f64;
    let mut curve: Vec<(f64, f64)> = Vec::new();
    for (i, v) in sorted.iter().enumerate() {
        let f = (i + 1) as f64 / n;
        match curve.last_mut() {
            Some(last) if last.0 == *v => last.1 = f,
            _ => curve.push((*v, f)),
        }
    }
    curve
}

/// Inverse-eCDF quantile: the smallest value whose cumulative fraction
/// reaches `p`.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty set");
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN metric values"));
    let n = sorted.len();
    let rank = (p * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Fraction of quantile levels (1..=levels over levels+1) at which the
/// quantiles of `a` lie strictly below those of `b` — how much of the eCDF
/// of `a` sits left of the eCDF of `b`.
pub fn dominance_fraction(a: &[f64], b: &[f64], levels: usize) -> f64 {
    let mut wins = 0usize;
    for i in 1..=levels {
        let p = i as f64 / (levels + 1) as f64;
        if quantile(a, p) < quantile(b, p) {
            wins += 1;
        }
    }
    wins as f64 / levels as f64
}

/// Paired principal decompositions of predicted and reference stress sets.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalComparison {
    /// Reference eigenvalues, three per sample, sorted descending.
    pub values_true: Vec<f64>,
    pub values_pred: Vec<f64>,
    /// Mean of 1 − |cos| between matched eigenvectors over all pairs whose
    /// eigenvalues are well separated in both spectra.
    pub mean_direction_error: f64,
}

impl PrincipalComparison {
    pub fn principal_value_mse(&self) -> Result<f64> {
        scaled_mse(&self.values_pred, &self.values_true)
    }
}

fn sorted_eigen(m: &Matrix3<f64>) -> ([f64; 3], [Vector3<f64>; 3]) {
    let eig = SymmetricEigen::new(*m);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| {
        eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).expect("finite eigenvalues")
    });
    let vals = [eig.eigenvalues[idx[0]], eig.eigenvalues[idx[1]], eig.eigenvalues[idx[2]]];
    let vecs = [
        eig.eigenvectors.column(idx[0]).into_owned(),
        eig.eigenvectors.column(idx[1]).into_owned(),
        eig.eigenvectors.column(idx[2]).into_owned(),
    ];
    (vals, vecs)
}

fn well_separated(vals: &[f64; 3], i: usize) -> bool {
    let scale = 1.0 + vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (0..3).all(|j| j == i || (vals[i] - vals[j]).abs() > 1e-8 * scale)
}

/// Eigendecomposition comparison of stress predictions: eigenvalues sorted
/// descending and matched componentwise; direction error via absolute
/// cosines so eigenvector sign ambiguity does not register.
pub fn principal_metrics(s_pred: &[[f64; 6]], s_true: &[[f64; 6]]) -> Result<PrincipalComparison> {
    if s_pred.len() != s_true.len() {
        return Err(Error::config(format!(
            "principal metrics need equal sample counts, got {} vs {}",
            s_pred.len(),
            s_true.len()
        )));
    }
    let mut values_true = Vec::with_capacity(3 * s_true.len());
    let mut values_pred = Vec::with_capacity(3 * s_pred.len());
    let mut dir_sum = 0.0;
    let mut dir_count = 0usize;
    for (sp, st) in s_pred.iter().zip(s_true) {
        let (tv, tvecs) = sorted_eigen(&from_voigt(st));
        let (pv, pvecs) = sorted_eigen(&from_voigt(sp));
        values_true.extend_from_slice(&tv);
        values_pred.extend_from_slice(&pv);
        for i in 0..3 {
            if well_separated(&tv, i) && well_separated(&pv, i) {
                // Unit vectors can overshoot |cos| = 1 by roundoff.
                dir_sum += (1.0 - tvecs[i].dot(&pvecs[i]).abs()).max(0.0);
                dir_count += 1;
            }
        }
    }
    let mean_direction_error = if dir_count > 0 { dir_sum / dir_count as f64 } else { 0.0 };
    Ok(PrincipalComparison { values_true, values_pred, mean_direction_error })
}

// ---------------------------------------------------------------------------
// K-fold cross validation.

/// Unit the folds partition: individual samples or whole RVEs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldUnit {
    Sample,
    Rve,
}

/// Deterministic k-fold partition of `0..n_units`: a seeded shuffle dealt
/// round-robin, so fold sizes differ by at most one. Returns the test folds,
/// each sorted ascending.
pub fn kfold(n_units: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::config(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > n_units {
        return Err(Error::config(format!(
            "k-fold with k={k} over {n_units} units would leave empty folds"
        )));
    }
    let mut order: Vec<usize> = (0..n_units).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(&[seed, 4]));
    order.shuffle(&mut rng);
    let mut folds = vec![Vec::with_capacity(n_units / k + 1); k];
    for (i, unit) in order.into_iter().enumerate() {
        folds[i % k].push(unit);
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(folds)
}

/// Pooled metrics of one side (train or test) of one fold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitMetrics {
    pub psi_mse: f64,
    pub principal_value_mse: f64,
    pub direction_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldReport {
    pub fold: usize,
    pub train: SplitMetrics,
    pub test: SplitMetrics,
}

/// Per-RVE error triple on one side of one fold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RveErrors {
    pub rve_id: u32,
    pub fold: usize,
    pub psi_mse: f64,
    pub principal_value_mse: f64,
    pub direction_error: f64,
}

/// Full cross-validation result for one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidationReport {
    pub variant: Variant,
    pub folds: Vec<FoldReport>,
    /// Test-side per-RVE errors; with RVE folds every RVE appears exactly
    /// once (its blind prediction).
    pub blind_rves: Vec<RveErrors>,
    /// Train-side per-RVE errors (each RVE appears k−1 times with RVE folds).
    pub train_rves: Vec<RveErrors>,
    pub histories: Vec<Vec<EpochRecord>>,
}

impl CrossValidationReport {
    pub fn mean_test_psi_mse(&self) -> f64 {
        self.folds.iter().map(|f| f.test.psi_mse).sum::<f64>() / self.folds.len() as f64
    }

    pub fn median_blind_principal_value_mse(&self) -> f64 {
        let v: Vec<f64> = self.blind_rves.iter().map(|r| r.principal_value_mse).collect();
        median(&v)
    }

    /// Median test-side minus median train-side per-RVE principal-value
    /// error: the overfitting gap the eCDF plots visualize.
    pub fn principal_value_overfit_gap(&self) -> f64 {
        let test: Vec<f64> = self.blind_rves.iter().map(|r| r.principal_value_mse).collect();
        let train: Vec<f64> = self.train_rves.iter().map(|r| r.principal_value_mse).collect();
        median(&test) - median(&train)
    }
}

fn split_metrics(items: &[BatchItem], preds: &[(f64, [f64; 6])]) -> Result<SplitMetrics> {
    let psi_true: Vec<f64> = items.iter().map(|it| it.psi).collect();
    let psi_pred: Vec<f64> = preds.iter().map(|p| p.0).collect();
    let s_true: Vec<[f64; 6]> = items.iter().map(|it| it.s).collect();
    let s_pred: Vec<[f64; 6]> = preds.iter().map(|p| p.1).collect();
    let principal = principal_metrics(&s_pred, &s_true)?;
    Ok(SplitMetrics {
        psi_mse: scaled_mse(&psi_pred, &psi_true)?,
        principal_value_mse: principal.principal_value_mse()?,
        direction_error: principal.mean_direction_error,
    })
}

fn rve_errors(
    fold: usize,
    ds: &Dataset,
    rve_slot: &[usize],
    items: &[BatchItem],
    preds: &[(f64, [f64; 6])],
) -> Result<Vec<RveErrors>> {
    let mut by_rve: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &slot) in rve_slot.iter().enumerate() {
        by_rve.entry(slot).or_default().push(i);
    }
    let mut out = Vec::with_capacity(by_rve.len());
    for (slot, idxs) in by_rve {
        // Sample-unit folds can strand an RVE with a single sample on one
        // side; a one-point scaled MSE is undefined, so skip such groups.
        if idxs.len() < 2 {
            continue;
        }
        let sub_items: Vec<BatchItem> = idxs.iter().map(|&i| items[i]).collect();
        let sub_preds: Vec<(f64, [f64; 6])> = idxs.iter().map(|&i| preds[i]).collect();
        let m = split_metrics(&sub_items, &sub_preds)?;
        out.push(RveErrors {
            rve_id: ds.rves[slot].rve_id,
            fold,
            psi_mse: m.psi_mse,
            principal_value_mse: m.principal_value_mse,
            direction_error: m.direction_error,
        });
    }
    Ok(out)
}

/// Runs k-fold cross validation of one variant over a labeled dataset.
/// `graphs[i]` must describe `ds.rves[i]`; per-fold training seeds derive
/// from the base seed and fold index.
pub fn cross_validate(
    variant: Variant,
    cfg: &TrainConfig,
    ds: &Dataset,
    graphs: &[GraphInput],
    k: usize,
    unit: FoldUnit,
) -> Result<CrossValidationReport> {
    if variant.is_hybrid() && graphs.len() != ds.rves.len() {
        return Err(Error::config(format!(
            "{} graphs for {} RVEs",
            graphs.len(),
            ds.rves.len()
        )));
    }
    let mut items: Vec<BatchItem> = Vec::with_capacity(ds.n_samples());
    let mut rve_slot: Vec<usize> = Vec::with_capacity(ds.n_samples());
    for (slot, rve) in ds.rves.iter().enumerate() {
        for s in &rve.samples {
            items.push(BatchItem { graph: Some(slot), c: s.c, psi: s.psi, s: s.s });
            rve_slot.push(slot);
        }
    }
    let folds = match unit {
        FoldUnit::Sample => kfold(items.len(), k, cfg.seed)?,
        FoldUnit::Rve => kfold(ds.rves.len(), k, cfg.seed)?,
    };

    let mut fold_reports = Vec::with_capacity(k);
    let mut blind_rves = Vec::new();
    let mut train_rves = Vec::new();
    let mut histories = Vec::with_capacity(k);
    for (f, fold) in folds.iter().enumerate() {
        let test_set: BTreeSet<usize> = match unit {
            FoldUnit::Sample => fold.iter().copied().collect(),
            FoldUnit::Rve => {
                let rves: BTreeSet<usize> = fold.iter().copied().collect();
                (0..items.len()).filter(|&i| rves.contains(&rve_slot[i])).collect()
            }
        };
        let mut train_items = Vec::with_capacity(items.len() - test_set.len());
        let mut train_slots = Vec::new();
        let mut test_items = Vec::with_capacity(test_set.len());
        let mut test_slots = Vec::new();
        for i in 0..items.len() {
            if test_set.contains(&i) {
                test_items.push(items[i]);
                test_slots.push(rve_slot[i]);
            } else {
                train_items.push(items[i]);
                train_slots.push(rve_slot[i]);
            }
        }
        let fold_cfg = TrainConfig { seed: derive_seed(&[cfg.seed, 5, f as u64]), ..*cfg };
        let outcome = train(variant, &fold_cfg, &train_items, graphs)?;
        let train_preds = predict(&outcome.params, graphs, &train_items)?;
        let test_preds = predict(&outcome.params, graphs, &test_items)?;
        fold_reports.push(FoldReport {
            fold: f,
            train: split_metrics(&train_items, &train_preds)?,
            test: split_metrics(&test_items, &test_preds)?,
        });
        blind_rves.extend(rve_errors(f, ds, &test_slots, &test_items, &test_preds)?);
        train_rves.extend(rve_errors(f, ds, &train_slots, &train_items, &train_preds)?);
        histories.push(outcome.history);
    }
    Ok(CrossValidationReport {
        variant,
        folds: fold_reports,
        blind_rves,
        train_rves,
        histories,
    })
}

// ---------------------------------------------------------------------------
// Response surfaces and smoothness.

/// One grid point of the energy/stress surface over (C11, C22) with the
/// remaining components held at identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub c11: f64,
    pub c22: f64,
    pub psi: f64,
    pub s11: f64,
}

/// Samples the predicted response on an n×n grid with C11 and C22 ranging
/// over [1, 1 + max_offset], row-major in C11.
pub fn response_surface(
    p: &ModelParams,
    g: Option<&GraphInput>,
    n_grid: usize,
    max_offset: f64,
) -> Result<Vec<SurfacePoint>> {
    if n_grid < 2 {
        return Err(Error::config("surface grid needs at least 2 points per axis"));
    }
    let mut out = Vec::with_capacity(n_grid * n_grid);
    for i in 0..n_grid {
        let c11 = 1.0 + max_offset * i as f64 / (n_grid - 1) as f64;
        for j in 0..n_grid {
            let c22 = 1.0 + max_offset * j as f64 / (n_grid - 1) as f64;
            let c = [c11, c22, 1.0, 0.0, 0.0, 0.0];
            let (psi, s) = crate::nn::energy_and_stress(p, g, &c)?;
            out.push(SurfacePoint { c11, c22, psi, s11: s[0] });
        }
    }
    Ok(out)
}

/// Predicted energies along the proportional path C(t) = I + t·dir,
/// t ∈ [0, max_scale] over n_points.
pub fn proportional_path_psi(
    p: &ModelParams,
    g: Option<&GraphInput>,
    dir: &[f64; 6],
    n_points: usize,
    max_scale: f64,
) -> Result<Vec<f64>> {
    if n_points < 3 {
        return Err(Error::config("path smoothness needs at least 3 points"));
    }
    let mut out = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let t = max_scale * i as f64 / (n_points - 1) as f64;
        let mut c = crate::nn::VOIGT_IDENTITY;
        for k in 0..6 {
            c[k] += t * dir[k];
        }
        out.push(crate::nn::model_energy(p, g, &c)?);
    }
    Ok(out)
}

/// Largest oscillation among adjacent second differences: the max over
/// sign-flipping neighbor pairs of the smaller magnitude (0 when second
/// differences never alternate). A smooth convex or concave sequence
/// scores 0; wiggles score their amplitude.
pub fn max_sign_oscillation(values: &[f64]) -> f64 {
    let d2: Vec<f64> = values.windows(3).map(|w| w[2] - 2.0 * w[1] + w[0]).collect();
    let mut worst = 0.0f64;
    for pair in d2.windows(2) {
        if pair[0] * pair[1] < 0.0 {
            worst = worst.max(pair[0].abs().min(pair[1].abs()));
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Report CSV writers.

/// Optimization history: `fold,epoch,learning_rate,train_loss,validation_loss`.
pub fn write_history_csv(path: &Path, histories: &[Vec<EpochRecord>]) -> Result<()> {
    let mut out = String::from("fold,epoch,learning_rate,train_loss,validation_loss\n");
    for (fold, history) in histories.iter().enumerate() {
        for r in history {
            out.push_str(&format!(
                "{fold},{},{},{},{}\n",
                r.epoch,
                fmt_g17(r.learning_rate),
                fmt_g17(r.train_loss),
                fmt_g17(r.validation_loss)
            ));
        }
    }
    write_text(path, &out)
}

/// Per-fold metrics of every variant:
/// `variant,fold,split,psi_scaled_mse,principal_value_scaled_mse,principal_direction_error`.
pub fn write_metrics_csv(path: &Path, reports: &[CrossValidationReport]) -> Result<()> {
    let mut out = String::from(
        "variant,fold,split,psi_scaled_mse,principal_value_scaled_mse,principal_direction_error\n",
    );
    for rep in reports {
        for f in &rep.folds {
            for (split, m) in [("train", &f.train), ("test", &f.test)] {
                out.push_str(&format!(
                    "{},{},{split},{},{},{}\n",
                    rep.variant,
                    f.fold,
                    fmt_g17(m.psi_mse),
                    fmt_g17(m.principal_value_mse),
                    fmt_g17(m.direction_error)
                ));
            }
        }
    }
    write_text(path, &out)
}

/// Plot-ready eCDF curves of per-RVE principal-value errors:
/// `variant,split,mse,F`.
pub fn write_ecdf_csv(path: &Path, reports: &[CrossValidationReport]) -> Result<()> {
    let mut out = String::from("variant,split,mse,F\n");
    for rep in reports {
        for (split, rves) in [("train", &rep.train_rves), ("test", &rep.blind_rves)] {
            let values: Vec<f64> = rves.iter().map(|r| r.principal_value_mse).collect();
            if values.is_empty() {
                continue;
            }
            for (v, frac) in ecdf(&values) {
                out.push_str(&format!("{},{split},{},{}\n", rep.variant, fmt_g17(v), fmt_g17(frac)));
            }
        }
    }
    write_text(path, &out)
}

/// Surface grid CSV: `c11,c22,psi,s11`.
pub fn write_surface_csv(path: &Path, surface: &[SurfacePoint]) -> Result<()> {
    let mut out = String::from("c11,c22,psi,s11\n");
    for p in surface {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_g17(p.c11),
            fmt_g17(p.c22),
            fmt_g17(p.psi),
            fmt_g17(p.s11)
        ));
    }
    write_text(path, &out)
}
