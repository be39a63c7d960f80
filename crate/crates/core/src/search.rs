//! Budget-constrained rank search: the penalized objective
//! `E[−log Q(y|x; θ̃, φ, r)] + λ·exp(ReLU(ωᵀr − b))` minimized over continuous
//! ranks with Adam, per-component gradient clipping, NaN-to-rank-1
//! reassignment and clamping to `[1, R_l]`, followed by rounding to integer
//! ranks.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::convnet::{AdaptedQuantModel, Dataset};
use crate::error::{Error, Result};
use crate::quant::QuantSpec;
use crate::scalar::Scalar;

/// Continuous ranks `r_l ∈ [1, R_l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankVector<T> {
    values: Vec<T>,
    bounds: Vec<usize>,
}

impl<T: Scalar> RankVector<T> {
    /// Builds a rank vector, clamping every value into `[1, R_l]`.
    pub fn new(values: Vec<T>, bounds: Vec<usize>) -> Result<Self> {
        if values.len() != bounds.len() || bounds.contains(&0) {
            return Err(Error::shape("rank values and positive bounds must have equal length"));
        }
        let mut r = Self { values, bounds };
        r.clamp();
        Ok(r)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn bounds(&self) -> &[usize] {
        &self.bounds
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn clamp(&mut self) {
        for (v, &b) in self.values.iter_mut().zip(&self.bounds) {
            *v = v.max(T::one()).min(T::of_usize(b));
        }
    }

    /// `clamp(round(r_l), 1, R_l)`.
    pub fn rounded(&self) -> Vec<usize> {
        self.values
            .iter()
            .zip(&self.bounds)
            .map(|(v, &b)| v.round().to_usize().unwrap_or(1).clamp(1, b))
            .collect()
    }
}

/// `ω_l = (1/R_l) · Θ_l / ΣΘ`, turning ranks into a fraction of the adaptable
/// parameter mass: `ωᵀR = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankNormCoeffs<T> {
    omega: Vec<T>,
}

impl<T: Scalar> RankNormCoeffs<T> {
    pub fn values(&self) -> &[T] {
        &self.omega
    }

    /// Running budget `ωᵀr`.
    pub fn budget(&self, r: &[T]) -> T {
        self.omega.iter().zip(r).map(|(&w, &x)| w * x).sum()
    }

    /// `ωᵀr` for integer ranks.
    pub fn budget_of(&self, r: &[usize]) -> T {
        self.omega.iter().zip(r).map(|(&w, &x)| w * T::of_usize(x)).sum()
    }
}

/// Coefficients from per-layer parameter counts `Θ_l` and maximum ranks `R_l`.
pub fn rank_norm_coeffs<T: Scalar>(params: &[usize], max_ranks: &[usize]) -> Result<RankNormCoeffs<T>> {
    if params.is_empty() || params.len() != max_ranks.len() {
        return Err(Error::invalid("need one parameter count and maximum rank per adaptable layer"));
    }
    if params.iter().chain(max_ranks).any(|&x| x == 0) {
        return Err(Error::invalid("parameter counts and ranks must be positive"));
    }
    let total = T::of_usize(params.iter().sum());
    let omega = params.iter().zip(max_ranks).map(|(&p, &r)| T::of_usize(p) / total / T::of_usize(r)).collect();
    Ok(RankNormCoeffs { omega })
}

/// Coefficients of the conv layers of `model`.
pub fn model_rank_norm_coeffs<T: Scalar>(model: &AdaptedQuantModel<T>) -> Result<RankNormCoeffs<T>> {
    rank_norm_coeffs(&model.parameter_counts(), &model.max_ranks())
}

/// `λ·exp(max(0, ωᵀr − b))` and its gradient with respect to `r`, which is
/// `λ·ω·exp(ωᵀr − b)` over budget and exactly zero otherwise.
pub fn budget_penalty<T: Scalar>(r: &[T], omega: &RankNormCoeffs<T>, b: T, lambda: T) -> (T, Vec<T>) {
    let excess = omega.budget(r) - b;
    if excess > T::zero() {
        let value = lambda * excess.exp();
        (value, omega.omega.iter().map(|&w| w * value).collect())
    } else {
        (lambda, vec![T::zero(); r.len()])
    }
}

/// `⌊b·R_l⌋`, at least 1.
pub fn heuristic_ranks(b: f64, bounds: &[usize]) -> Vec<usize> {
    bounds.iter().map(|&r| ((b * r as f64).floor() as usize).clamp(1, r)).collect()
}

/// `ξ = n + m·b`: storage bits per main-network weight including adapters.
pub fn equivalent_bitwidth(n: u8, m: u8, b: f64) -> f64 {
    f64::from(n) + f64::from(m) * b
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Target budget `b ∈ [0, 1]`.
    pub budget: f64,
    /// Penalty coefficient `λ ≥ 0`.
    pub lambda: f64,
    /// Butterworth mask order `k`.
    pub order: u32,
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Per-component gradient bound.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            budget: 0.05,
            lambda: 1.0,
            order: 4,
            learning_rate: 0.01,
            iterations: 250,
            batch_size: 32,
            grad_clip: 0.2,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::invalid(what.to_string()));
        if !(0.0..=1.0).contains(&self.budget) {
            return bad("budget must lie in [0, 1]");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if self.order == 0 {
            return bad("mask order must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("gradient clip bound must be positive");
        }
        Ok(())
    }
}

/// Adam without weight decay (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam<T> {
    lr: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(len: usize, lr: T) -> Self {
        Self { lr, m: vec![T::zero(); len], v: vec![T::zero(); len], t: 0 }
    }

    /// In-place descent step on `x` with gradient `g`.
    pub fn step(&mut self, x: &mut [T], g: &[T]) {
        self.t += 1;
        let (b1, b2) = (T::of(Self::BETA1), T::of(Self::BETA2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g[i] * g[i];
            let (mh, vh) = (self.m[i] / c1, self.v[i] / c2);
            x[i] = x[i] - self.lr * mh / (vh.sqrt() + T::of(Self::EPS));
        }
    }

    /// Forgets the moment estimates of component `i`.
    pub fn reset(&mut self, i: usize) {
        self.m[i] = T::zero();
        self.v[i] = T::zero();
    }
}

/// One executed iteration. `data_loss` and `penalty` are evaluated at the
/// ranks the step started from; `running_budget` and `ranks` are the state
/// after the update.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord<T> {
    pub iteration: usize,
    pub data_loss: T,
    pub penalty: T,
    pub running_budget: T,
    pub ranks: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchTrace<T> {
    pub records: Vec<TraceRecord<T>>,
}

impl<T: Scalar> SearchTrace<T> {
    /// CSV with header `iteration,data_loss,penalty,running_budget,r0,…`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        let layers = self.records.first().map_or(0, |r| r.ranks.len());
        write!(out, "iteration,data_loss,penalty,running_budget")?;
        for l in 0..layers {
            write!(out, ",r{l}")?;
        }
        writeln!(out)?;
        for r in &self.records {
            write!(out, "{},{},{},{}", r.iteration, r.data_loss, r.penalty, r.running_budget)?;
            for v in &r.ranks {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Result of [`search`].
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome<T> {
    pub ranks: RankVector<T>,
    pub heuristic: Vec<usize>,
    pub coeffs: RankNormCoeffs<T>,
    pub trace: SearchTrace<T>,
}

impl<T: Scalar> SearchOutcome<T> {
    /// Per-layer solution table.
    pub fn solution(&self) -> Vec<LayerSolution> {
        let optimal = self.ranks.rounded();
        self.ranks
            .bounds()
            .iter()
            .enumerate()
            .map(|(layer, &max_rank)| LayerSolution {
                layer,
                max_rank,
                heuristic: self.heuristic[layer],
                optimal: optimal[layer],
                continuous: self.ranks.values()[layer].as_f64(),
            })
            .collect()
    }
}

/// One row of the exported rank solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSolution {
    /// Index among the adaptable (conv) layers.
    pub layer: usize,
    pub max_rank: usize,
    pub heuristic: usize,
    pub optimal: usize,
    /// The relaxed rank before rounding.
    pub continuous: f64,
}

/// Runs the rank search on a copy of `model` (its soft adapters are rebuilt
/// every step). `observe` sees each trace record as it is produced.
pub fn search_observed<T: Scalar>(
    model: &AdaptedQuantModel<T>,
    calib: &Dataset<T>,
    cfg: &SearchConfig,
    mut observe: impl FnMut(&TraceRecord<T>),
) -> Result<SearchOutcome<T>> {
    cfg.validate()?;
    if calib.is_empty() {
        return Err(Error::invalid("calibration set is empty"));
    }
    let bounds = model.max_ranks();
    let coeffs = model_rank_norm_coeffs(model)?;
    let heuristic = heuristic_ranks(cfg.budget, &bounds);
    let mut ranks = RankVector::new(heuristic.iter().map(|&r| T::of_usize(r)).collect(), bounds.clone())?;
    let mut work = model.clone();
    let mut adam = Adam::new(ranks.len(), T::of(cfg.learning_rate));
    let (b, lambda, clip) = (T::of(cfg.budget), T::of(cfg.lambda), T::of(cfg.grad_clip));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..calib.len()).collect();
    let mut cursor = order.len();
    let mut trace = SearchTrace { records: Vec::with_capacity(cfg.iterations) };
    let mut bad_streak = 0;

    for iteration in 0..cfg.iterations {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch = calib.subset(&order[cursor..end]);
        cursor = end;

        work.set_soft_ranks(ranks.values(), cfg.order)?;
        let g = work.grad_wrt_ranks(&batch)?;
        let (penalty, pg) = budget_penalty(ranks.values(), &coeffs, b, lambda);

        let mut total: Vec<T> = g
            .grad
            .iter()
            .zip(&pg)
            .map(|(&d, &p)| {
                let t = d + p;
                // Clip without letting `max`/`min` swallow a NaN.
                if t.is_nan() { t } else { t.max(-clip).min(clip) }
            })
            .collect();
        adam.step(&mut ranks.values, &total);
        for (i, v) in ranks.values.iter_mut().enumerate() {
            if v.is_nan() {
                *v = T::one();
                adam.reset(i);
            }
        }
        ranks.clamp();
        total.clear();

        let record = TraceRecord {
            iteration,
            data_loss: g.loss,
            penalty,
            running_budget: coeffs.budget(ranks.values()),
            ranks: ranks.values().to_vec(),
        };
        observe(&record);
        trace.records.push(record);

        if g.loss.is_finite() {
            bad_streak = 0;
        } else {
            bad_streak += 1;
            if bad_streak >= 2 {
                return Err(Error::numeric(format!(
                    "loss was non-finite for two consecutive iterations (last at {iteration}); ranks {:?}",
                    ranks.values()
                )));
            }
        }
    }
    Ok(SearchOutcome { ranks, heuristic, coeffs, trace })
}

pub fn search<T: Scalar>(
    model: &AdaptedQuantModel<T>,
    calib: &Dataset<T>,
    cfg: &SearchConfig,
) -> Result<SearchOutcome<T>> {
    search_observed(model, calib, cfg, |_| {})
}

/// Rounds the relaxed ranks, attaches hard adapters and optionally
/// quantizes them. Returns the integer ranks.
pub fn finalize<T: Scalar>(
    model: &mut AdaptedQuantModel<T>,
    ranks: &RankVector<T>,
    adapter_spec: Option<&QuantSpec>,
) -> Result<Vec<usize>> {
    let r = ranks.rounded();
    model.set_hard_ranks(&r)?;
    if let Some(spec) = adapter_spec {
        model.quantize_adapters(spec)?;
    }
    Ok(r)
}
