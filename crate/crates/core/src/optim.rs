//! Training: plain (minibatch) gradient descent, gradient clipping, early
//! stopping on a validation set, the least-squares closed form, and a
//! power-iteration check for exploding recurrences.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::nn::ActivationKind;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub minibatch_size: usize,
    /// Global gradient-norm threshold; `None` disables clipping.
    pub clip_threshold: Option<f64>,
    pub max_epochs: usize,
    /// Number of consecutive non-improving evaluations tolerated.
    pub patience: usize,
    /// Updates between validation evaluations.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 0.1,
            minibatch_size: 32,
            clip_threshold: Some(5.0),
            max_epochs: 10,
            patience: 3,
            eval_every: 100,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.minibatch_size == 0 {
            return Err(Error::invalid("minibatch size must be at least 1"));
        }
        if let Some(t) = self.clip_threshold {
            if !(t > 0.0) {
                return Err(Error::invalid("clip threshold must be positive"));
            }
        }
        if self.max_epochs == 0 || self.eval_every == 0 {
            return Err(Error::invalid("max_epochs and eval_every must be positive"));
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint Euclidean norm is at most `threshold`.
/// Returns the norm before clipping.
pub fn clip_gradient<'a>(grads: impl IntoIterator<Item = &'a mut Tensor>, threshold: f64) -> f64 {
    let mut grads: Vec<&mut Tensor> = grads.into_iter().collect();
    let norm = grads.iter().map(|g| g.norm_sq()).sum::<f64>().sqrt();
    if norm > threshold {
        let factor = threshold / norm;
        for g in &mut grads {
            g.scale_in_place(factor);
        }
    }
    norm
}

/// `theta -= eta * grad` for every parameter (after optional clipping), then
/// zeroes the gradients. A non-finite gradient aborts the step without
/// touching any parameter.
pub fn sgd_step(store: &mut ParamStore, config: &OptimConfig) -> Result<()> {
    if store.iter().any(|(_, p)| !p.grad.all_finite()) {
        store.zero_grads();
        return Err(Error::NonFinite { what: "gradient" });
    }
    if let Some(t) = config.clip_threshold {
        clip_gradient(store.iter_mut().map(|p| &mut p.grad), t);
    }
    for p in store.iter_mut() {
        p.value.axpy(-config.learning_rate, &p.grad);
        p.grad.fill(0.0);
    }
    Ok(())
}

/// A model that can be fit with [`train`].
pub trait Trainable {
    type Example;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    /// Adds the gradient of the minibatch cost to the parameter gradients
    /// and returns that cost.
    fn accumulate_gradients(&mut self, batch: &[&Self::Example]) -> Result<f64>;

    /// Cost over `examples` without touching gradients, normalized the same
    /// way as the minibatch cost.
    fn cost(&self, examples: &[Self::Example]) -> Result<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub updates: usize,
    pub train_cost: f64,
    pub val_cost: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StoppingReason {
    PatienceExhausted,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EvalRecord>,
    pub stopping_reason: StoppingReason,
    /// Update count of the evaluation with the lowest validation cost; the
    /// model holds these parameters when [`train`] returns.
    pub best_checkpoint_at: usize,
    pub best_val_cost: f64,
    pub final_update: usize,
    pub epochs: usize,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("updates,train_cost,val_cost\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{}", r.updates, r.train_cost, r.val_cost);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Minibatch SGD with early stopping. See [`train_with`].
pub fn train<M: Trainable>(
    model: &mut M,
    train_set: &[M::Example],
    val_set: &[M::Example],
    config: &OptimConfig,
) -> Result<TrainReport> {
    train_with(model, train_set, val_set, config, |_| {})
}

/// Minibatch SGD with early stopping.
///
/// The validation cost is measured before the first update and then every
/// `eval_every` updates. Training stops once `patience + 1` consecutive
/// evaluations fail to beat the best cost so far, or after `max_epochs`
/// passes over the shuffled training set. The parameters of the best
/// evaluation are restored before returning. `on_eval` sees every record.
pub fn train_with<M: Trainable>(
    model: &mut M,
    train_set: &[M::Example],
    val_set: &[M::Example],
    config: &OptimConfig,
    mut on_eval: impl FnMut(&EvalRecord),
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    model.params_mut().zero_grads();

    let initial_val = finite(model.cost(val_set)?, "validation cost")?;
    let initial = EvalRecord {
        updates: 0,
        train_cost: finite(model.cost(train_set)?, "training cost")?,
        val_cost: initial_val,
    };
    on_eval(&initial);
    let mut records = vec![initial];
    let mut best = (initial_val, 0usize, model.params().snapshot());
    let mut failures = 0;
    let mut updates = 0;
    let mut running = (0.0, 0usize);
    let mut epochs = 0;
    let mut reason = StoppingReason::MaxEpochs;

    'outer: for _ in 0..config.max_epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.minibatch_size) {
            let batch: Vec<&M::Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let cost = model.accumulate_gradients(&batch);
            let cost = match cost.and_then(|c| finite(c, "training cost")) {
                Ok(c) => c,
                Err(e) => {
                    model.params_mut().zero_grads();
                    return Err(e);
                }
            };
            sgd_step(model.params_mut(), config)?;
            updates += 1;
            running.0 += cost;
            running.1 += 1;
            if updates % config.eval_every == 0 {
                let record = EvalRecord {
                    updates,
                    train_cost: running.0 / running.1 as f64,
                    val_cost: finite(model.cost(val_set)?, "validation cost")?,
                };
                running = (0.0, 0);
                on_eval(&record);
                records.push(record);
                if record.val_cost < best.0 {
                    best = (record.val_cost, updates, model.params().snapshot());
                    failures = 0;
                } else {
                    failures += 1;
                    if failures > config.patience {
                        reason = StoppingReason::PatienceExhausted;
                        break 'outer;
                    }
                }
            }
        }
    }
    if reason == StoppingReason::MaxEpochs && updates % config.eval_every != 0 {
        let record = EvalRecord {
            updates,
            train_cost: running.0 / running.1.max(1) as f64,
            val_cost: finite(model.cost(val_set)?, "validation cost")?,
        };
        on_eval(&record);
        records.push(record);
        if record.val_cost < best.0 {
            best = (record.val_cost, updates, model.params().snapshot());
        }
    }
    model.params_mut().restore(&best.2);
    Ok(TrainReport {
        records,
        stopping_reason: reason,
        best_checkpoint_at: best.1,
        best_val_cost: best.0,
        final_update: updates,
        epochs,
    })
}

fn finite(v: f64, what: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { what })
    }
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = t.dims2();
    DMatrix::from_row_slice(r, c, t.data())
}

/// Least-squares weights `W = Y X^T (X X^T)^-1` for column-sample matrices
/// `X` (`d x N`) and `Y` (`k x N`).
pub fn closed_form_linreg(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    linreg_impl(x, y, None)
}

/// As [`closed_form_linreg`] with `ridge * I` added to `X X^T`.
pub fn closed_form_linreg_ridge(x: &Tensor, y: &Tensor, ridge: f64) -> Result<Tensor> {
    if !(ridge >= 0.0) {
        return Err(Error::invalid("ridge must be non-negative"));
    }
    linreg_impl(x, y, Some(ridge))
}

fn linreg_impl(x: &Tensor, y: &Tensor, ridge: Option<f64>) -> Result<Tensor> {
    if x.cols() != y.cols() {
        return Err(Error::shape(
            "closed_form_linreg",
            format!("X has {} samples, Y has {}", x.cols(), y.cols()),
        ));
    }
    let xm = to_dmatrix(x);
    let ym = to_dmatrix(y);
    let mut gram = &xm * xm.transpose();
    if let Some(eps) = ridge {
        for i in 0..gram.nrows() {
            gram[(i, i)] += eps;
        }
    }
    let sv = gram.singular_values();
    let (lo, hi) = (sv.min(), sv.max());
    if !(hi > 0.0) || lo / hi < 1e-13 {
        return Err(Error::Singular("closed_form_linreg"));
    }
    // W gram = Y X^T, and gram is symmetric.
    let rhs = &xm * ym.transpose();
    let wt = gram.lu().solve(&rhs).ok_or(Error::Singular("closed_form_linreg"))?;
    let w = wt.transpose();
    let (r, c) = w.shape();
    Ok(Tensor::matrix(r, c, (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).map(|(i, j)| w[(i, j)]).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralEstimate {
    /// Estimated magnitude of the dominant eigenvalue.
    pub radius: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Power-iteration estimate of the spectral radius of a square matrix.
///
/// Each iterate is tested against two models of the dominant subspace: a
/// single real eigenvector (`U x = mu x`) and a two-dimensional invariant
/// subspace (`U^2 x = a U x + b x`), which covers complex-conjugate and
/// `+-lambda` dominant pairs where plain power iteration oscillates.
pub fn spectral_radius(u: &Tensor, iters: usize) -> Result<SpectralEstimate> {
    let (n, m) = u.dims2();
    if n != m || u.rank() != 2 {
        return Err(Error::shape("spectral_radius", format!("{:?} is not square", u.shape())));
    }
    if iters == 0 {
        return Err(Error::invalid("iters must be at least 1"));
    }
    let apply = |v: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| u.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // A deterministic start vector with no special alignment.
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * ((i * 7919 % 13) as f64)).collect();
    let nx = norm(&x);
    x.iter_mut().for_each(|v| *v /= nx);
    let mut estimate = 0.0;
    for k in 1..=iters {
        let x1 = apply(&x);
        let n1 = norm(&x1);
        if n1 == 0.0 {
            return Ok(SpectralEstimate { radius: 0.0, converged: true, iterations: k });
        }
        let mu: f64 = x.iter().zip(&x1).map(|(a, b)| a * b).sum();
        let real_res = norm(&x1.iter().zip(&x).map(|(a, b)| a - mu * b).collect::<Vec<_>>());
        let x2 = apply(&x1);
        // Least squares for x2 = a x1 + b x.
        let d = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| a * b).sum::<f64>();
        let (g11, g12, g22) = (d(&x1, &x1), d(&x1, &x), d(&x, &x));
        let (r1, r2) = (d(&x1, &x2), d(&x, &x2));
        let det = g11 * g22 - g12 * g12;
        let pair = if det.abs() > 1e-14 * g11 * g22 {
            let a = (r1 * g22 - r2 * g12) / det;
            let b = (g11 * r2 - g12 * r1) / det;
            let res = norm(&(0..n).map(|i| x2[i] - a * x1[i] - b * x[i]).collect::<Vec<_>>());
            let disc = a * a + 4.0 * b;
            let radius = if disc >= 0.0 {
                ((a + disc.sqrt()) / 2.0).abs().max(((a - disc.sqrt()) / 2.0).abs())
            } else {
                (-b).sqrt()
            };
            Some((res, radius))
        } else {
            None
        };
        let real_rel = real_res / n1;
        if real_rel <= 1e-12 {
            return Ok(SpectralEstimate { radius: mu.abs(), converged: true, iterations: k });
        }
        estimate = mu.abs();
        if let Some((res, radius)) = pair {
            let pair_rel = res / norm(&x2).max(f64::MIN_POSITIVE);
            if pair_rel <= 1e-12 {
                return Ok(SpectralEstimate { radius, converged: true, iterations: k });
            }
            if pair_rel < real_rel {
                estimate = radius;
            }
        }
        x = x1.iter().map(|v| v / n1).collect();
    }
    Ok(SpectralEstimate { radius: estimate, converged: false, iterations: iters })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExplosionCheck {
    pub spectral: SpectralEstimate,
    pub derivative_bound: f64,
    /// `radius * derivative_bound`; above 1 the recurrence may amplify gradients.
    pub factor: f64,
    pub warn: bool,
}

/// Flags a recurrent weight matrix whose dominant eigenvalue, scaled by the
/// activation's maximum slope, exceeds 1.
pub fn explosion_check(u: &Tensor, activation: ActivationKind, iters: usize) -> Result<ExplosionCheck> {
    let spectral = spectral_radius(u, iters)?;
    let derivative_bound = activation.derivative_bound();
    let factor = spectral.radius * derivative_bound;
    Ok(ExplosionCheck {
        spectral,
        derivative_bound,
        factor,
        warn: factor > 1.0,
    })
}
