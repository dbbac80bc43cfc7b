use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqforge::autodiff::{Graph, Loss, NodeId, ParamStore};
use seqforge::nn::{ActivationKind, Linear};
use seqforge::optim::{explosion_check, spectral_radius, train, train_with, OptimConfig, StoppingReason, Trainable};
use seqforge::tensor::Tensor;

/// `y = W x` with a Gaussian (squared error) cost.
struct LinReg {
    store: ParamStore,
    layer: Linear,
}

type Pair = (Vec<f64>, Vec<f64>);

impl LinReg {
    fn new(d: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let layer = Linear::new(&mut store, "lin", d, k, false, rng).unwrap();
        LinReg { store, layer }
    }

    fn loss(&self, g: &mut Graph, batch: &[&Pair]) -> NodeId {
        let d = batch[0].0.len();
        let x = g.constant(Tensor::matrix(batch.len(), d, batch.iter().flat_map(|e| e.0.clone()).collect()));
        let mu = self.layer.forward(g, &self.store, x).unwrap();
        let targets = batch.iter().flat_map(|e| e.1.clone()).collect();
        let cost = g.loss(&[mu], Loss::Gaussian { targets }).unwrap();
        g.scale(cost, 1.0 / batch.len() as f64).unwrap()
    }
}

impl Trainable for LinReg {
    type Example = Pair;

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn accumulate_gradients(&mut self, batch: &[&Pair]) -> seqforge::Result<f64> {
        let mut g = Graph::new();
        let loss = self.loss(&mut g, batch);
        g.backward_into(loss, &mut self.store)?;
        Ok(g.value(loss).item())
    }

    fn cost(&self, examples: &[Pair]) -> seqforge::Result<f64> {
        let refs: Vec<&Pair> = examples.iter().collect();
        let mut g = Graph::new();
        let loss = self.loss(&mut g, &refs);
        Ok(g.value(loss).item())
    }
}

fn cfg(lr: f64, epochs: usize, patience: usize, eval_every: usize) -> OptimConfig {
    OptimConfig {
        learning_rate: lr,
        minibatch_size: 4,
        clip_threshold: None,
        max_epochs: epochs,
        patience,
        eval_every,
        seed: 3,
    }
}

fn line_data(slope: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<Pair> {
    (0..n)
        .map(|_| {
            let x: f64 = rng.random_range(-1.0..1.0);
            (vec![x], vec![slope * x])
        })
        .collect()
}

#[test]
fn patience_zero_stops_at_first_worse_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let train_set = line_data(1.0, 40, &mut rng);
    let val_set = line_data(-1.0, 40, &mut rng);
    let mut model = LinReg::new(1, 1, &mut rng);
    *model.store.value_mut(model.layer.w) = Tensor::matrix(1, 1, vec![0.0]);
    let r = train(&mut model, &train_set, &val_set, &cfg(0.1, 50, 0, 1)).unwrap();
    assert_eq!(r.stopping_reason, StoppingReason::PatienceExhausted);
    assert_eq!((r.best_checkpoint_at, r.final_update, r.records.len()), (0, 1, 2));
    assert_eq!(model.store.value(model.layer.w).item(), 0.0);
}

#[test]
fn noiseless_regression_validation_cost_falls_to_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let train_set = line_data(3.0, 40, &mut rng);
    let val_set = line_data(3.0, 20, &mut rng);
    let mut model = LinReg::new(1, 1, &mut rng);
    let mut seen = Vec::new();
    let r = train_with(&mut model, &train_set, &val_set, &cfg(0.2, 60, 1000, 10), |rec| seen.push(rec.val_cost)).unwrap();
    assert_eq!(r.stopping_reason, StoppingReason::MaxEpochs);
    assert!(seen.windows(2).all(|w| w[1] <= w[0]));
    assert!(*seen.last().unwrap() < 1e-12);
    assert!((model.store.value(model.layer.w).item() - 3.0).abs() < 1e-6);
    assert_eq!(r.to_csv().lines().count(), seen.len() + 1);
}

#[test]
fn best_parameters_are_restored() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let train_set = line_data(2.0, 40, &mut rng);
    let val_set = line_data(1.0, 40, &mut rng);
    let mut model = LinReg::new(1, 1, &mut rng);
    *model.store.value_mut(model.layer.w) = Tensor::matrix(1, 1, vec![0.0]);
    let mut costs = Vec::new();
    let r = train_with(&mut model, &train_set, &val_set, &cfg(0.05, 30, 100, 1), |rec| costs.push((rec.updates, rec.val_cost)))
        .unwrap();
    let w = model.store.value(model.layer.w).item();
    let best = costs.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    assert_eq!(r.best_checkpoint_at, best.0);
    assert!(r.best_checkpoint_at < r.final_update);
    assert!((model.cost(&val_set).unwrap() - r.best_val_cost).abs() < 1e-15);
    assert!(w > 0.5 && w < 2.0);
}

#[test]
fn power_iteration_matches_dense_eigensolver() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let u = Tensor::uniform(&[5, 5], 1.0, &mut rng);
        let dense = DMatrix::from_row_slice(5, 5, u.data());
        let oracle = dense.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        let est = spectral_radius(&u, 5000).unwrap();
        assert!((est.radius - oracle).abs() < 1e-4, "{} vs {oracle}", est.radius);
    }
    let two = spectral_radius(&Tensor::matrix(3, 3, vec![2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0]), 100).unwrap();
    assert!((two.radius - 2.0).abs() < 1e-6);
}

#[test]
fn explosion_check_scales_by_activation_slope() {
    let u = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, 1.0]);
    let tanh = explosion_check(&u, ActivationKind::Tanh, 200).unwrap();
    let sig = explosion_check(&u, ActivationKind::Sigmoid, 200).unwrap();
    assert!(tanh.warn && (tanh.factor - 3.0).abs() < 1e-6);
    assert!(!sig.warn && (sig.factor - 0.75).abs() < 1e-6);
}
