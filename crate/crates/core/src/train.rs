//! Recourse-augmented training.
//!
//! Minimizes, over mini-batches, the mean of
//! `bce(g(x), y) + λ · bce(g(x + δ*), 1)` where `δ*` minimizes the
//! first-order expansion of the recourse loss over the action set (one LP
//! per example, see [`crate::recourse::adversarial_delta`]). `δ*` is held
//! fixed when differentiating with respect to the parameters.
//!
//! Randomness comes from a single `ChaCha8Rng` seeded with
//! [`TrainConfig::seed`], consumed in this order: parameter init, then per
//! epoch one shuffle of the train rows, then one dropout mask per example
//! in batch order. The recourse term consumes no randomness, so `λ = 0`
//! follows exactly the trajectory of plain supervised training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::ActionSet;
use crate::data::{DatasetBundle, Split};
use crate::error::{Error, Result};
use crate::metrics::{best_f1_threshold, threshold_candidates};
use crate::nn::{bce_loss, Adam, AdamConfig, Architecture, DropoutMask, Example, Gradient, Mlp, DEFAULT_HIDDEN};
use crate::recourse::{adversarial_delta, apply_action};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub seed: u64,
    pub dropout: f64,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.002,
            batch_size: 15,
            epochs: 15,
            lambda: 0.0,
            seed: 0,
            dropout: 0.3,
            hidden: DEFAULT_HIDDEN.to_vec(),
        }
    }
}

impl TrainConfig {
    /// Batch size 30 and 50 epochs, used for the small credit dataset.
    pub fn small_dataset() -> Self {
        TrainConfig {
            batch_size: 30,
            epochs: 50,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Config(format!(
                "learning rate must lie in (0,1], got {}",
                self.learning_rate
            )));
        }
        if !(self.dropout >= 0.0 && self.dropout < 1.0) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0,1), got {}",
                self.dropout
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean supervised loss over the epoch (dropout active).
    pub supervised_loss: f64,
    /// Mean of `λ · bce(g(x+δ*), 1)`; exactly 0 when `λ = 0`.
    pub recourse_loss: f64,
    pub validation_f1: f64,
    pub validation_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// 0-based index of the selected epoch.
    pub best_epoch: usize,
    /// Parameters of the selected epoch, threshold at the validation F1 optimum.
    pub params: Mlp,
}

/// One CSV line per epoch.
pub fn epochs_csv(records: &[EpochRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleLoss {
    pub supervised: f64,
    /// Unweighted `bce(g(x+δ*), 1)`.
    pub recourse: f64,
    pub delta: Vec<f64>,
}

impl ExampleLoss {
    pub fn total(&self, lambda: f64) -> f64 {
        self.supervised + lambda * self.recourse
    }
}

/// Loss terms for one example with dropout disabled.
pub fn per_example_loss(params: &Mlp, aset: &ActionSet, x: &[f64], y: u8, lambda: f64) -> Result<ExampleLoss> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let supervised = bce_loss(params.forward(x, None)?, y);
    let delta = adversarial_delta(params, aset, x)?;
    let recourse = bce_loss(params.score(&apply_action(x, &delta)), 1);
    Ok(ExampleLoss {
        supervised,
        recourse,
        delta,
    })
}

/// Validation-F1-maximizing threshold over the default candidate set.
pub fn select_threshold_max_f1(params: &Mlp, bundle: &DatasetBundle, candidates: Option<&[f64]>) -> (f64, f64) {
    let view = bundle.view(Split::Validation);
    let scores: Vec<f64> = view.x.iter().map(|x| params.score(x)).collect();
    let owned;
    let candidates = match candidates {
        Some(c) => c,
        None => {
            owned = threshold_candidates(&scores);
            &owned
        }
    };
    best_f1_threshold(&scores, &view.y, candidates)
}

pub fn train(bundle: &DatasetBundle, aset: &ActionSet, config: &TrainConfig) -> Result<TrainRun> {
    train_with_observer(bundle, aset, config, |_, _| {})
}

/// Like [`train`], calling `observer(epoch, params)` after every epoch.
pub fn train_with_observer<F>(
    bundle: &DatasetBundle,
    aset: &ActionSet,
    config: &TrainConfig,
    mut observer: F,
) -> Result<TrainRun>
where
    F: FnMut(usize, &Mlp),
{
    config.validate()?;
    if aset.dim() != bundle.dim() {
        return Err(Error::shape("action set", bundle.dim(), aset.dim()));
    }
    let train_rows = bundle.indices(Split::Train);
    if train_rows.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }
    if bundle.count(Split::Validation) == 0 {
        return Err(Error::Config("validation split is empty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let arch = Architecture::new(bundle.dim(), &config.hidden);
    let mut params = Mlp::init(arch.clone(), &mut rng);
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..Default::default()
        },
        &params,
    );
    let mut order = train_rows;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Mlp)> = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sup_sum = 0.0;
        let mut rec_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let weight = 1.0 / batch.len() as f64;
            let mut grad = Gradient::zeros_like(&params);
            for &i in batch {
                let x = bundle.x[i].as_slice();
                let mask = DropoutMask::sample(&arch, config.dropout, &mut rng);
                let sup = params.accumulate(
                    &Example {
                        x,
                        label: bundle.y[i],
                        weight,
                        mask: Some(&mask),
                    },
                    &mut grad,
                )?;
                sup_sum += sup;
                if config.lambda > 0.0 {
                    let delta = adversarial_delta(&params, aset, x)?;
                    let moved = apply_action(x, &delta);
                    let rec = params.accumulate(
                        &Example {
                            x: &moved,
                            label: 1,
                            weight: weight * config.lambda,
                            mask: None,
                        },
                        &mut grad,
                    )?;
                    rec_sum += config.lambda * rec;
                }
            }
            if !(sup_sum.is_finite() && rec_sum.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite training loss in epoch {epoch} (supervised {sup_sum}, recourse {rec_sum})"
                )));
            }
            adam.step(&mut params, &grad)?;
        }

        let (threshold, f1) = select_threshold_max_f1(&params, bundle, None);
        let n = order.len() as f64;
        epochs.push(EpochRecord {
            epoch,
            supervised_loss: sup_sum / n,
            recourse_loss: rec_sum / n,
            validation_f1: f1,
            validation_threshold: threshold,
        });
        log::debug!(
            "epoch {epoch}: sup {:.4} rec {:.4} val-F1 {f1:.4}",
            sup_sum / n,
            rec_sum / n
        );
        observer(epoch, &params);
        if best.as_ref().is_none_or(|(_, b, _)| f1 > *b) {
            let mut snapshot = params.clone();
            snapshot.threshold = threshold;
            best = Some((epoch, f1, snapshot));
        }
    }

    let (best_epoch, _, params) = best.expect("at least one epoch");
    Ok(TrainRun {
        config: config.clone(),
        epochs,
        best_epoch,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_from_csv_str, DatasetConfig, FeatureSpec, Monotonicity};
    use crate::nn::Architecture;
    use rand::Rng;

    fn blobs_csv(n: usize, seed: u64) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = String::from("a,b,y\n");
        for i in 0..n {
            let y = i % 2;
            let c = if y == 1 { 1.5 } else { -1.5 };
            let a: f64 = c + rng.gen_range(-1.0..1.0);
            let b: f64 = c + rng.gen_range(-1.0..1.0);
            s.push_str(&format!("{a},{b},{y}\n"));
        }
        s
    }

    fn blobs(n: usize) -> DatasetBundle {
        let config = DatasetConfig {
            label_column: "y".into(),
            positive_label: "1".into(),
            positive_label_meaning: String::new(),
            train_fraction: 0.8,
            test_holdout: 10,
            delta_max: 0.75,
            features: vec![
                FeatureSpec::continuous("a").actionable(Monotonicity::Free),
                FeatureSpec::continuous("b"),
            ],
            constraints: vec![],
        };
        load_from_csv_str(&config, &blobs_csv(n, 1), 2).unwrap()
    }

    fn small_config(lambda: f64) -> TrainConfig {
        TrainConfig {
            hidden: vec![16, 16],
            lambda,
            epochs: 4,
            ..Default::default()
        }
    }

    #[test]
    fn zero_network_losses_are_ln2() {
        let net = Mlp::zeros(Architecture::new(2, &[4]));
        let set = ActionSet::from_bounds(vec![-0.75; 2], vec![0.75; 2], 0.75, vec![]).unwrap();
        let l = per_example_loss(&net, &set, &[0.3, -0.2], 1, 0.8).unwrap();
        assert!((l.supervised - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((l.recourse - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(l.total(0.0), l.supervised);
        assert_eq!(l.delta, vec![0.0, 0.0]);
    }

    #[test]
    fn lambda_zero_records_zero_recourse_term() {
        let bundle = blobs(120);
        let set = ActionSet::for_bundle(&bundle, None).unwrap();
        let run = train(&bundle, &set, &small_config(0.0)).unwrap();
        assert!(run.epochs.iter().all(|e| e.recourse_loss == 0.0));
        let run = train(&bundle, &set, &small_config(0.8)).unwrap();
        assert!(run.epochs.iter().all(|e| e.recourse_loss > 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let bundle = blobs(120);
        let set = ActionSet::for_bundle(&bundle, None).unwrap();
        let a = train(&bundle, &set, &small_config(0.8)).unwrap();
        let b = train(&bundle, &set, &small_config(0.8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn best_epoch_has_max_validation_f1() {
        let bundle = blobs(120);
        let set = ActionSet::for_bundle(&bundle, None).unwrap();
        let run = train(&bundle, &set, &small_config(0.0)).unwrap();
        let best = run.epochs[run.best_epoch].validation_f1;
        assert!(run.epochs.iter().all(|e| e.validation_f1 <= best));
        assert!(run.epochs[..run.best_epoch].iter().all(|e| e.validation_f1 < best));
        assert_eq!(run.params.threshold, run.epochs[run.best_epoch].validation_threshold);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bundle = blobs(60);
        let set = ActionSet::for_bundle(&bundle, None).unwrap();
        for bad in [
            TrainConfig {
                lambda: -1.0,
                ..small_config(0.0)
            },
            TrainConfig {
                batch_size: 0,
                ..small_config(0.0)
            },
            TrainConfig {
                dropout: 1.0,
                ..small_config(0.0)
            },
        ] {
            assert!(matches!(train(&bundle, &set, &bad), Err(Error::Config(_))));
        }
    }

    fn train_accuracy(params: &Mlp, bundle: &DatasetBundle) -> f64 {
        let view = bundle.view(Split::Train);
        let hits = view
            .x
            .iter()
            .zip(&view.y)
            .filter(|(x, &y)| params.predict(x) == (y == 1))
            .count();
        hits as f64 / view.len() as f64
    }

    #[test]
    fn separable_blobs_are_learned_without_recourse_term() {
        let bundle = blobs(200);
        let set = ActionSet::for_bundle(&bundle, None).unwrap();
        let run = train(&bundle, &set, &TrainConfig::default()).unwrap();
        assert_eq!(run.epochs.len(), 15);
        let acc = train_accuracy(&run.params, &bundle);
        assert!(acc >= 0.95, "train accuracy {acc}");
    }

    // Overlapping classes where the actionable column carries part of the signal.
    fn overlapping(n: usize, seed: u64) -> DatasetBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = String::from("a,b,y\n");
        for _ in 0..n {
            let a: f64 = rng.gen_range(-2.0..2.0);
            let b: f64 = rng.gen_range(-2.0..2.0);
            let y = u8::from(rng.gen_bool(crate::nn::sigmoid(0.6 * a + 2.0 * b - 1.0)));
            s.push_str(&format!("{a},{b},{y}\n"));
        }
        let config = DatasetConfig {
            label_column: "y".into(),
            positive_label: "1".into(),
            positive_label_meaning: String::new(),
            train_fraction: 0.7,
            test_holdout: n / 6,
            delta_max: 0.75,
            features: vec![
                FeatureSpec::continuous("a").actionable(Monotonicity::Free),
                FeatureSpec::continuous("b"),
            ],
            constraints: vec![],
        };
        load_from_csv_str(&config, &s, seed).unwrap()
    }

    fn lp_recourse_neg(params: &Mlp, set: &ActionSet, bundle: &DatasetBundle) -> f64 {
        let view = bundle.view(Split::Test);
        let neg: Vec<&[f64]> = view.x.iter().copied().filter(|x| !params.predict(x)).collect();
        let found = neg
            .iter()
            .filter(|x| crate::recourse::recourse_adversarial(params, set, x).unwrap().valid)
            .count();
        found as f64 / neg.len().max(1) as f64
    }

    #[test]
    fn recourse_term_raises_recourse_rate() {
        let mut base = 0.0;
        let mut augmented = 0.0;
        for seed in 0..3 {
            let bundle = overlapping(600, seed);
            let set = ActionSet::for_bundle(&bundle, None).unwrap();
            let cfg = TrainConfig {
                hidden: vec![32, 32],
                epochs: 10,
                seed,
                ..Default::default()
            };
            let plain = train(&bundle, &set, &cfg).unwrap();
            let rec = train(&bundle, &set, &TrainConfig { lambda: 0.8, ..cfg }).unwrap();
            base += lp_recourse_neg(&plain.params, &set, &bundle) / 3.0;
            augmented += lp_recourse_neg(&rec.params, &set, &bundle) / 3.0;
        }
        assert!(augmented > base, "lambda 0.8: {augmented}, lambda 0: {base}");
    }

    #[test]
    fn lp_action_beats_random_feasible_actions() {
        let bundle = overlapping(200, 4);
        let set = ActionSet::for_bundle(&bundle, None).unwrap();
        let net = Mlp::init(Architecture::new(2, &[8, 8]), &mut ChaCha8Rng::seed_from_u64(9));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for x in bundle.x.iter().take(5) {
            let l = per_example_loss(&net, &set, x, 0, 0.8).unwrap();
            let grad = net.grad_input(x, 1).unwrap();
            let dot = |d: &[f64]| grad.iter().zip(d).map(|(g, v)| g * v).sum::<f64>();
            let best = dot(&l.delta);
            assert!(set.contains(&l.delta).unwrap());
            for _ in 0..1000 {
                let d = [rng.gen_range(-0.75..=0.75), 0.0];
                assert!(best <= dot(&d) + 1e-12);
            }
        }
    }
}
