use super::optim::Optimizer;
use super::TrainConfig;
use crate::autograd::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{Block, Hooks, Mode, Model};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Mean mini-batch loss of each epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

/// Minimizes mean cross-entropy of `model` under `hooks`. Each epoch
/// visits the data in an order drawn from `tc.seed` and the epoch number.
/// Batch-norm running statistics are updated after every step.
pub fn train(model: &mut Model, data: &Dataset, tc: &TrainConfig, hooks: &mut dyn Hooks) -> Result<TrainLog> {
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let alphas: Vec<usize> = model
        .info()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.block == Block::Activation)
        .map(|(i, _)| i)
        .collect();
    let mut opt = Optimizer::new(tc, model.values());
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..tc.epochs {
        let mut rng = SplitMix64::derive(tc.seed, epoch as u64 + 1);
        order.sort_unstable();
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for (step, idx) in order.chunks(tc.batch_size).enumerate() {
            let (images, labels) = data.batch(idx);
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let out = model.forward(&mut tape, &vars, &images, Mode::Train, hooks)?;
            let loss = tape.cross_entropy(out.logits, &labels)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: value });
            }
            let g = tape.backward(loss)?;
            let mut grads: Vec<Tensor> = vars.iter().map(|&v| g.get(v)).collect();
            if tc.alpha_decay > 0.0 {
                for &i in &alphas {
                    let a = model.values()[i].clone();
                    grads[i] = grads[i].zip_map(&a, |g, a| g + 2.0 * tc.alpha_decay * a)?;
                }
            }
            if grads.iter().any(|t| !t.all_finite()) {
                return Err(Error::Diverged { epoch, step, loss: value });
            }
            let mut values = model.values().to_vec();
            opt.step(&mut values, &grads);
            // PACT clip levels must stay positive
            for &i in &alphas {
                values[i] = values[i].map(|a| a.max(1e-3));
            }
            model.set_values(values)?;
            model.update_bn(&out.bn_stats);
            total += value;
            batches += 1;
            log.steps += 1;
        }
        log.epoch_loss.push(total / batches as f64);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::models::{ActKind, ModelConfig, Plain};
    use crate::pipeline::evaluate;

    fn small() -> ModelConfig {
        ModelConfig {
            depth: 1,
            ..Default::default()
        }
    }

    #[test]
    fn zero_lr_keeps_parameters_and_flat_curve() {
        let data = synth_dataset(3, 64, 10, 8, 8).unwrap();
        let mut m = Model::new(&small(), 1).unwrap();
        let before = m.values().to_vec();
        let tc = TrainConfig {
            lr: 0.0,
            epochs: 3,
            batch_size: 64,
            ..Default::default()
        };
        let log = train(&mut m, &data, &tc, &mut Plain).unwrap();
        assert_eq!(m.values(), &before[..]);
        assert_eq!(log.epoch_loss.len(), 3);
        // epochs see the samples in different orders, so only rounding differs
        assert!(log.epoch_loss.windows(2).all(|w| (w[0] - w[1]).abs() <= 1e-12 * w[0]));
    }

    #[test]
    fn deterministic_given_seed() {
        let data = synth_dataset(3, 48, 10, 8, 8).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 16,
            seed: 4,
            ..Default::default()
        };
        let run = || {
            let mut m = Model::new(&small(), 1).unwrap();
            let log = train(&mut m, &data, &tc, &mut Plain).unwrap();
            (m.values().to_vec(), log)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn learns_the_toy_task() {
        let data = synth_dataset(11, 400, 10, 8, 8).unwrap();
        let mut m = Model::new(&small(), 2).unwrap();
        let tc = TrainConfig {
            epochs: 12,
            ..Default::default()
        };
        let log = train(&mut m, &data, &tc, &mut Plain).unwrap();
        assert!(log.epoch_loss.last().unwrap() < &log.epoch_loss[0]);
        assert!(evaluate(&m, &Plain, &data, 1).unwrap() > 0.8);
    }

    #[test]
    fn divergence_is_located() {
        let data = synth_dataset(3, 32, 10, 8, 8).unwrap();
        let mut m = Model::new(&small(), 1).unwrap();
        let bad = m.values()[0].map(|_| f64::NAN);
        let name = m.info()[0].name.clone();
        m.set_param(&name, bad).unwrap();
        let tc = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        assert!(matches!(
            train(&mut m, &data, &tc, &mut Plain),
            Err(Error::Diverged { epoch: 0, step: 0, .. })
        ));
    }

    #[test]
    fn alpha_decay_shrinks_clip_levels() {
        let data = synth_dataset(3, 64, 10, 8, 8).unwrap();
        let cfg = ModelConfig {
            act: ActKind::Pact,
            ..small()
        };
        let tc = TrainConfig {
            epochs: 2,
            alpha_decay: 0.1,
            ..Default::default()
        };
        let mut m = Model::new(&cfg, 1).unwrap();
        train(&mut m, &data, &tc, &mut Plain).unwrap();
        let a = m.param("layers.1.channel.alpha").unwrap().item().unwrap();
        assert!(a < 6.0, "{a}");
    }
}
