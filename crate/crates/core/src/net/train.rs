use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ce_seed, cross_entropy, Mlp, Sample};
use crate::error::{Error, Result};
use crate::vector::argmax;

/// Plain mini-batch SGD settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 500,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Mean training loss and accuracy; entry 0 is the untrained model, entry `k`
/// follows epoch `k`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub loss: Vec<f64>,
    pub accuracy: Vec<f64>,
}

impl TrainHistory {
    pub fn final_accuracy(&self) -> f64 {
        self.accuracy.last().copied().unwrap_or(0.0)
    }
}

/// Mean cross-entropy and accuracy of `model` over `data`.
pub fn evaluate(model: &Mlp, data: &[Sample]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for s in data {
        let logits = model.logits(s.coords())?;
        loss += cross_entropy(&logits, s.label())?;
        if argmax(&logits) == s.label() {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains a copy of `model` on `data` and returns it with its loss history.
pub fn train_sgd(model: &Mlp, data: &[Sample], config: &TrainConfig) -> Result<(Mlp, TrainHistory)> {
    if data.is_empty() {
        return Err(Error::config("training data is empty"));
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::config("batch size and learning rate must be positive"));
    }
    for s in data {
        if s.label() >= model.num_classes() {
            return Err(Error::config(format!(
                "label {} out of range for {} classes",
                s.label(),
                model.num_classes()
            )));
        }
        if s.dim() != model.input_dim() {
            return Err(Error::Shape {
                expected: model.input_dim(),
                actual: s.dim(),
            });
        }
    }

    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = TrainHistory::default();
    let (loss, acc) = evaluate(&model, data)?;
    history.loss.push(loss);
    history.accuracy.push(acc);

    let mut grads: Vec<(Vec<f64>, Vec<f64>)> = model
        .layers()
        .iter()
        .map(|l| (vec![0.0; l.weights().len()], vec![0.0; l.outputs()]))
        .collect();

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            for (gw, gb) in grads.iter_mut() {
                gw.fill(0.0);
                gb.fill(0.0);
            }
            for &i in batch {
                accumulate(&model, &data[i], &mut grads)?;
            }
            let step = config.learning_rate / batch.len() as f64;
            for (layer, (gw, gb)) in model.layers_mut().iter_mut().zip(&grads) {
                for (w, g) in layer.weights_mut().iter_mut().zip(gw) {
                    *w -= step * g;
                }
                for (b, g) in layer.bias_mut().iter_mut().zip(gb) {
                    *b -= step * g;
                }
            }
        }
        let (loss, acc) = evaluate(&model, data)?;
        history.loss.push(loss);
        history.accuracy.push(acc);
    }
    Ok((model, history))
}

/// Adds the parameter gradient of the cross-entropy at one sample.
fn accumulate(model: &Mlp, sample: &Sample, grads: &mut [(Vec<f64>, Vec<f64>)]) -> Result<()> {
    let trace = model.forward(sample.coords())?;
    let mut delta = ce_seed(trace.logits(), sample.label())?;
    for (k, layer) in model.layers().iter().enumerate().rev() {
        for (d, &z) in delta.iter_mut().zip(&trace.pre_activations[k]) {
            *d *= layer.activation().derivative(z);
        }
        let input = if k == 0 {
            &trace.input
        } else {
            &trace.post_activations[k - 1]
        };
        let (gw, gb) = &mut grads[k];
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            gb[o] += d;
            let row = &mut gw[o * layer.inputs()..(o + 1) * layer.inputs()];
            for (g, v) in row.iter_mut().zip(input) {
                *g += d * v;
            }
        }
        if k > 0 {
            delta = layer.transpose_apply(&delta);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_points() -> Vec<Sample> {
        vec![
            Sample::new(vec![-0.5, 0.2], -1.0, 1.0, 0).unwrap(),
            Sample::new(vec![0.5, -0.1], -1.0, 1.0, 1).unwrap(),
        ]
    }

    #[test]
    fn separable_pair_is_fit_within_200_epochs() {
        let model = Mlp::init(&[2, 8, 2], 3).unwrap();
        let config = TrainConfig {
            epochs: 200,
            seed: 11,
            ..TrainConfig::default()
        };
        let (_, history) = train_sgd(&model, &two_points(), &config).unwrap();
        assert_eq!(history.final_accuracy(), 1.0);
        assert!(history.loss.last() < history.loss.first());
        assert_eq!(history.loss.len(), 201);
    }

    #[test]
    fn same_seed_gives_identical_weights() {
        let model = Mlp::init(&[2, 8, 2], 3).unwrap();
        let config = TrainConfig {
            epochs: 20,
            seed: 5,
            ..TrainConfig::default()
        };
        let (a, _) = train_sgd(&model, &two_points(), &config).unwrap();
        let (b, _) = train_sgd(&model, &two_points(), &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_data_is_rejected() {
        let model = Mlp::init(&[2, 4, 2], 0).unwrap();
        assert!(matches!(
            train_sgd(&model, &[], &TrainConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let model = Mlp::init(&[2, 4, 2], 0).unwrap();
        let data = vec![Sample::new(vec![0.0, 0.0], -1.0, 1.0, 2).unwrap()];
        assert!(train_sgd(&model, &data, &TrainConfig::default()).is_err());
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let model = Mlp::init(&[2, 5, 3], 9).unwrap();
        let sample = Sample::new(vec![0.3, -0.7], -1.0, 1.0, 2).unwrap();
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = model
            .layers()
            .iter()
            .map(|l| (vec![0.0; l.weights().len()], vec![0.0; l.outputs()]))
            .collect();
        accumulate(&model, &sample, &mut grads).unwrap();
        let loss = |m: &Mlp| cross_entropy(&m.logits(sample.coords()).unwrap(), 2).unwrap();
        let h = 1e-6;
        for k in 0..2 {
            for i in 0..model.layers()[k].weights().len() {
                let mut up = model.clone();
                up.layers_mut()[k].weights_mut()[i] += h;
                let mut down = model.clone();
                down.layers_mut()[k].weights_mut()[i] -= h;
                let fd = (loss(&up) - loss(&down)) / (2.0 * h);
                assert!((fd - grads[k].0[i]).abs() < 1e-7, "layer {k} weight {i}");
            }
        }
    }
}
