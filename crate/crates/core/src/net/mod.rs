//! Dense feed-forward classifier with exact input-gradient backpropagation.
//!
//! The network never applies a final softmax: [`Mlp::forward`] returns the
//! logits and every intermediate activation so that any linear functional of
//! the logits can be differentiated with respect to the input in one reverse
//! pass ([`Mlp::grad_input`]).

mod format;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use format::{read_model, write_model};
pub use train::{train_sgd, TrainConfig, TrainHistory};

/// A point in input space together with its box bounds and class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    coords: Vec<f64>,
    lower: f64,
    upper: f64,
    label: usize,
}

impl Sample {
    pub fn new(coords: Vec<f64>, lower: f64, upper: f64, label: usize) -> Result<Self> {
        if !(lower < upper) {
            return Err(Error::config(format!(
                "sample bounds must satisfy lower < upper, got [{lower}, {upper}]"
            )));
        }
        if let Some(v) = coords.iter().find(|v| !(lower..=upper).contains(*v)) {
            return Err(Error::domain(format!(
                "coordinate {v} outside box [{lower}, {upper}]"
            )));
        }
        Ok(Self {
            coords,
            lower,
            upper,
            label,
        })
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn lower_bound(&self) -> f64 {
        self.lower
    }

    pub fn upper_bound(&self) -> f64 {
        self.upper
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// Same box and label, new coordinates.
    pub fn with_coords(&self, coords: Vec<f64>) -> Result<Self> {
        Self::new(coords, self.lower, self.upper, self.label)
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = label;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative; the rectifier uses subgradient 0 at exactly 0.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// One affine map followed by an activation. Weights are `outputs × inputs`,
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    weights: Vec<f64>,
    bias: Vec<f64>,
    inputs: usize,
    activation: Activation,
}

impl Layer {
    pub fn new(
        weights: Vec<f64>,
        bias: Vec<f64>,
        inputs: usize,
        activation: Activation,
    ) -> Result<Self> {
        let outputs = bias.len();
        if outputs == 0 || inputs == 0 {
            return Err(Error::config("layer dimensions must be positive"));
        }
        if weights.len() != outputs * inputs {
            return Err(Error::config(format!(
                "weight matrix has {} entries, expected {outputs}x{inputs}",
                weights.len()
            )));
        }
        Ok(Self {
            weights,
            bias,
            inputs,
            activation,
        })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.bias.len()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub(crate) fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// `Wᵀ delta`
    fn transpose_apply(&self, delta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.inputs];
        for (row, d) in self.weights.chunks_exact(self.inputs).zip(delta) {
            if *d == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * d;
            }
        }
        out
    }
}

/// Cached activations from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    pub pre_activations: Vec<Vec<f64>>,
    pub post_activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &[f64] {
        self.post_activations
            .last()
            .expect("a trace always has at least one layer")
    }
}

/// Dense feed-forward classifier producing logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::config("a model needs at least one layer"));
        };
        if last.activation != Activation::Identity {
            return Err(Error::config("final layer must be identity (logits)"));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::config(format!(
                    "layer dimensions do not chain: {} outputs feed {} inputs",
                    pair[0].outputs(),
                    pair[1].inputs()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Randomly initialized network with rectifier hidden layers.
    ///
    /// `widths` lists every layer width from input to logits, e.g. `[2, 50, 2]`.
    /// Weights are uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("need at least input and output widths"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (k, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..=limit))
                .collect();
            let activation = if k + 2 == widths.len() {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(Layer::new(weights, vec![0.0; fan_out], fan_in, activation)?);
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn check_class(&self, c: usize) -> Result<()> {
        if c >= self.num_classes() {
            return Err(Error::config(format!(
                "class {c} out of range for {} classes",
                self.num_classes()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut post_activations: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = post_activations.last().map_or(x, |v| v.as_slice());
            let pre = layer.affine(input);
            let post = pre.iter().map(|&z| layer.activation.apply(z)).collect();
            pre_activations.push(pre);
            post_activations.push(post);
        }
        Ok(ForwardTrace {
            input: x.to_vec(),
            pre_activations,
            post_activations,
        })
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut trace = self.forward(x)?;
        Ok(trace.post_activations.pop().unwrap_or_default())
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(crate::vector::argmax(&self.logits(x)?))
    }

    /// Reverse pass: `∇ₓ (seed · g(x))` for the input recorded in `trace`.
    pub fn backward(&self, trace: &ForwardTrace, seed: &[f64]) -> Result<Vec<f64>> {
        if seed.len() != self.num_classes() {
            return Err(Error::Shape {
                expected: self.num_classes(),
                actual: seed.len(),
            });
        }
        let mut delta = seed.to_vec();
        for (layer, pre) in self.layers.iter().zip(&trace.pre_activations).rev() {
            for (d, &z) in delta.iter_mut().zip(pre) {
                *d *= layer.activation.derivative(z);
            }
            delta = layer.transpose_apply(&delta);
        }
        Ok(delta)
    }

    /// `∇ₓ (seed · g(θ, x))`; with a one-hot seed this is the gradient of one logit.
    pub fn grad_input(&self, x: &[f64], seed: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward(x)?;
        self.backward(&trace, seed)
    }

    /// Gradient of a single logit.
    pub fn grad_logit(&self, x: &[f64], class: usize) -> Result<Vec<f64>> {
        self.check_class(class)?;
        let trace = self.forward(x)?;
        self.backward(&trace, &one_hot(self.num_classes(), class))
    }

    /// Input Jacobian of the logits, one row per class.
    pub fn logit_jacobian(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let trace = self.forward(x)?;
        (0..self.num_classes())
            .map(|m| self.backward(&trace, &one_hot(self.num_classes(), m)))
            .collect()
    }

    /// `∇ₓ J` where `J = −log softmax(g(θ, x))_c`.
    pub fn grad_input_ce(&self, x: &[f64], c: usize) -> Result<Vec<f64>> {
        self.check_class(c)?;
        let trace = self.forward(x)?;
        let seed = ce_seed(trace.logits(), c)?;
        self.backward(&trace, &seed)
    }
}

pub fn one_hot(len: usize, index: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

/// `softmax(z) − onehot(c)`, with the target entry formed as `−Σ_{m≠c} p_m`
/// so it keeps full relative precision when `p_c` is close to one.
pub fn ce_seed(logits: &[f64], c: usize) -> Result<Vec<f64>> {
    let mut seed = softmax(logits)?;
    seed[c] = -seed
        .iter()
        .enumerate()
        .filter(|&(m, _)| m != c)
        .map(|(_, p)| p)
        .sum::<f64>();
    Ok(seed)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `−log softmax(logits)_c`, evaluated as `logsumexp(logits) − logits_c`.
pub fn cross_entropy(logits: &[f64], c: usize) -> Result<f64> {
    if c >= logits.len() {
        return Err(Error::config(format!(
            "class {c} out of range for {} logits",
            logits.len()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("cross-entropy input"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok((lse - logits[c]).max(0.0))
}

/// Central-difference gradient estimate of `f` at `x`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vector::{l2_norm, relative_l2};

    fn identity_net(bias: [f64; 2]) -> Mlp {
        let layer = Layer::new(vec![1.0, 0.0, 0.0, 1.0], bias.to_vec(), 2, Activation::Identity)
            .unwrap();
        Mlp::new(vec![layer]).unwrap()
    }

    /// 2 → 3 (relu) → 2 with hand-picked weights.
    fn hand_net() -> Mlp {
        let hidden = Layer::new(
            vec![1.0, 2.0, -1.0, 1.0, 0.5, -3.0],
            vec![0.1, 0.0, -0.2],
            2,
            Activation::Relu,
        )
        .unwrap();
        let out = Layer::new(
            vec![1.0, -1.0, 2.0, 0.5, 0.25, -1.0],
            vec![0.0, 1.0],
            3,
            Activation::Identity,
        )
        .unwrap();
        Mlp::new(vec![hidden, out]).unwrap()
    }

    #[test]
    fn identity_network_passes_input_through() {
        let net = identity_net([0.0, 0.0]);
        assert_eq!(net.logits(&[0.3, 0.7]).unwrap(), vec![0.3, 0.7]);
        let net = identity_net([1.0, -1.0]);
        assert_eq!(net.logits(&[0.0, 0.0]).unwrap(), vec![1.0, -1.0]);
    }

    #[test]
    fn hand_evaluated_two_layer_forward() {
        // hidden pre = (0.5 - 1.0 + 0.1, -0.5 - 0.5, 0.25 + 1.5 - 0.2) = (-0.4, -1.0, 1.55)
        // hidden post = (0, 0, 1.55)
        // logits = (2 * 1.55, -1 * 1.55 + 1) = (3.1, -0.55)
        let trace = hand_net().forward(&[0.5, -0.5]).unwrap();
        let pre = &trace.pre_activations[0];
        assert!((pre[0] + 0.4).abs() < 1e-15);
        assert!((pre[1] + 1.0).abs() < 1e-15);
        assert!((pre[2] - 1.55).abs() < 1e-15);
        assert_eq!(trace.post_activations[0][..2], [0.0, 0.0]);
        let logits = trace.logits();
        assert!((logits[0] - 3.1).abs() < 1e-14);
        assert!((logits[1] + 0.55).abs() < 1e-14);
    }

    #[test]
    fn trace_replays_activations() {
        let net = hand_net();
        let trace = net.forward(&[0.2, 0.9]).unwrap();
        for ((layer, pre), post) in net
            .layers()
            .iter()
            .zip(&trace.pre_activations)
            .zip(&trace.post_activations)
        {
            let replay: Vec<f64> = pre.iter().map(|&z| layer.activation().apply(z)).collect();
            assert_eq!(&replay, post);
        }
        assert_eq!(trace.logits(), trace.post_activations.last().unwrap().as_slice());
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let err = hand_net().forward(&[1.0]).unwrap_err();
        assert!(matches!(err, Error::Shape { expected: 2, actual: 1 }));
    }

    #[test]
    fn model_construction_checks_chaining_and_final_layer() {
        let a = Layer::new(vec![0.0; 6], vec![0.0; 3], 2, Activation::Relu).unwrap();
        let b = Layer::new(vec![0.0; 4], vec![0.0; 2], 2, Activation::Identity).unwrap();
        assert!(Mlp::new(vec![a.clone(), b]).is_err());
        assert!(Mlp::new(vec![a]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15);
        assert!(p[1] < 1e-300);
        assert!(matches!(
            softmax(&[f64::NAN, 0.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&[0.0, 0.0], 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        let v = cross_entropy(&[0.0, 3f64.ln()], 1).unwrap();
        assert!((v + 0.75f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let logits = [0.3, -1.7, 2.4, 0.05];
        let p = softmax(&logits).unwrap();
        for c in 0..logits.len() {
            let ce = cross_entropy(&logits, c).unwrap();
            assert!((ce + p[c].ln()).abs() < 1e-13);
        }
    }

    #[test]
    fn identity_gradient_is_the_seed() {
        let net = identity_net([0.0, 0.0]);
        assert_eq!(net.grad_input(&[0.4, 0.1], &[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(net.grad_input(&[0.4, 0.1], &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn hand_net_gradient_matches_finite_differences() {
        let net = hand_net();
        let x = [0.5, -0.5];
        for c in 0..2 {
            let an = net.grad_input_ce(&x, c).unwrap();
            let fd = finite_diff_grad(
                |p| cross_entropy(&net.logits(p).unwrap(), c).unwrap(),
                &x,
                1e-5,
            );
            assert!(relative_l2(&an, &fd, &an, 1e-300) < 1e-6);
        }
    }

    #[test]
    fn finite_diff_of_simple_functions() {
        let x = [0.3, -0.2, 0.9];
        assert!(l2_norm(&finite_diff_grad(|_| 4.2, &x, 1e-5)) == 0.0);
        let g = finite_diff_grad(|p| p[0], &x, 1e-5);
        assert!((g[0] - 1.0).abs() < 1e-10);
        assert!(g[1].abs() < 1e-10 && g[2].abs() < 1e-10);
    }

    #[test]
    fn ce_gradient_vanishes_when_target_is_certain() {
        // Binary linear net with logit gap ≈ 27.6 → 1 − p_c ≈ 1e-12.
        let net = identity_net([0.0, 0.0]);
        let gap = (1e12f64).ln();
        let x = [gap / 2.0, -gap / 2.0];
        let p = softmax(&net.logits(&x).unwrap()).unwrap();
        assert!((1.0 - p[0] - 1e-12).abs() < 1e-15);
        let g = net.grad_input_ce(&x, 0).unwrap();
        let per_class = net.logit_jacobian(&x).unwrap();
        let scale = per_class.iter().map(|r| l2_norm(r)).fold(0.0, f64::max);
        assert!(l2_norm(&g) <= 1e-9 * scale);
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        let a = Mlp::init(&[2, 50, 2], 7).unwrap();
        let b = Mlp::init(&[2, 50, 2], 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.input_dim(), 2);
        assert_eq!(a.num_classes(), 2);
        let limit = (6.0f64 / 52.0).sqrt();
        assert!(a.layers()[0].weights().iter().all(|w| w.abs() <= limit));
        assert_ne!(a, Mlp::init(&[2, 50, 2], 8).unwrap());
    }

    #[test]
    fn sample_validates_box() {
        assert!(Sample::new(vec![0.5, 1.5], 0.0, 1.0, 0).is_err());
        assert!(Sample::new(vec![0.5], 1.0, 1.0, 0).is_err());
        assert!(Sample::new(vec![0.0, 1.0], 0.0, 1.0, 0).is_ok());
    }
}
