#![allow(dead_code)]

use std::sync::OnceLock;

use advlab_core::circles::{make_circles, train_circles_model, CirclesDataset, CirclesParams, HIDDEN_UNITS};
use advlab_core::net::{Layer, TrainConfig};
use advlab_core::Mlp;

pub struct Trained {
    pub data: CirclesDataset,
    pub model: Mlp,
    pub accuracy: f64,
    pub loss: (f64, f64),
}

/// The default circles model, trained once per test binary.
pub fn circles() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let data = make_circles(&CirclesParams::default()).unwrap();
        let (model, history) =
            train_circles_model(&data, HIDDEN_UNITS, 0, &TrainConfig::default()).unwrap();
        Trained {
            accuracy: history.final_accuracy(),
            loss: (history.loss[0], *history.loss.last().unwrap()),
            data,
            model,
        }
    })
}

/// Randomly initialized network with every weight multiplied by `gain`,
/// which makes confident predictions common.
pub fn scaled_random(widths: &[usize], seed: u64, gain: f64) -> Mlp {
    let base = Mlp::init(widths, seed).unwrap();
    let layers = base
        .layers()
        .iter()
        .map(|l| {
            let w = l.weights().iter().map(|v| v * gain).collect();
            Layer::new(w, l.bias().to_vec(), l.inputs(), l.activation()).unwrap()
        })
        .collect();
    Mlp::new(layers).unwrap()
}
