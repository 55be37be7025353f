//! Plain-text model serialization.
//!
//! ```text
//! mlp <num_layers> <num_classes>
//! layer <outputs> <inputs> <relu|identity>
//! <row-major weights, one matrix row per line>
//! <bias>
//! ...
//! ```
//!
//! Reals are written with 17 significant digits, which round-trips every f64.

use std::fmt::Write as _;

use super::{Activation, Layer, Mlp};
use crate::error::{Error, Result};

pub fn write_model(model: &Mlp) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "mlp {} {}", model.layers().len(), model.num_classes());
    for layer in model.layers() {
        let _ = writeln!(
            out,
            "layer {} {} {}",
            layer.outputs(),
            layer.inputs(),
            layer.activation().tag()
        );
        for row in layer.weights().chunks_exact(layer.inputs()) {
            write_reals(&mut out, row);
        }
        write_reals(&mut out, layer.bias());
    }
    out
}

fn write_reals(out: &mut String, values: &[f64]) {
    let line: Vec<String> = values.iter().map(|v| format!("{v:.16e}")).collect();
    out.push_str(&line.join(" "));
    out.push('\n');
}

struct Tokens<'a> {
    inner: std::iter::Enumerate<std::str::SplitWhitespace<'a>>,
    last: usize,
}

impl<'a> Tokens<'a> {
    fn next(&mut self, what: &str) -> Result<&'a str> {
        match self.inner.next() {
            Some((i, t)) => {
                self.last = i;
                Ok(t)
            }
            None => Err(Error::Parse {
                token: self.last + 1,
                message: format!("unexpected end of input, expected {what}"),
            }),
        }
    }

    fn fail(&self, message: String) -> Error {
        Error::Parse {
            token: self.last,
            message,
        }
    }

    fn keyword(&mut self, word: &str) -> Result<()> {
        let t = self.next(word)?;
        if t != word {
            return Err(self.fail(format!("expected `{word}`, found `{t}`")));
        }
        Ok(())
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let t = self.next(what)?;
        t.parse()
            .map_err(|_| self.fail(format!("expected {what}, found `{t}`")))
    }

    fn real(&mut self) -> Result<f64> {
        let t = self.next("a real number")?;
        match t.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(self.fail(format!("expected a finite real, found `{t}`"))),
        }
    }
}

pub fn read_model(text: &str) -> Result<Mlp> {
    let mut tokens = Tokens {
        inner: text.split_whitespace().enumerate(),
        last: 0,
    };
    tokens.keyword("mlp")?;
    let num_layers = tokens.count("layer count")?;
    let num_classes = tokens.count("class count")?;
    if num_layers == 0 {
        return Err(tokens.fail("model must have at least one layer".into()));
    }
    let mut layers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        tokens.keyword("layer")?;
        let outputs = tokens.count("output width")?;
        let inputs = tokens.count("input width")?;
        let tag = tokens.next("activation tag")?;
        let activation = Activation::from_tag(tag)
            .ok_or_else(|| tokens.fail(format!("unknown activation `{tag}`")))?;
        let weights = (0..outputs * inputs)
            .map(|_| tokens.real())
            .collect::<Result<Vec<_>>>()?;
        let bias = (0..outputs).map(|_| tokens.real()).collect::<Result<Vec<_>>>()?;
        layers.push(
            Layer::new(weights, bias, inputs, activation).map_err(|e| tokens.fail(e.to_string()))?,
        );
    }
    if let Ok(extra) = tokens.next("end of input") {
        return Err(tokens.fail(format!("trailing content `{extra}`")));
    }
    let model = Mlp::new(layers).map_err(|e| tokens.fail(e.to_string()))?;
    if model.num_classes() != num_classes {
        return Err(tokens.fail(format!(
            "header declares {num_classes} classes but final layer has {}",
            model.num_classes()
        )));
    }
    Ok(model)
}
