//! Two concentric circles in `[-1, 1]²`, the 50-unit rectifier classifier
//! trained on them, and gradient-magnitude heat maps over the square.
//!
//! The inner circle is class [`INNER`] (the attack target), the outer circle
//! class [`OUTER`].

use std::collections::VecDeque;
use std::f64::consts::TAU;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::attack::{run_attack, AttackConfig};
use crate::error::{Error, Result};
use crate::losses::{PerturbationSource, SourceKind};
use crate::net::{train_sgd, Mlp, Sample, TrainConfig, TrainHistory};
use crate::vector::l1_norm;

pub const OUTER: usize = 0;
pub const INNER: usize = 1;
pub const LOWER: f64 = -1.0;
pub const UPPER: f64 = 1.0;
pub const HIDDEN_UNITS: usize = 50;
/// Per-step L1 budget for equal-perturbation attacks on the unit square.
/// A budget sized for images jumps across the whole box in one step here.
pub const CIRCLES_BETA: f64 = 0.01;
/// Default heat-map resolution.
pub const DEFAULT_RESOLUTION: usize = 200;
/// Magnitudes below this are recorded as the log-of-zero sentinel.
pub const LOG_FLOOR: f64 = 1e-300;
/// Marker stored in log-valued cells whose magnitude is below [`LOG_FLOOR`].
pub const SENTINEL: f64 = f64::NEG_INFINITY;

#[derive(Debug, Clone, PartialEq)]
pub struct CirclesParams {
    pub n: usize,
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for CirclesParams {
    fn default() -> Self {
        Self {
            n: 1000,
            inner_radius: 0.5,
            outer_radius: 1.0,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CirclesDataset {
    pub samples: Vec<Sample>,
    pub params: CirclesParams,
}

impl CirclesDataset {
    pub fn outer(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.label() == OUTER)
    }

    pub fn inner(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.label() == INNER)
    }
}

/// `n / 2` points on each circle (outer first), angle uniform in `[0, 2π)`,
/// isotropic Gaussian noise, clamped into the box.
pub fn make_circles(params: &CirclesParams) -> Result<CirclesDataset> {
    let CirclesParams {
        n,
        inner_radius,
        outer_radius,
        noise_std,
        seed,
    } = *params;
    if n == 0 || n % 2 != 0 {
        return Err(Error::config(format!("sample count must be even and positive, got {n}")));
    }
    if !(0.0 < inner_radius && inner_radius < outer_radius && outer_radius <= 1.0) {
        return Err(Error::config(format!(
            "radii must satisfy 0 < inner < outer <= 1, got {inner_radius} and {outer_radius}"
        )));
    }
    let noise = Normal::new(0.0, noise_std)
        .map_err(|e| Error::config(format!("noise_std {noise_std}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for (radius, label) in [(outer_radius, OUTER), (inner_radius, INNER)] {
        for _ in 0..n / 2 {
            let angle: f64 = rng.random_range(0.0..TAU);
            let mut x = radius * angle.cos();
            let mut y = radius * angle.sin();
            if noise_std > 0.0 {
                x += noise.sample(&mut rng);
                y += noise.sample(&mut rng);
            }
            let coords = vec![x.clamp(LOWER, UPPER), y.clamp(LOWER, UPPER)];
            samples.push(Sample::new(coords, LOWER, UPPER, label)?);
        }
    }
    Ok(CirclesDataset {
        samples,
        params: params.clone(),
    })
}

/// Trains the single-hidden-layer rectifier classifier on `data`.
pub fn train_circles_model(
    data: &CirclesDataset,
    hidden: usize,
    init_seed: u64,
    train: &TrainConfig,
) -> Result<(Mlp, TrainHistory)> {
    let model = Mlp::init(&[2, hidden, 2], init_seed)?;
    train_sgd(&model, &data.samples, train)
}

/// Centre of cell `(row, col)`; row 0 is the top edge (`y = 1`).
pub fn cell_center(resolution: usize, row: usize, col: usize) -> [f64; 2] {
    let h = (UPPER - LOWER) / resolution as f64;
    [
        LOWER + (col as f64 + 0.5) * h,
        UPPER - (row as f64 + 0.5) * h,
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    pub resolution: usize,
    pub loss_kind: SourceKind,
    pub target: usize,
    /// Row-major, `resolution × resolution`.
    pub values: Vec<f64>,
}

impl HeatmapGrid {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.resolution + col]
    }

    /// CSV export: a header line, a metadata line, then one line per row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
        w.write_record(["resolution", "bounds", "loss_kind"])?;
        w.write_record([
            self.resolution.to_string(),
            format!("{LOWER}:{UPPER}"),
            self.loss_kind.name().to_string(),
        ])?;
        for row in self.values.chunks_exact(self.resolution) {
            w.write_record(row.iter().map(|&v| crate::vector::format_real(v)))?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// 8-bit grey levels, min–max normalized over finite cells; sentinels are 0.
    pub fn to_gray(&self) -> Vec<u8> {
        let finite = self.values.iter().copied().filter(|v| v.is_finite());
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
        self.values
            .iter()
            .map(|&v| {
                if !v.is_finite() {
                    0
                } else if hi > lo {
                    ((v - lo) / (hi - lo) * 255.0).round() as u8
                } else {
                    255
                }
            })
            .collect()
    }

    /// Binary portable graymap (`P5`).
    pub fn write_pgm<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.resolution, self.resolution)?;
        out.write_all(&self.to_gray())?;
        out.flush()
    }
}

/// Value of one heat-map cell at `x`.
///
/// CE: `ln Σ|∇ₓJ|`; logit and M-logit: `ln Σ|P|`; CE-sign: `sign Σ|P|`.
pub fn heatmap_value(model: &Mlp, loss_kind: SourceKind, target: usize, x: &[f64]) -> Result<f64> {
    let mass = match loss_kind {
        SourceKind::Ce => l1_norm(&model.grad_input_ce(x, target)?),
        kind => l1_norm(&PerturbationSource::new(kind).perturbation(model, x, target)?),
    };
    Ok(match loss_kind {
        SourceKind::CeSign => {
            if mass > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        _ if mass < LOG_FLOOR => SENTINEL,
        _ => mass.ln(),
    })
}

/// Evaluates [`heatmap_value`] at every cell centre of a uniform grid over
/// the box.
pub fn heatmap(model: &Mlp, loss_kind: SourceKind, target: usize, resolution: usize) -> Result<HeatmapGrid> {
    if resolution < 2 {
        return Err(Error::config("heat map resolution must be at least 2"));
    }
    if model.input_dim() != 2 {
        return Err(Error::Shape {
            expected: 2,
            actual: model.input_dim(),
        });
    }
    let values = (0..resolution * resolution)
        .into_par_iter()
        .map(|k| {
            let p = cell_center(resolution, k / resolution, k % resolution);
            heatmap_value(model, loss_kind, target, &p)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HeatmapGrid {
        resolution,
        loss_kind,
        target,
        values,
    })
}

/// Visited coordinates of an attack from an outer-class point.
pub fn adversarial_trajectory_2d(model: &Mlp, x0: &Sample, config: &AttackConfig) -> Result<Vec<[f64; 2]>> {
    if x0.dim() != 2 {
        return Err(Error::Shape {
            expected: 2,
            actual: x0.dim(),
        });
    }
    if x0.label() != OUTER {
        return Err(Error::domain("trajectories start from an outer-class point"));
    }
    let t = run_attack(model, x0, config)?;
    Ok(t.points.iter().map(|p| [p[0], p[1]]).collect())
}

/// Cells predicted as `class` that are 4-connected to the cell containing
/// the origin. Empty when the origin cell itself is not `class`.
pub fn region_from_origin(model: &Mlp, class: usize, resolution: usize) -> Result<Vec<bool>> {
    let predicted = (0..resolution * resolution)
        .into_par_iter()
        .map(|k| model.predict(&cell_center(resolution, k / resolution, k % resolution)))
        .collect::<Result<Vec<_>>>()?;
    let mut reached = vec![false; resolution * resolution];
    let start = cell_of(resolution, [0.0, 0.0]);
    if predicted[start] != class {
        return Ok(reached);
    }
    let mut queue = VecDeque::from([start]);
    reached[start] = true;
    while let Some(k) = queue.pop_front() {
        let (r, c) = (k / resolution, k % resolution);
        let mut neighbours = Vec::with_capacity(4);
        if r > 0 {
            neighbours.push(k - resolution);
        }
        if r + 1 < resolution {
            neighbours.push(k + resolution);
        }
        if c > 0 {
            neighbours.push(k - 1);
        }
        if c + 1 < resolution {
            neighbours.push(k + 1);
        }
        for nb in neighbours {
            if !reached[nb] && predicted[nb] == class {
                reached[nb] = true;
                queue.push_back(nb);
            }
        }
    }
    Ok(reached)
}

/// Row-major index of the grid cell containing `p`.
pub fn cell_of(resolution: usize, p: [f64; 2]) -> usize {
    let h = (UPPER - LOWER) / resolution as f64;
    let col = (((p[0] - LOWER) / h) as usize).min(resolution - 1);
    let row = (((UPPER - p[1]) / h) as usize).min(resolution - 1);
    row * resolution + col
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::Schedule;
    use crate::net::{Activation, Layer};

    #[test]
    fn noiseless_points_lie_on_their_circle() {
        let data = make_circles(&CirclesParams {
            noise_std: 0.0,
            n: 200,
            ..CirclesParams::default()
        })
        .unwrap();
        for s in data.inner() {
            let r = s.coords()[0].hypot(s.coords()[1]);
            assert!((r - 0.5).abs() < 1e-12);
        }
        assert_eq!(data.inner().count(), 100);
    }

    #[test]
    fn four_points_are_balanced() {
        let data = make_circles(&CirclesParams {
            n: 4,
            ..CirclesParams::default()
        })
        .unwrap();
        assert_eq!(data.outer().count(), 2);
        assert_eq!(data.inner().count(), 2);
        assert!(data
            .samples
            .iter()
            .flat_map(|s| s.coords())
            .all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let bad = |p: CirclesParams| make_circles(&p).is_err();
        let d = CirclesParams::default;
        assert!(bad(CirclesParams { n: 3, ..d() }));
        assert!(bad(CirclesParams { inner_radius: 1.0, ..d() }));
        assert!(bad(CirclesParams { outer_radius: 1.5, ..d() }));
        assert!(bad(CirclesParams { inner_radius: 0.0, ..d() }));
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let p = CirclesParams {
            n: 50 * 2,
            seed: 9,
            ..CirclesParams::default()
        };
        assert_eq!(make_circles(&p).unwrap(), make_circles(&p).unwrap());
    }

    fn linear() -> Mlp {
        let layer = Layer::new(vec![0.5, -1.0, -0.5, 1.0], vec![0.1, 0.0], 2, Activation::Identity)
            .unwrap();
        Mlp::new(vec![layer]).unwrap()
    }

    #[test]
    fn logit_map_of_linear_model_is_constant() {
        let grid = heatmap(&linear(), SourceKind::Logit, INNER, 7).unwrap();
        assert!(grid.values.iter().all(|v| *v == 1.5f64.ln()));
        assert_eq!(grid.to_gray(), vec![255; 49]);
    }

    #[test]
    fn ce_sign_map_is_zero_where_the_gradient_underflows() {
        // gap of 2000 · x: the CE gradient is exactly zero deep on the target side
        let layer = Layer::new(vec![-1000.0, 0.0, 1000.0, 0.0], vec![0.0; 2], 2, Activation::Identity)
            .unwrap();
        let model = Mlp::new(vec![layer]).unwrap();
        assert_eq!(heatmap_value(&model, SourceKind::CeSign, INNER, &[0.9, 0.0]).unwrap(), 0.0);
        assert_eq!(heatmap_value(&model, SourceKind::Ce, INNER, &[0.9, 0.0]).unwrap(), SENTINEL);
        assert_eq!(heatmap_value(&model, SourceKind::CeSign, INNER, &[-0.9, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn exports_have_expected_shape() {
        let grid = heatmap(&linear(), SourceKind::Ce, INNER, 2).unwrap();
        let mut pgm = Vec::new();
        grid.write_pgm(&mut pgm).unwrap();
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(pgm.len(), b"P5\n2 2\n255\n".len() + 4);
        let mut csv = Vec::new();
        grid.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "resolution,bounds,loss_kind");
        assert_eq!(lines[1], "2,-1:1,ce");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[2].split(',').count(), 2);
        assert!(heatmap(&linear(), SourceKind::Ce, INNER, 1).is_err());
    }

    #[test]
    fn sentinels_render_black() {
        let grid = HeatmapGrid {
            resolution: 2,
            loss_kind: SourceKind::Ce,
            target: INNER,
            values: vec![SENTINEL, -3.0, 1.0, -1.0],
        };
        assert_eq!(grid.to_gray(), vec![0, 0, 255, 128]);
    }

    #[test]
    fn cell_geometry() {
        assert_eq!(cell_center(2, 0, 0), [-0.5, 0.5]);
        assert_eq!(cell_center(2, 1, 1), [0.5, -0.5]);
        assert_eq!(cell_of(2, [-0.5, 0.5]), 0);
        assert_eq!(cell_of(2, [0.5, -0.5]), 3);
        assert_eq!(cell_of(4, [1.0, -1.0]), 15);
    }

    #[test]
    fn trajectory_wrapper() {
        let model = linear();
        let x0 = Sample::new(vec![0.8, -0.6], LOWER, UPPER, OUTER).unwrap();
        let cfg = AttackConfig::new(
            PerturbationSource::new(SourceKind::Ce),
            INNER,
            Schedule::EqualMultiplier(0.0),
        )
        .with_max_iterations(3);
        let pts = adversarial_trajectory_2d(&model, &x0, &cfg).unwrap();
        assert_eq!(pts.len(), 4);
        assert!(pts.iter().all(|p| *p == [0.8, -0.6]));
        let inner = x0.clone().with_label(INNER);
        assert!(adversarial_trajectory_2d(&model, &inner, &cfg).is_err());
        // already on the target side: a single point
        let x1 = Sample::new(vec![-0.8, 0.6], LOWER, UPPER, OUTER).unwrap();
        assert_eq!(adversarial_trajectory_2d(&model, &x1, &cfg).unwrap().len(), 1);
    }
}
