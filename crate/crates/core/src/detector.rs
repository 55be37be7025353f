//! Binary detectors separating genuine inputs from adversarially perturbed
//! ones.
//!
//! This is a small two-dimensional stand-in for retraining a vision model on
//! adversarial images. The detector is a fresh `2 → 32 → 2` rectifier network
//! trained with [`train_sgd`]; label 0 is genuine, label 1 adversarial. Only
//! relative detectability between attack sources is meaningful here.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attack::{sweep, AttackConfig};
use crate::error::{Error, Result};
use crate::losses::SourceKind;
use crate::net::{train_sgd, Mlp, Sample, TrainConfig};
use crate::vector::format_real;

pub const GENUINE: usize = 0;
pub const ADVERSARIAL: usize = 1;
pub const DETECTOR_HIDDEN: usize = 32;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.95;

pub const REPORT_HEADER: [&str; 7] = [
    "source",
    "n_train",
    "n_test",
    "acc_genuine",
    "acc_adversarial",
    "acc_overall",
    "pooled",
];

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorDataset {
    pub genuine: Vec<Sample>,
    /// Final points of successful attacks, tagged with the source that made them.
    pub adversarial: Vec<(Sample, SourceKind)>,
    pub split_seed: u64,
    pub train_fraction: f64,
    /// Sources that produced no successful attack and were left out.
    pub omitted: Vec<SourceKind>,
}

/// Indices into [`DetectorDataset::genuine`] and
/// [`DetectorDataset::adversarial`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectorSplit {
    pub genuine_train: Vec<usize>,
    pub genuine_test: Vec<usize>,
    pub adversarial_train: Vec<usize>,
    pub adversarial_test: Vec<usize>,
}

impl DetectorDataset {
    pub fn new(genuine: Vec<Sample>, adversarial: Vec<(Sample, SourceKind)>, split_seed: u64) -> Self {
        Self {
            genuine,
            adversarial,
            split_seed,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            omitted: Vec::new(),
        }
    }

    pub fn with_train_fraction(mut self, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::config(format!("train fraction must lie in (0, 1), got {fraction}")));
        }
        self.train_fraction = fraction;
        Ok(self)
    }

    /// Source kinds with at least one adversarial point, in canonical order.
    pub fn sources(&self) -> Vec<SourceKind> {
        SourceKind::ALL
            .into_iter()
            .filter(|k| self.count(*k) > 0)
            .collect()
    }

    pub fn count(&self, kind: SourceKind) -> usize {
        self.adversarial.iter().filter(|(_, k)| *k == kind).count()
    }

    /// Stratified split: the genuine points and each source's cohort are
    /// shuffled and cut separately.
    pub fn split(&self) -> Result<DetectorSplit> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.split_seed);
        let mut cut = |mut idx: Vec<usize>, what: &str| -> Result<(Vec<usize>, Vec<usize>)> {
            idx.shuffle(&mut rng);
            let n_train = (self.train_fraction * idx.len() as f64).round() as usize;
            if n_train == 0 || n_train == idx.len() {
                return Err(Error::config(format!(
                    "degenerate split: {} {what} points with train fraction {} leave an empty partition",
                    idx.len(),
                    self.train_fraction
                )));
            }
            let test = idx.split_off(n_train);
            Ok((idx, test))
        };
        let (genuine_train, genuine_test) = cut((0..self.genuine.len()).collect(), "genuine")?;
        let mut adversarial_train = Vec::new();
        let mut adversarial_test = Vec::new();
        if self.adversarial.is_empty() {
            return Err(Error::config("degenerate split: no adversarial points"));
        }
        for kind in self.sources() {
            let idx = (0..self.adversarial.len())
                .filter(|&i| self.adversarial[i].1 == kind)
                .collect();
            let (train, test) = cut(idx, kind.name())?;
            adversarial_train.extend(train);
            adversarial_test.extend(test);
        }
        Ok(DetectorSplit {
            genuine_train,
            genuine_test,
            adversarial_train,
            adversarial_test,
        })
    }
}

/// Attacks every eligible point of `data` under each configuration and
/// keeps the successful end points. Every point of `data` is genuine.
pub fn build_detector_dataset(
    model: &Mlp,
    data: &[Sample],
    configs: &[AttackConfig],
    workers: usize,
    split_seed: u64,
) -> Result<DetectorDataset> {
    if configs.is_empty() {
        return Err(Error::config("no attack configurations given"));
    }
    let report = sweep(model, data, configs, workers)?;
    let mut adversarial = Vec::new();
    for entry in &report.entries {
        let kind = entry.config.source.kind();
        adversarial.extend(entry.flipped().map(|t| (t.final_sample.clone(), kind)));
    }
    let mut dataset = DetectorDataset::new(data.to_vec(), adversarial, split_seed);
    dataset.omitted = configs
        .iter()
        .map(|c| c.source.kind())
        .filter(|k| dataset.count(*k) == 0)
        .collect();
    dataset.omitted.dedup();
    Ok(dataset)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorRow {
    /// `None` for the pooled detector evaluated on every cohort at once.
    pub source: Option<SourceKind>,
    pub pooled: bool,
    pub n_train: usize,
    pub n_test: usize,
    pub acc_genuine: f64,
    pub acc_adversarial: f64,
    pub acc_overall: f64,
}

impl DetectorRow {
    pub fn source_name(&self) -> &'static str {
        self.source.map_or("all", SourceKind::name)
    }
}

fn labeled(s: &Sample, label: usize) -> Sample {
    s.clone().with_label(label)
}

fn accuracy(model: &Mlp, points: &[&Sample], label: usize) -> Result<(usize, usize)> {
    let mut hits = 0;
    for p in points {
        if model.predict(p.coords())? == label {
            hits += 1;
        }
    }
    Ok((hits, points.len()))
}

fn evaluate_row(
    model: &Mlp,
    source: Option<SourceKind>,
    pooled: bool,
    n_train: usize,
    genuine: &[&Sample],
    adversarial: &[&Sample],
) -> Result<DetectorRow> {
    let (hg, ng) = accuracy(model, genuine, GENUINE)?;
    let (ha, na) = accuracy(model, adversarial, ADVERSARIAL)?;
    Ok(DetectorRow {
        source,
        pooled,
        n_train,
        n_test: ng + na,
        acc_genuine: hg as f64 / ng as f64,
        acc_adversarial: ha as f64 / na as f64,
        acc_overall: (hg + ha) as f64 / (ng + na) as f64,
    })
}

fn fit(train: &[Sample], config: &TrainConfig) -> Result<Mlp> {
    let dim = train[0].dim();
    let init = Mlp::init(&[dim, DETECTOR_HIDDEN, 2], config.seed)?;
    Ok(train_sgd(&init, train, config)?.0)
}

/// Trains one detector per source cohort (`per_source`) or a single pooled
/// detector, and reports held-out accuracies.
///
/// The pooled mode returns one row per source (the pooled detector scored on
/// that cohort's test points plus all genuine test points) followed by an
/// `all` row.
pub fn train_detector(
    dataset: &DetectorDataset,
    per_source: bool,
    config: &TrainConfig,
) -> Result<Vec<DetectorRow>> {
    let split = dataset.split()?;
    let g_train: Vec<Sample> = split
        .genuine_train
        .iter()
        .map(|&i| labeled(&dataset.genuine[i], GENUINE))
        .collect();
    let g_test: Vec<&Sample> = split.genuine_test.iter().map(|&i| &dataset.genuine[i]).collect();
    let adv = |idx: &[usize], kind: Option<SourceKind>| -> Vec<&Sample> {
        idx.iter()
            .map(|&i| &dataset.adversarial[i])
            .filter(|(_, k)| kind.is_none_or(|want| *k == want))
            .map(|(s, _)| s)
            .collect()
    };

    let mut rows = Vec::new();
    if per_source {
        for kind in dataset.sources() {
            let mut train = g_train.clone();
            train.extend(
                adv(&split.adversarial_train, Some(kind))
                    .into_iter()
                    .map(|s| labeled(s, ADVERSARIAL)),
            );
            let model = fit(&train, config)?;
            let test = adv(&split.adversarial_test, Some(kind));
            rows.push(evaluate_row(&model, Some(kind), false, train.len(), &g_test, &test)?);
        }
    } else {
        let mut train = g_train;
        train.extend(
            adv(&split.adversarial_train, None)
                .into_iter()
                .map(|s| labeled(s, ADVERSARIAL)),
        );
        let model = fit(&train, config)?;
        for kind in dataset.sources() {
            let test = adv(&split.adversarial_test, Some(kind));
            rows.push(evaluate_row(&model, Some(kind), true, train.len(), &g_test, &test)?);
        }
        let test = adv(&split.adversarial_test, None);
        rows.push(evaluate_row(&model, None, true, train.len(), &g_test, &test)?);
    }
    Ok(rows)
}

pub fn write_detector_report<W: Write>(rows: &[DetectorRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        w.write_record([
            r.source_name().to_string(),
            r.n_train.to_string(),
            r.n_test.to_string(),
            format_real(r.acc_genuine),
            format_real(r.acc_adversarial),
            format_real(r.acc_overall),
            r.pooled.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
