use std::io::Write;

use rayon::prelude::*;

use super::{run_attack, AttackConfig, AttackTrajectory, IterationRecord};
use crate::error::{Error, Result};
use crate::losses::SourceKind;
use crate::net::{Mlp, Sample};
use crate::vector::format_real as real;
use crate::stats::{confidence_band, mean_std, quantiles, Band, MeanStd, Quantiles};

pub const TRAJECTORY_HEADER: [&str; 12] = [
    "sample_id",
    "source",
    "iteration",
    "softmax_initial",
    "softmax_target",
    "logit_initial",
    "logit_target",
    "grad_l1",
    "alpha_used",
    "cum_l2",
    "cum_linf",
    "subspace",
];

pub const SUMMARY_HEADER: [&str; 10] = [
    "source",
    "schedule",
    "n_samples",
    "flip_rate",
    "iters_mean",
    "iters_std",
    "l2_mean",
    "l2_std",
    "linf_mean",
    "linf_std",
];

/// Aggregates over the samples of one configuration that flipped.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub source: SourceKind,
    pub schedule: &'static str,
    /// Samples attacked (eligible ones).
    pub n_samples: usize,
    pub n_flipped: usize,
    /// Samples skipped because they were already predicted as the target.
    pub skipped: usize,
    pub flip_rate: f64,
    pub iterations: MeanStd,
    pub l2: MeanStd,
    pub linf: MeanStd,
    pub iteration_quantiles: Quantiles,
    pub l2_quantiles: Quantiles,
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub config: AttackConfig,
    /// Dataset indices of the attacked samples, parallel to `trajectories`.
    pub sample_ids: Vec<usize>,
    pub trajectories: Vec<AttackTrajectory>,
    pub summary: SweepSummary,
}

impl SweepEntry {
    pub fn flipped(&self) -> impl Iterator<Item = &AttackTrajectory> {
        self.trajectories.iter().filter(|t| t.flipped())
    }

    /// Per-iteration mean curve with 95% band over all attacked samples.
    ///
    /// Trajectories that stopped early hold their final state for the
    /// remaining iterations.
    pub fn curve<F>(&self, metric: F) -> Vec<Band>
    where
        F: Fn(&IterationRecord) -> f64,
    {
        let len = self
            .trajectories
            .iter()
            .map(|t| t.records.len())
            .max()
            .unwrap_or(0);
        let rows: Vec<Vec<f64>> = self
            .trajectories
            .iter()
            .map(|t| {
                (0..len)
                    .map(|i| metric(&t.records[i.min(t.records.len() - 1)]))
                    .collect()
            })
            .collect();
        confidence_band(&rows)
    }
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
}

impl SweepReport {
    pub fn entry(&self, kind: SourceKind) -> Option<&SweepEntry> {
        self.entries.iter().find(|e| e.config.source.kind() == kind)
    }
}

fn summarize(config: &AttackConfig, trajectories: &[AttackTrajectory], skipped: usize) -> SweepSummary {
    let flips: Vec<_> = trajectories.iter().filter_map(|t| t.first_flip).collect();
    let iters: Vec<f64> = flips.iter().map(|f| f.iteration as f64).collect();
    let l2: Vec<f64> = flips.iter().map(|f| f.l2).collect();
    let linf: Vec<f64> = flips.iter().map(|f| f.linf).collect();
    let n = trajectories.len();
    SweepSummary {
        source: config.source.kind(),
        schedule: config.schedule.name(),
        n_samples: n,
        n_flipped: flips.len(),
        skipped,
        flip_rate: if n == 0 { 0.0 } else { flips.len() as f64 / n as f64 },
        iterations: mean_std(&iters),
        l2: mean_std(&l2),
        linf: mean_std(&linf),
        iteration_quantiles: quantiles(&iters),
        l2_quantiles: quantiles(&l2),
    }
}

/// Runs every configuration against every eligible sample.
///
/// A sample is eligible for a configuration when the model does not already
/// predict its target class. Trajectories are computed on `workers` threads
/// and gathered in dataset order, so the report does not depend on the
/// worker count.
pub fn sweep(
    model: &Mlp,
    dataset: &[Sample],
    configs: &[AttackConfig],
    workers: usize,
) -> Result<SweepReport> {
    for cfg in configs {
        cfg.validate()?;
    }
    let predictions = dataset
        .iter()
        .map(|s| model.predict(s.coords()))
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, usize)> = configs
        .iter()
        .enumerate()
        .flat_map(|(k, cfg)| {
            predictions
                .iter()
                .enumerate()
                .filter(move |&(_, &p)| p != cfg.target_class)
                .map(move |(i, _)| (k, i))
        })
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<AttackTrajectory> = pool.install(|| {
        jobs.par_iter()
            .map(|&(k, i)| run_attack(model, &dataset[i], &configs[k]))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut results = results.into_iter();
    let mut jobs = jobs.into_iter().peekable();
    let entries = configs
        .iter()
        .enumerate()
        .map(|(k, cfg)| {
            let mut sample_ids = Vec::new();
            let mut trajectories = Vec::new();
            while let Some(&(jk, i)) = jobs.peek() {
                if jk != k {
                    break;
                }
                jobs.next();
                sample_ids.push(i);
                trajectories.push(results.next().expect("one result per job"));
            }
            let skipped = dataset.len() - sample_ids.len();
            let summary = summarize(cfg, &trajectories, skipped);
            SweepEntry {
                config: *cfg,
                sample_ids,
                trajectories,
                summary,
            }
        })
        .collect();
    Ok(SweepReport { entries })
}


pub fn write_trajectories_csv<W: Write>(report: &SweepReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRAJECTORY_HEADER)?;
    for entry in &report.entries {
        let source = entry.config.source.kind().name();
        for (id, t) in entry.sample_ids.iter().zip(&entry.trajectories) {
            for r in &t.records {
                w.write_record([
                    id.to_string(),
                    source.to_string(),
                    r.iteration.to_string(),
                    real(r.softmax_initial),
                    real(r.softmax_target),
                    real(r.logit_initial),
                    real(r.logit_target),
                    real(r.grad_l1),
                    real(r.alpha_used),
                    real(r.cum_l2),
                    real(r.cum_linf),
                    r.subspace.tag().to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(report: &SweepReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for entry in &report.entries {
        let s = &entry.summary;
        w.write_record([
            s.source.name().to_string(),
            s.schedule.to_string(),
            s.n_samples.to_string(),
            real(s.flip_rate),
            real(s.iterations.mean),
            real(s.iterations.std),
            real(s.l2.mean),
            real(s.l2.std),
            real(s.linf.mean),
            real(s.linf.std),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::Schedule;
    use crate::losses::PerturbationSource;
    use crate::net::{Activation, Layer};

    fn model() -> Mlp {
        let layer = Layer::new(vec![2.0, 2.0, -2.0, -2.0], vec![0.0; 2], 2, Activation::Identity)
            .unwrap();
        Mlp::new(vec![layer]).unwrap()
    }

    fn config(kind: SourceKind) -> AttackConfig {
        AttackConfig::new(PerturbationSource::new(kind), 0, Schedule::EqualPerturbation(0.05))
    }

    fn sample(x: f64, y: f64) -> Sample {
        Sample::new(vec![x, y], -1.0, 1.0, 1).unwrap()
    }

    #[test]
    fn single_sample_report_has_zero_spread() {
        let data = [sample(-0.3, -0.1)];
        let report = sweep(&model(), &data, &[config(SourceKind::Ce)], 1).unwrap();
        let entry = &report.entries[0];
        let t = &entry.trajectories[0];
        let s = &entry.summary;
        assert_eq!(s.n_samples, 1);
        assert_eq!(s.flip_rate, 1.0);
        assert_eq!(s.iterations.mean, t.first_flip_iteration().unwrap() as f64);
        assert_eq!(s.l2.mean, t.flip_l2().unwrap());
        assert_eq!(s.iterations.std, 0.0);
        assert_eq!(s.l2.std, 0.0);
    }

    #[test]
    fn duplicated_samples_have_zero_spread() {
        let one = sweep(&model(), &[sample(-0.3, -0.1)], &[config(SourceKind::Logit)], 1).unwrap();
        let two = sweep(
            &model(),
            &[sample(-0.3, -0.1), sample(-0.3, -0.1)],
            &[config(SourceKind::Logit)],
            2,
        )
        .unwrap();
        let (a, b) = (&one.entries[0].summary, &two.entries[0].summary);
        assert_eq!(b.iterations.std, 0.0);
        assert_eq!(a.iterations.mean, b.iterations.mean);
        assert_eq!(a.l2.mean, b.l2.mean);
    }

    #[test]
    fn already_targeted_samples_are_skipped() {
        let data = [sample(0.4, 0.4), sample(-0.2, -0.2)];
        let report = sweep(&model(), &data, &[config(SourceKind::Ce)], 1).unwrap();
        let e = &report.entries[0];
        assert_eq!(e.sample_ids, vec![1]);
        assert_eq!(e.summary.skipped, 1);
    }

    #[test]
    fn empty_effective_dataset_is_a_zero_sample_aggregate() {
        let data = [sample(0.4, 0.4)];
        let report = sweep(&model(), &data, &[config(SourceKind::Ce)], 1).unwrap();
        let s = &report.entries[0].summary;
        assert_eq!(s.n_samples, 0);
        assert_eq!(s.flip_rate, 0.0);
        assert!(s.iterations.mean.is_nan());
        let mut buf = Vec::new();
        write_summary_csv(&report, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().lines().nth(1).unwrap().starts_with("ce,equal-perturbation,0,0.0,NaN"));
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let data: Vec<Sample> = (0..12)
            .map(|i| sample(-0.9 + 0.05 * i as f64, -0.3))
            .collect();
        let configs: Vec<_> = SourceKind::ALL.iter().map(|&k| config(k)).collect();
        let render = |workers| {
            let r = sweep(&model(), &data, &configs, workers).unwrap();
            let mut a = Vec::new();
            let mut b = Vec::new();
            write_trajectories_csv(&r, &mut a).unwrap();
            write_summary_csv(&r, &mut b).unwrap();
            (a, b)
        };
        assert_eq!(render(1), render(4));
    }

    #[test]
    fn csv_headers_are_exact() {
        let report = sweep(&model(), &[sample(-0.3, -0.1)], &[config(SourceKind::Ce)], 1).unwrap();
        let mut buf = Vec::new();
        write_trajectories_csv(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "sample_id,source,iteration,softmax_initial,softmax_target,logit_initial,logit_target,grad_l1,alpha_used,cum_l2,cum_linf,subspace"
        );
        let mut buf = Vec::new();
        write_summary_csv(&report, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap().lines().next().unwrap(),
            "source,schedule,n_samples,flip_rate,iters_mean,iters_std,l2_mean,l2_std,linf_mean,linf_std"
        );
    }

    #[test]
    fn curves_hold_the_final_state() {
        let data = [sample(-0.3, -0.1), sample(-0.9, -0.9)];
        let report = sweep(&model(), &data, &[config(SourceKind::Ce)], 1).unwrap();
        let e = &report.entries[0];
        let longest = e.trajectories.iter().map(|t| t.records.len()).max().unwrap();
        let curve = e.curve(|r| r.softmax_target);
        assert_eq!(curve.len(), longest);
        assert!(curve.last().unwrap().mean > 0.5);
    }
}
