use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use advlab_core::attack::{write_summary_csv, write_trajectories_csv, DEFAULT_ALPHA, DEFAULT_MAX_ITERATIONS};
use advlab_core::circles::{self, CirclesDataset, CirclesParams, INNER};
use advlab_core::detector::{build_detector_dataset, train_detector, write_detector_report, DEFAULT_TRAIN_FRACTION};
use advlab_core::losses::{DEFAULT_CONFIDENCE, DEFAULT_KAPPA, DEFAULT_SIGN_EPSILON, SINGLE_PRECISION_EPSILON};
use advlab_core::net::{read_model, write_model, TrainConfig};
use advlab_core::theory::{verify_point, verify_sign_saturation, write_theorem_report};
use advlab_core::{sweep, AttackConfig, Mlp, PerturbationSource, Schedule, SourceKind, StopRule, Subspace};
use clap::Args;
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{MaybeReal, Resolver, ScheduleKind, SourceList};
use crate::{CliError, Shared};

type Outcome = Result<(), CliError>;

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Seed of the circles sampler [default: --seed].
    #[arg(long)]
    data_seed: Option<String>,
    /// Number of points, split evenly between the circles [default: 1000].
    #[arg(long)]
    n_samples: Option<String>,
    /// [default: 0.5]
    #[arg(long)]
    inner_radius: Option<String>,
    /// [default: 1.0]
    #[arg(long)]
    outer_radius: Option<String>,
    /// Standard deviation of the Gaussian jitter [default: 0.05].
    #[arg(long)]
    noise_std: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainerArgs {
    /// Seed of the weight initialization and batch shuffling [default: --seed].
    #[arg(long)]
    init_seed: Option<String>,
    /// [default: 0.05]
    #[arg(long)]
    learning_rate: Option<String>,
    /// [default: 500]
    #[arg(long)]
    epochs: Option<String>,
    /// [default: 32]
    #[arg(long)]
    batch_size: Option<String>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// Comma-separated perturbation sources: ce, ce-sign, logit, m-logit [default: all].
    #[arg(long)]
    sources: Option<String>,
    /// Target class [default: 1, the inner circle].
    #[arg(long)]
    target: Option<String>,
    /// equal-multiplier or equal-perturbation [default: equal-perturbation].
    #[arg(long)]
    schedule: Option<String>,
    /// Multiplier of the equal-multiplier schedule [default: 0.0005].
    #[arg(long)]
    alpha: Option<String>,
    /// Per-step L1 budget of the equal-perturbation schedule [default: 0.01].
    #[arg(long)]
    beta: Option<String>,
    /// [default: 250]
    #[arg(long)]
    max_iterations: Option<String>,
    /// first-flip, fixed or target-confidence:<p> [default: first-flip].
    #[arg(long)]
    stop_rule: Option<String>,
    /// L-infinity radius around the starting point, or `none` [default: none].
    #[arg(long)]
    epsilon: Option<String>,
    /// Margin at which the m-logit source stops pushing [default: 20].
    #[arg(long)]
    kappa: Option<String>,
    /// Gradient components below this count as zero for ce-sign [default: 1e-16].
    #[arg(long)]
    sign_epsilon: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    shared: Shared,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    trainer: TrainerArgs,
    /// Hidden rectifier units [default: 50].
    #[arg(long)]
    hidden: Option<String>,
}

#[derive(Debug, Args)]
pub struct AttackCmdArgs {
    #[command(flatten)]
    shared: Shared,
    /// Model file written by train-circles.
    #[arg(long)]
    model: Option<String>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    attack: AttackArgs,
    /// Attack only the first N data points, 0 for all [default: 0].
    #[arg(long)]
    max_samples: Option<String>,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[command(flatten)]
    shared: Shared,
    /// Model file written by train-circles.
    #[arg(long)]
    model: Option<String>,
    /// Comma-separated map kinds [default: ce,ce-sign,logit].
    #[arg(long)]
    kinds: Option<String>,
    /// Target class [default: 1].
    #[arg(long)]
    target: Option<String>,
    /// Cells per side [default: 200].
    #[arg(long)]
    resolution: Option<String>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    shared: Shared,
    /// Model file written by train-circles.
    #[arg(long)]
    model: Option<String>,
    /// Seed of the point sampler [default: --seed].
    #[arg(long)]
    data_seed: Option<String>,
    /// Number of uniformly sampled points [default: 2000].
    #[arg(long)]
    points: Option<String>,
    /// Target class [default: 1].
    #[arg(long)]
    target: Option<String>,
    /// Confidence threshold separating the subspaces [default: 0.9].
    #[arg(long)]
    tau: Option<String>,
}

#[derive(Debug, Args)]
pub struct DetectorArgs {
    #[command(flatten)]
    shared: Shared,
    /// Model file written by train-circles.
    #[arg(long)]
    model: Option<String>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    attack: AttackArgs,
    #[command(flatten)]
    trainer: TrainerArgs,
    /// Seed of the stratified train/test split [default: --seed].
    #[arg(long)]
    split_seed: Option<String>,
    /// [default: 0.95]
    #[arg(long)]
    train_fraction: Option<String>,
}

struct Common {
    out: PathBuf,
    workers: usize,
    seed: u64,
}

fn common(r: &mut Resolver, shared: &Shared) -> Result<Common, CliError> {
    let out: String = r.get("out", shared.out.clone(), "out".to_string())?;
    let default_workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let workers: usize = r.get("workers", shared.workers.clone(), default_workers)?;
    if workers == 0 {
        return Err(CliError::Usage("workers must be at least 1".into()));
    }
    let seed = r.get("seed", shared.seed.clone(), 0u64)?;
    // Heat maps use the global pool; a second initialization is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    Ok(Common {
        out: PathBuf::from(out),
        workers,
        seed,
    })
}

fn data_params(r: &mut Resolver, a: &DataArgs, seed: u64) -> Result<CirclesParams, CliError> {
    let d = CirclesParams::default();
    Ok(CirclesParams {
        seed: r.get("data_seed", a.data_seed.clone(), seed)?,
        n: r.get("n_samples", a.n_samples.clone(), d.n)?,
        inner_radius: r.get("inner_radius", a.inner_radius.clone(), d.inner_radius)?,
        outer_radius: r.get("outer_radius", a.outer_radius.clone(), d.outer_radius)?,
        noise_std: r.get("noise_std", a.noise_std.clone(), d.noise_std)?,
    })
}

fn trainer(r: &mut Resolver, a: &TrainerArgs, seed: u64) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        seed: r.get("init_seed", a.init_seed.clone(), seed)?,
        learning_rate: r.get("learning_rate", a.learning_rate.clone(), d.learning_rate)?,
        epochs: r.get("epochs", a.epochs.clone(), d.epochs)?,
        batch_size: r.get("batch_size", a.batch_size.clone(), d.batch_size)?,
    })
}

fn attack_configs(r: &mut Resolver, a: &AttackArgs) -> Result<Vec<AttackConfig>, CliError> {
    let sources: SourceList = r.get("sources", a.sources.clone(), SourceList::all())?;
    let target: usize = r.get("target", a.target.clone(), INNER)?;
    let kind: ScheduleKind = r.get("schedule", a.schedule.clone(), ScheduleKind::EqualPerturbation)?;
    let alpha: f64 = r.get("alpha", a.alpha.clone(), DEFAULT_ALPHA)?;
    let beta: f64 = r.get("beta", a.beta.clone(), circles::CIRCLES_BETA)?;
    let max_iterations = r.get("max_iterations", a.max_iterations.clone(), DEFAULT_MAX_ITERATIONS)?;
    let stop_rule: StopRule = r.get("stop_rule", a.stop_rule.clone(), StopRule::FirstFlip)?;
    let epsilon: MaybeReal = r.get("epsilon", a.epsilon.clone(), MaybeReal(None))?;
    let kappa: f64 = r.get("kappa", a.kappa.clone(), DEFAULT_KAPPA)?;
    let sign_epsilon: f64 = r.get("sign_epsilon", a.sign_epsilon.clone(), DEFAULT_SIGN_EPSILON)?;
    let schedule = match kind {
        ScheduleKind::EqualMultiplier => Schedule::EqualMultiplier(alpha),
        ScheduleKind::EqualPerturbation => Schedule::EqualPerturbation(beta),
    };
    let mut configs = Vec::with_capacity(sources.0.len());
    for k in sources.0 {
        let source = PerturbationSource::new(k)
            .with_kappa(kappa)?
            .with_sign_epsilon(sign_epsilon)?;
        let cfg = AttackConfig::new(source, target, schedule)
            .with_max_iterations(max_iterations)
            .with_stop_rule(stop_rule)
            .with_epsilon_ball(epsilon.0);
        cfg.validate()?;
        configs.push(cfg);
    }
    Ok(configs)
}

fn load_model(r: &mut Resolver, flag: Option<String>) -> Result<Mlp, CliError> {
    let path: String = r.require("model", flag)?;
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    read_model(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Writes `name` inside `dir` through `fill`.
fn write_file<F>(dir: &Path, name: &str, fill: F) -> Outcome
where
    F: FnOnce(&mut BufWriter<File>) -> Result<(), CliError>,
{
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    fill(&mut w).map_err(|e| match e {
        CliError::Core(advlab_core::Error::Csv(inner)) => CliError::Io(format!("{}: {inner}", path.display())),
        other => other,
    })?;
    w.flush().map_err(|e| CliError::io(&path, e))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn finish(r: &Resolver, out: &Path) -> Outcome {
    let path = r.write_manifest(out)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn dataset(params: &CirclesParams) -> Result<CirclesDataset, CliError> {
    Ok(circles::make_circles(params)?)
}

pub fn train_circles(a: TrainArgs) -> Outcome {
    let mut r = Resolver::new("train-circles", a.shared.config.as_deref())?;
    let c = common(&mut r, &a.shared)?;
    let params = data_params(&mut r, &a.data, c.seed)?;
    let train = trainer(&mut r, &a.trainer, c.seed)?;
    let hidden: usize = r.get("hidden", a.hidden, circles::HIDDEN_UNITS)?;
    r.finish()?;

    let data = dataset(&params)?;
    let (model, history) = circles::train_circles_model(&data, hidden, train.seed, &train)?;
    create_dir(&c.out)?;
    let text = write_model(&model);
    write_file(&c.out, "model.txt", |w| {
        w.write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string()))
    })?;
    write_file(&c.out, "history.csv", |w| {
        writeln!(w, "epoch,loss,accuracy").map_err(|e| CliError::Io(e.to_string()))?;
        for (i, (l, acc)) in history.loss.iter().zip(&history.accuracy).enumerate() {
            writeln!(w, "{i},{l:?},{acc:?}").map_err(|e| CliError::Io(e.to_string()))?;
        }
        Ok(())
    })?;
    finish(&r, &c.out)?;
    println!("final training accuracy {:.4}", history.final_accuracy());
    Ok(())
}

pub fn attack(a: AttackCmdArgs) -> Outcome {
    let mut r = Resolver::new("attack", a.shared.config.as_deref())?;
    let c = common(&mut r, &a.shared)?;
    let model = load_model(&mut r, a.model)?;
    let params = data_params(&mut r, &a.data, c.seed)?;
    let max_samples: usize = r.get("max_samples", a.max_samples, 0)?;
    let configs = attack_configs(&mut r, &a.attack)?;
    r.finish()?;

    let data = dataset(&params)?;
    let mut samples = data.samples;
    if max_samples > 0 {
        samples.truncate(max_samples);
    }
    let report = sweep(&model, &samples, &configs, c.workers)?;
    create_dir(&c.out)?;
    write_file(&c.out, "trajectories.csv", |w| Ok(write_trajectories_csv(&report, w)?))?;
    write_file(&c.out, "summary.csv", |w| Ok(write_summary_csv(&report, w)?))?;
    finish(&r, &c.out)?;
    for e in &report.entries {
        let s = &e.summary;
        println!(
            "{:<8} attacked {:>5}  flip rate {:.3}  iterations {:.2}  l2 {:.5}",
            s.source.name(),
            s.n_samples,
            s.flip_rate,
            s.iterations.mean,
            s.l2.mean
        );
    }
    Ok(())
}

pub fn heatmap(a: HeatmapArgs) -> Outcome {
    let mut r = Resolver::new("heatmap", a.shared.config.as_deref())?;
    let c = common(&mut r, &a.shared)?;
    let model = load_model(&mut r, a.model)?;
    let default_kinds = SourceList(vec![SourceKind::Ce, SourceKind::CeSign, SourceKind::Logit]);
    let kinds: SourceList = r.get("kinds", a.kinds, default_kinds)?;
    let target: usize = r.get("target", a.target, INNER)?;
    let resolution: usize = r.get("resolution", a.resolution, circles::DEFAULT_RESOLUTION)?;
    r.finish()?;
    if target >= model.num_classes() {
        return Err(CliError::Usage(format!("target {target} out of range")));
    }

    create_dir(&c.out)?;
    for kind in kinds.0 {
        let grid = circles::heatmap(&model, kind, target, resolution)?;
        write_file(&c.out, &format!("heatmap_{}.csv", kind.name()), |w| Ok(grid.write_csv(w)?))?;
        write_file(&c.out, &format!("heatmap_{}.pgm", kind.name()), |w| {
            grid.write_pgm(w).map_err(|e| CliError::Io(e.to_string()))
        })?;
    }
    finish(&r, &c.out)
}

pub fn verify(a: VerifyArgs) -> Outcome {
    let mut r = Resolver::new("verify", a.shared.config.as_deref())?;
    let c = common(&mut r, &a.shared)?;
    let model = load_model(&mut r, a.model)?;
    let data_seed: u64 = r.get("data_seed", a.data_seed, c.seed)?;
    let points: usize = r.get("points", a.points, 2000)?;
    let target: usize = r.get("target", a.target, INNER)?;
    let tau: f64 = r.get("tau", a.tau, DEFAULT_CONFIDENCE)?;
    r.finish()?;
    if points == 0 {
        return Err(CliError::Usage("points must be at least 1".into()));
    }
    if target >= model.num_classes() {
        return Err(CliError::Usage(format!("target {target} out of range")));
    }
    if !(tau > 0.5 && tau < 1.0) {
        return Err(CliError::Usage(format!("tau must lie in (0.5, 1), got {tau}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    let dim = model.input_dim();
    let mut reports = Vec::with_capacity(points);
    let mut saturated = [0usize; 2];
    for _ in 0..points {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(circles::LOWER..circles::UPPER)).collect();
        reports.push(verify_point(&model, &x, target, tau)?);
        for (slot, eps) in [SINGLE_PRECISION_EPSILON, DEFAULT_SIGN_EPSILON].into_iter().enumerate() {
            if verify_sign_saturation(&model, &x, target, eps)? {
                saturated[slot] += 1;
            }
        }
    }
    create_dir(&c.out)?;
    write_file(&c.out, "theorem_report.csv", |w| Ok(write_theorem_report(&reports, w)?))?;
    finish(&r, &c.out)?;

    let count = |s: Subspace| reports.iter().filter(|p| p.subspace == s).count();
    let failures = reports.iter().filter(|p| !p.bound_satisfied()).count();
    println!(
        "{points} points: D1 {}, D2 {}, D3 {}; sign-saturated {} (1e-8) / {} (1e-16); {failures} bound failures",
        count(Subspace::D1),
        count(Subspace::D2),
        count(Subspace::D3),
        saturated[0],
        saturated[1]
    );
    if failures > 0 {
        return Err(CliError::Verification(format!("{failures} of {points} points violate their bound")));
    }
    Ok(())
}

pub fn detector(a: DetectorArgs) -> Outcome {
    let mut r = Resolver::new("detector", a.shared.config.as_deref())?;
    let c = common(&mut r, &a.shared)?;
    let model = load_model(&mut r, a.model)?;
    let params = data_params(&mut r, &a.data, c.seed)?;
    let configs = attack_configs(&mut r, &a.attack)?;
    let train = trainer(&mut r, &a.trainer, c.seed)?;
    let split_seed: u64 = r.get("split_seed", a.split_seed, c.seed)?;
    let fraction: f64 = r.get("train_fraction", a.train_fraction, DEFAULT_TRAIN_FRACTION)?;
    r.finish()?;

    let data = dataset(&params)?;
    let ds = build_detector_dataset(&model, &data.samples, &configs, c.workers, split_seed)?
        .with_train_fraction(fraction)?;
    for kind in &ds.omitted {
        warn!("source {} produced no successful attack and is omitted", kind.name());
    }
    info!(
        "genuine {}, adversarial {}",
        ds.genuine.len(),
        ds.sources()
            .iter()
            .map(|k| format!("{} {}", k.name(), ds.count(*k)))
            .collect::<Vec<_>>()
            .join(", ")
    );
    let mut rows = train_detector(&ds, true, &train)?;
    let pooled = train_detector(&ds, false, &train)?;
    let (overall, breakdown): (Vec<_>, Vec<_>) = pooled.into_iter().partition(|row| row.source.is_none());
    rows.extend(overall);

    create_dir(&c.out)?;
    write_file(&c.out, "detector_report.csv", |w| Ok(write_detector_report(&rows, w)?))?;
    write_file(&c.out, "detector_pooled_breakdown.csv", |w| {
        Ok(write_detector_report(&breakdown, w)?)
    })?;
    finish(&r, &c.out)?;
    for row in &rows {
        println!(
            "{:<8} {:<6} genuine {:.3} / adversarial {:.3} ({:.3})",
            row.source_name(),
            if row.pooled { "pooled" } else { "single" },
            row.acc_genuine,
            row.acc_adversarial,
            row.acc_overall
        );
    }
    Ok(())
}
