//! Experiment harness: data synthesis, configuration, and the four
//! subcommands (bounds-check, denoise-train, restore-train,
//! hypergrad-compare). Every subcommand is deterministic given its flags;
//! one seed governs all randomness. Exit codes: 0 success, 1 assertion
//! failure, 2 usage error.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::bilevel::{
    evaluate_psnr, retune_train, BilevelProblem, EstimatorKind, HistoryRow, Optimizer,
    ParamSpace, TauRule, TrainConfig, WaveletDenoiseProblem,
};
use crate::bounds_lab::{neumann_inverse_gap, rate_fit, restart_error_report};
use crate::core::{psnr, Dataset, PriorKind, Shape, Signal};
use crate::error::{Error, Result};
use crate::forward_models::{adjoint, LinearOp};
use crate::hypergrad::{compare_estimators, SquaredError};
use crate::io::{write_csv, write_ppm};
use crate::linalg::spectral_norm;
use crate::models::{QuadraticStep, ScalarStep};
use crate::pnp::{PnpRestoreProblem, WaveletThresholdDenoiser};
use crate::scheme::{optimal_tau, restart_states, restart_t, SchemeSpec};
use crate::synth::{denoising_dataset, restoration_dataset, wavelet_bound_instance};

#[derive(Parser)]
#[command(
    name = "retune",
    version,
    about = "Restarted truncated unrolled schemes: hypergradient estimators, \
             error-bound certification, and desk-scale training experiments"
)]
struct Cli {
    /// Worker threads for batch and instance sweeps (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Plain `key = value` file; explicit flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certify the matrix lemma, the Jacobian-free bound, the restart
    /// contraction, and the restart error bound on random instances.
    BoundsCheck(BoundsCheckArgs),
    /// Learn wavelet prior weights on synthetic channel-noise denoising.
    DenoiseTrain(DenoiseTrainArgs),
    /// Learn (sigma, tau) of the plug-and-play scheme on inpainting or
    /// deblurring.
    RestoreTrain(RestoreTrainArgs),
    /// Print and export every hypergradient estimator side by side.
    HypergradCompare(HypergradCompareArgs),
}

#[derive(Args)]
struct BoundsCheckArgs {
    /// Steps per block.
    #[arg(long)]
    k: Option<usize>,
    /// Largest restart count in the sweep.
    #[arg(long)]
    t_max: Option<usize>,
    /// State dimension of each instance (a square with dyadic side).
    #[arg(long)]
    n: Option<usize>,
    /// Number of random instances.
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PriorFlag {
    /// Weighted bands.
    B,
    /// Weighted bands and channels.
    Bc,
}

#[derive(Args)]
struct DenoiseTrainArgs {
    #[arg(long, value_enum)]
    prior: Option<PriorFlag>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    /// Image side length (dyadic).
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-channel noise standard deviations, comma separated.
    #[arg(long)]
    noise: Option<String>,
    /// Decomposition levels (default 2 below side 64, else 4).
    #[arg(long)]
    levels: Option<usize>,
    /// Directory of clean PPM images replacing the synthetic set.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskFlag {
    Inpaint,
    Deblur,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LearnFlag {
    SigmaTau,
}

#[derive(Args)]
struct RestoreTrainArgs {
    #[arg(long, value_enum)]
    task: Option<TaskFlag>,
    /// Inpainting keep probability (0.1 keeps 10% of the pixels).
    #[arg(long)]
    keep_prob: Option<f64>,
    /// Blur support width in pixels.
    #[arg(long)]
    kernel_width: Option<usize>,
    /// Observation noise standard deviation.
    #[arg(long)]
    noise: Option<f64>,
    /// Which hyperparameters to learn.
    #[arg(long, value_enum)]
    learn: Option<LearnFlag>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelFlag {
    Scalar,
    Quadratic,
    Wavelet,
}

#[derive(Args)]
struct HypergradCompareArgs {
    #[arg(long, value_enum)]
    model: Option<ModelFlag>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    p_neumann: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// State dimension for the quadratic and wavelet models.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parsed `key = value` configuration file.
struct Conf(HashMap<String, String>);

impl Conf {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut map = HashMap::new();
        if let Some(p) = path {
            let text = fs::read_to_string(p)?;
            for line in text.lines() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Usage(format!("bad config line: {line}")))?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Self(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::Usage(format!("config key {key}: cannot parse '{raw}'"))),
        }
    }
}

/// Precedence: explicit flag, then config file, then default.
fn resolve<T: FromStr>(flag: Option<T>, conf: &Conf, key: &str, default: T) -> Result<T> {
    match flag {
        Some(v) => Ok(v),
        None => Ok(conf.get(key)?.unwrap_or(default)),
    }
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.exit_code() == 0 { 0 } else { 2 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(t) = cli.threads {
        // Ignore failure when a pool already exists (tests call run twice).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let conf = match Conf::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let outcome = match cli.command {
        Command::BoundsCheck(a) => bounds_check(a, &conf),
        Command::DenoiseTrain(a) => denoise_train(a, &conf),
        Command::RestoreTrain(a) => restore_train(a, &conf),
        Command::HypergradCompare(a) => hypergrad_compare(a, &conf),
    };
    match outcome {
        Ok(code) => code,
        Err(Error::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Readable label for the i-th prior parameter: scale weights first, then
/// band(-channel) weights.
fn prior_param_name(i: usize, levels: usize, prior: PriorKind, channels: usize) -> String {
    if i < levels {
        return format!("lambda_{}", i + 1);
    }
    let bands = ["H", "V", "D"];
    let j = i - levels;
    match prior {
        PriorKind::Bands => format!("Lambda_{}", bands[j]),
        PriorKind::BandsChannels => {
            format!("Lambda_{}_c{}", bands[j / channels], j % channels)
        }
    }
}

fn bounds_check(args: BoundsCheckArgs, conf: &Conf) -> Result<i32> {
    let k = resolve(args.k, conf, "k", 4)?;
    let t_max = resolve(args.t_max, conf, "t-max", 10)?;
    let n = resolve(args.n, conf, "n", 64)?;
    let instances = resolve(args.instances, conf, "instances", 100)?;
    let seed = resolve(args.seed, conf, "seed", 1)?;
    let out = resolve(args.out, conf, "out", PathBuf::from("report.csv"))?;
    if instances == 0 {
        return Err(Error::Usage("--instances must be at least 1".into()));
    }
    if t_max == 0 || k == 0 {
        return Err(Error::Usage("--k and --t-max must be at least 1".into()));
    }
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n || side < 4 || !side.is_multiple_of(2) {
        return Err(Error::Usage(format!(
            "--n must be a square with an even side of at least 4, got {n}"
        )));
    }

    // Matrix lemma sweep: contractive matrices never violate the Neumann
    // bound.
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..1000 {
        let dim = rng.gen_range(2..=20);
        let omega = rng.gen_range(0.1..0.95);
        let raw = nalgebra::DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0));
        let h = &raw * (omega / spectral_norm(&raw));
        let (lhs, bound) = neumann_inverse_gap(&h)?;
        if lhs > bound + 1e-9 {
            println!("FAIL matrix-lemma trial {trial}: {lhs} > {bound}");
            return Ok(1);
        }
    }
    println!("matrix lemma: 1000 random contractive matrices within bound");

    let ts: Vec<usize> = (1..=t_max).collect();
    struct InstanceOut {
        rows: Vec<Vec<String>>,
        violation: Option<String>,
    }
    let outputs: Vec<InstanceOut> = (0..instances)
        .into_par_iter()
        .map(|i| {
            let inst = wavelet_bound_instance(side, 1, seed.wrapping_add(i as u64));
            let spec = SchemeSpec { step: &inst.step, k, t: 1 };
            let mut violation = None;
            let report = match restart_error_report(
                &spec,
                &inst.theta,
                &inst.loss,
                &inst.x0,
                &ts,
                seed.wrapping_add(7919 * i as u64),
            ) {
                Ok(r) => r,
                Err(e) => {
                    return InstanceOut {
                        rows: Vec::new(),
                        violation: Some(format!("instance {i}: {e}")),
                    }
                }
            };
            // Restart contraction along the trajectory.
            let solve_spec = SchemeSpec { step: &inst.step, k, t: 1 };
            let xhat = crate::scheme::fixed_point_solve(
                &solve_spec,
                &inst.theta,
                &inst.x0,
                1e-12,
            )
            .expect("certified contraction");
            let sweep = SchemeSpec { step: &inst.step, k, t: t_max.max(20) };
            let states = restart_states(&sweep, &inst.x0, &inst.theta);
            let d0: f64 = inst
                .x0
                .iter()
                .zip(&xhat)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            for (t, s) in states.iter().enumerate() {
                let dt: f64 =
                    s.iter().zip(&xhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                let rhs = report.delta_k.powi(t as i32) * d0;
                if dt > rhs + 1e-9 {
                    violation = Some(format!(
                        "instance {i}: restart contraction violated at t={t}: {dt} > {rhs}"
                    ));
                }
            }
            // Jacobian-free bound.
            let b_lemma1 = report.rows[0].term_fixed;
            if report.err_jfb > b_lemma1 + 1e-9 {
                violation = Some(format!(
                    "instance {i}: jfb error {} above bound {b_lemma1}",
                    report.err_jfb
                ));
            }
            // The restart bound dominates inside the asymptotic regime.
            for row in &report.rows {
                if crate::bounds_lab::in_asymptotic_regime(row, report.dist0)
                    && row.err > row.restart_bound + 1e-9
                {
                    violation = Some(format!(
                        "instance {i}: restart bound violated at T={}: {} > {}",
                        row.t, row.err, row.restart_bound
                    ));
                }
            }
            let fit = {
                let errs: Vec<f64> = report.rows.iter().map(|r| r.err_vs_jfb).collect();
                let xs: Vec<f64> = report.rows.iter().map(|r| r.t as f64).collect();
                let positive = errs.iter().all(|&e| e > 1e-300);
                if positive && errs.len() >= 4 {
                    rate_fit(&errs, &xs).ok()
                } else {
                    None
                }
            };
            let (slope, r2) = fit.unwrap_or((f64::NAN, f64::NAN));
            let rows = report
                .rows
                .iter()
                .map(|row| {
                    vec![
                        i.to_string(),
                        k.to_string(),
                        row.t.to_string(),
                        fmt(report.delta_k),
                        fmt(report.err_jfb),
                        fmt(row.err),
                        fmt(row.term_fixed),
                        fmt(row.term_fixed),
                        fmt(row.term_ltheta),
                        fmt(row.term_hessian),
                        fmt(row.residual),
                        fmt(report.l_theta),
                        fmt(slope),
                        fmt(r2),
                    ]
                })
                .collect();
            InstanceOut { rows, violation }
        })
        .collect();

    let mut rows = Vec::new();
    for out_i in &outputs {
        if let Some(v) = &out_i.violation {
            println!("FAIL {v}");
            return Ok(1);
        }
        rows.extend(out_i.rows.iter().cloned());
    }
    write_csv(
        &out,
        &[
            "instance_id",
            "K",
            "T",
            "delta_K",
            "err_jfb",
            "err_retune",
            "bound_lemma1",
            "bound_th2_term1",
            "bound_th2_term2",
            "bound_th2_term3",
            "bound_th2_term4",
            "L_theta_hat",
            "slope",
            "r2",
        ],
        &rows,
    )?;
    println!(
        "bounds-check: {instances} instances, K={k}, T=1..{t_max}, all assertions hold -> {}",
        out.display()
    );
    Ok(0)
}

fn parse_noise(raw: &str) -> Result<Vec<f64>> {
    let v: std::result::Result<Vec<f64>, _> =
        raw.split(',').map(|s| s.trim().parse::<f64>()).collect();
    let v = v.map_err(|_| Error::Usage(format!("bad --noise list: {raw}")))?;
    if v.is_empty() || v.iter().any(|&s| s < 0.0) {
        return Err(Error::Usage("noise levels must be nonnegative".into()));
    }
    Ok(v)
}

fn default_levels(size: usize, flag: Option<usize>) -> usize {
    flag.unwrap_or(if size >= 64 { 4 } else { 2 })
}

fn history_rows(history: &[HistoryRow]) -> Vec<Vec<String>> {
    history
        .iter()
        .map(|r| {
            vec![
                r.outer_step.to_string(),
                fmt(r.train_loss),
                fmt(r.test_psnr_mean),
                fmt(r.delta_k),
            ]
        })
        .collect()
}

const HISTORY_HEADER: [&str; 4] = ["outer_step", "train_loss", "test_psnr_mean", "delta_K"];

fn load_ppm_dir(dir: &Path, shape: Shape) -> Result<Vec<Signal>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "ppm").unwrap_or(false))
        .collect();
    names.sort();
    let mut images = Vec::new();
    for p in names {
        let img = crate::io::read_ppm(&p)?;
        if img.shape != shape {
            return Err(Error::Usage(format!(
                "{} is {}x{}, expected {}x{}",
                p.display(),
                img.shape.height,
                img.shape.width,
                shape.height,
                shape.width
            )));
        }
        images.push(img);
    }
    Ok(images)
}

struct DenoiseData {
    train: Dataset,
    test: Dataset,
}

fn build_denoise_data(
    size: usize,
    n_train: usize,
    n_test: usize,
    sigmas: &[f64],
    seed: u64,
    data_dir: Option<&Path>,
) -> Result<DenoiseData> {
    let shape = Shape::new(size, size, 3);
    match data_dir {
        None => Ok(DenoiseData {
            train: denoising_dataset(shape, n_train, sigmas, seed)?,
            test: denoising_dataset(shape, n_test, sigmas, seed.wrapping_add(0x7e57))?,
        }),
        Some(dir) => {
            use rand::SeedableRng;
            let images = load_ppm_dir(dir, shape)?;
            if images.len() < n_train + n_test {
                return Err(Error::Usage(format!(
                    "{} images in {}, need {}",
                    images.len(),
                    dir.display(),
                    n_train + n_test
                )));
            }
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut make = |imgs: &[Signal], tag: u64| -> Result<Dataset> {
                let pairs = imgs
                    .iter()
                    .map(|c| (c.clone(), crate::synth::add_channel_noise(c, sigmas, &mut rng)))
                    .collect();
                Dataset::new(pairs, seed.wrapping_add(tag))
            };
            Ok(DenoiseData {
                train: make(&images[..n_train], 0)?,
                test: make(&images[n_train..n_train + n_test], 1)?,
            })
        }
    }
}

fn write_gallery<P: BilevelProblem>(
    problem: &P,
    theta: &[f64],
    k: usize,
    t: usize,
    observed: &[Signal],
    out_dir: &Path,
) -> Result<()> {
    for (item, obs) in observed.iter().enumerate().take(problem.n_items().min(4)) {
        let step = problem.step(item, theta)?;
        let spec = SchemeSpec { step, k, t };
        let (_, x) = restart_t(&spec, &problem.x0(item), theta);
        let rec = problem.reconstruct(item, &x, theta);
        write_ppm(&out_dir.join(format!("clean_{item}.ppm")), problem.clean(item))?;
        write_ppm(&out_dir.join(format!("observed_{item}.ppm")), obs)?;
        write_ppm(&out_dir.join(format!("restored_{item}.ppm")), &rec)?;
    }
    Ok(())
}

fn denoise_train(args: DenoiseTrainArgs, conf: &Conf) -> Result<i32> {
    let prior = match args.prior {
        Some(PriorFlag::B) => PriorKind::Bands,
        Some(PriorFlag::Bc) => PriorKind::BandsChannels,
        None => match conf.get::<String>("prior")?.as_deref() {
            Some("b") => PriorKind::Bands,
            Some("bc") | None => PriorKind::BandsChannels,
            Some(other) => return Err(Error::Usage(format!("unknown prior '{other}'"))),
        },
    };
    let k = resolve(args.k, conf, "k", 10)?;
    let t = resolve(args.t, conf, "t", 10)?;
    let size = resolve(args.size, conf, "size", 32)?;
    let n_train = resolve(args.n_train, conf, "n-train", 24)?;
    let n_test = resolve(args.n_test, conf, "n-test", 4)?;
    let epochs = resolve(args.epochs, conf, "epochs", 4)?;
    let batch = resolve(args.batch, conf, "batch", 4)?;
    let eta = resolve(args.eta, conf, "eta", 5e-2)?;
    let seed = resolve(args.seed, conf, "seed", 1)?;
    let noise = parse_noise(&resolve(args.noise, conf, "noise", "0.1,0.25,0.5".to_string())?)?;
    let levels = default_levels(size, args.levels.or(conf.get("levels")?));
    let out_dir = resolve(args.out_dir, conf, "out-dir", PathBuf::from("out_denoise"))?;
    if size % (1 << levels) != 0 {
        return Err(Error::Usage(format!(
            "size {size} is not divisible by 2^{levels}"
        )));
    }
    fs::create_dir_all(&out_dir)?;

    let data = build_denoise_data(size, n_train, n_test, &noise, seed, args.data_dir.as_deref())?;
    // The aggressive stepsize rule is the one the channel-noise experiment
    // runs with; unit weights start the inner problem well conditioned.
    let problem = WaveletDenoiseProblem::new(&data.train, levels, prior, TauRule::Aggressive)?;
    let test_problem = WaveletDenoiseProblem::new(&data.test, levels, prior, TauRule::Aggressive)?;
    let dim = problem.theta_dim();
    let p0 = vec![0.0; dim];
    let cfg = TrainConfig {
        k,
        t,
        eta,
        epochs,
        batch_size: batch,
        optimizer: Optimizer::adam(),
        estimator: EstimatorKind::Retune,
        param_space: ParamSpace::Log,
        seed,
    };
    let (params, history) = retune_train(&cfg, &problem, Some(&test_problem), &p0)?;
    write_csv(&out_dir.join("history.csv"), &HISTORY_HEADER, &history_rows(&history))?;

    let theta: Vec<f64> = params.iter().map(|p| p.exp()).collect();
    let mut param_rows = Vec::new();
    for (i, (&lp, &th)) in params.iter().zip(&theta).enumerate() {
        param_rows.push(vec![prior_param_name(i, levels, prior, 3), fmt(lp), fmt(th)]);
    }
    write_csv(&out_dir.join("params.csv"), &["name", "log_value", "value"], &param_rows)?;

    let noisy_psnr: f64 = data
        .test
        .pairs
        .iter()
        .map(|(c, o)| psnr(o, c, 1.0).unwrap_or(f64::INFINITY))
        .sum::<f64>()
        / data.test.pairs.len() as f64;
    let final_psnr = evaluate_psnr(&test_problem, &theta, k, t)?;
    let observed: Vec<Signal> = data.test.pairs.iter().map(|p| p.1.clone()).collect();
    write_gallery(&test_problem, &theta, k, t, &observed, &out_dir)?;
    println!(
        "denoise-train: K={k} T={t} size={size} levels={levels} steps={} \
         noisy_psnr={noisy_psnr:.3} final_test_psnr={final_psnr:.3} -> {}",
        history.len(),
        out_dir.display()
    );
    Ok(0)
}

fn restore_train(args: RestoreTrainArgs, conf: &Conf) -> Result<i32> {
    let task = match args.task {
        Some(t) => t,
        None => match conf.get::<String>("task")?.as_deref() {
            Some("deblur") => TaskFlag::Deblur,
            Some("inpaint") | None => TaskFlag::Inpaint,
            Some(other) => return Err(Error::Usage(format!("unknown task '{other}'"))),
        },
    };
    let _learn = args.learn.unwrap_or(LearnFlag::SigmaTau);
    let keep_prob = resolve(args.keep_prob, conf, "keep-prob", 0.1)?;
    let kernel_width = resolve(args.kernel_width, conf, "kernel-width", 5)?;
    let noise = resolve(args.noise, conf, "noise", 0.05)?;
    let k = resolve(args.k, conf, "k", 10)?;
    let t = resolve(args.t, conf, "t", 10)?;
    let size = resolve(args.size, conf, "size", 32)?;
    let n_train = resolve(args.n_train, conf, "n-train", 12)?;
    let n_test = resolve(args.n_test, conf, "n-test", 4)?;
    let epochs = resolve(args.epochs, conf, "epochs", 4)?;
    let batch = resolve(args.batch, conf, "batch", 4)?;
    let eta = resolve(args.eta, conf, "eta", 5e-2)?;
    let seed = resolve(args.seed, conf, "seed", 1)?;
    let levels = default_levels(size, args.levels.or(conf.get("levels")?));
    let out_dir = resolve(args.out_dir, conf, "out-dir", PathBuf::from("out_restore"))?;
    if size % (1 << levels) != 0 {
        return Err(Error::Usage(format!(
            "size {size} is not divisible by 2^{levels}"
        )));
    }
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(Error::Usage("keep-prob must be in [0, 1]".into()));
    }
    fs::create_dir_all(&out_dir)?;

    let shape = Shape::new(size, size, 3);
    let op_for = |base: u64| {
        move |i: usize| match task {
            TaskFlag::Inpaint => LinearOp::bernoulli_mask(shape, keep_prob, base + i as u64),
            TaskFlag::Deblur => LinearOp::anisotropic_uniform_blur(3, kernel_width),
        }
    };
    let (train_data, train_ops) =
        restoration_dataset(shape, n_train, op_for(seed.wrapping_mul(31)), noise, seed)?;
    let (test_data, test_ops) = restoration_dataset(
        shape,
        n_test,
        op_for(seed.wrapping_mul(31).wrapping_add(10_000)),
        noise,
        seed.wrapping_add(0x7e57),
    )?;
    let denoiser = WaveletThresholdDenoiser::new(shape, levels, PriorKind::Bands)?;
    let problem = PnpRestoreProblem::new(&train_data.pairs, &train_ops, denoiser.clone())?;
    let test_problem = PnpRestoreProblem::new(&test_data.pairs, &test_ops, denoiser)?;
    let cfg = TrainConfig {
        k,
        t,
        eta,
        epochs,
        batch_size: batch,
        optimizer: Optimizer::adam(),
        estimator: EstimatorKind::Retune,
        param_space: ParamSpace::Log,
        seed,
    };
    let (sigma, tau, history) =
        crate::pnp::learn_sigma_tau(&cfg, &problem, Some(&test_problem), 0.1f64.ln(), 0.0)?;
    write_csv(&out_dir.join("history.csv"), &HISTORY_HEADER, &history_rows(&history))?;
    write_csv(
        &out_dir.join("params.csv"),
        &["name", "log_value", "value"],
        &[
            vec!["sigma".into(), fmt(sigma.ln()), fmt(sigma)],
            vec!["tau".into(), fmt(tau.ln()), fmt(tau)],
        ],
    )?;

    // Baseline: the adjoint-initialized start itself.
    let mut baseline = 0.0;
    for ((clean, observed), op) in test_data.pairs.iter().zip(&test_ops) {
        let x0 = adjoint(op, observed)?;
        baseline += psnr(&x0, clean, 1.0).unwrap_or(f64::INFINITY);
    }
    baseline /= test_data.pairs.len() as f64;
    let theta = [sigma, tau];
    let final_psnr = evaluate_psnr(&test_problem, &theta, k, t)?;
    let observed: Vec<Signal> = test_data.pairs.iter().map(|p| p.1.clone()).collect();
    write_gallery(&test_problem, &theta, k, t, &observed, &out_dir)?;
    println!(
        "restore-train: task={} K={k} T={t} sigma={sigma:.5} tau={tau:.5} \
         baseline_psnr={baseline:.3} final_test_psnr={final_psnr:.3} -> {}",
        match task {
            TaskFlag::Inpaint => "inpaint",
            TaskFlag::Deblur => "deblur",
        },
        out_dir.display()
    );
    Ok(0)
}

fn hypergrad_compare(args: HypergradCompareArgs, conf: &Conf) -> Result<i32> {
    let model = match args.model {
        Some(m) => m,
        None => match conf.get::<String>("model")?.as_deref() {
            Some("quadratic") => ModelFlag::Quadratic,
            Some("wavelet") => ModelFlag::Wavelet,
            Some("scalar") | None => ModelFlag::Scalar,
            Some(other) => return Err(Error::Usage(format!("unknown model '{other}'"))),
        },
    };
    let k = resolve(args.k, conf, "k", 2)?;
    let t = resolve(args.t, conf, "t", 2)?;
    let p_neumann = resolve(args.p_neumann, conf, "p-neumann", 1)?;
    let seed = resolve(args.seed, conf, "seed", 1)?;
    let out = resolve(args.out, conf, "out", PathBuf::from("compare.csv"))?;

    let (mut report, labels) = match model {
        ModelFlag::Scalar => {
            let spec = SchemeSpec::new(ScalarStep { y: 1.0, tau: 0.5 }, k, t);
            let loss = SquaredError { target: vec![0.0] };
            let mut r = compare_estimators(&spec, &[2.0], &loss, &[0.0], p_neumann, 1e-13)?;
            crate::bounds_lab::certify_report(&spec, &[2.0], &loss, &[0.0], &mut r, seed)?;
            (r, vec!["theta".to_string()])
        }
        ModelFlag::Quadratic => {
            let n = resolve(args.n, conf, "n", 6)?;
            if n > crate::diff::DENSE_STATE_LIMIT {
                return Err(Error::Usage(format!(
                    "quadratic model needs n <= {} for the dense equilibrium solve",
                    crate::diff::DENSE_STATE_LIMIT
                )));
            }
            let q = QuadraticStep::random_spd(n, 0.5, 2.0, seed);
            let (mu, l) = q.spectral_bounds();
            let theta = [0.9 * optimal_tau(mu, l)];
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let target: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = SquaredError { target };
            let spec = SchemeSpec::new(q, k, t);
            let x0 = vec![0.0; n];
            let mut r = compare_estimators(&spec, &theta, &loss, &x0, p_neumann, 1e-13)?;
            crate::bounds_lab::certify_report(&spec, &theta, &loss, &x0, &mut r, seed)?;
            (r, vec!["stepsize".to_string()])
        }
        ModelFlag::Wavelet => {
            let n = resolve(args.n, conf, "n", 64)?;
            if n > crate::diff::DENSE_STATE_LIMIT {
                return Err(Error::Usage(format!(
                    "wavelet model needs n <= {} for the dense equilibrium solve",
                    crate::diff::DENSE_STATE_LIMIT
                )));
            }
            let side = (n as f64).sqrt().round() as usize;
            if side * side != n || side < 4 || !side.is_multiple_of(2) {
                return Err(Error::Usage(format!(
                    "--n must be a square with an even side, got {n}"
                )));
            }
            let inst = wavelet_bound_instance(side, 1, seed);
            let spec = SchemeSpec { step: inst.step.clone(), k, t };
            let mut r =
                compare_estimators(&spec, &inst.theta, &inst.loss, &inst.x0, p_neumann, 1e-12)?;
            crate::bounds_lab::certify_report(
                &spec,
                &inst.theta,
                &inst.loss,
                &inst.x0,
                &mut r,
                seed,
            )?;
            let labels: Vec<String> = (0..4)
                .map(|i| prior_param_name(i, 1, PriorKind::Bands, 1))
                .collect();
            (r, labels)
        }
    };

    // Printed table.
    let model_name = match model {
        ModelFlag::Scalar => "scalar",
        ModelFlag::Quadratic => "quadratic",
        ModelFlag::Wavelet => "wavelet",
    };
    println!(
        "model {model_name}  K={k} T={t} P={p_neumann}  delta_K={}",
        report.delta_k.map(fmt).unwrap_or_else(|| "n/a".into())
    );
    println!(
        "{:<12} {:>14} {:>14} {:>14} {:>14} {:>14} {:>14}",
        "param", "theta", "g_deq", "g_neumann", "g_jfb", "g_trunc", "g_retune"
    );
    let deq = report.g_deq.take();
    for i in 0..report.theta.len() {
        println!(
            "{:<12} {:>14.8} {:>14.8} {:>14.8} {:>14.8} {:>14.8} {:>14.8}",
            labels.get(i).cloned().unwrap_or_else(|| format!("theta_{i}")),
            report.theta[i],
            deq.as_ref().map(|g| g.theta_space[i]).unwrap_or(f64::NAN),
            report.g_neumann.theta_space[i],
            report.g_jfb.theta_space[i],
            report.g_trunc.theta_space[i],
            report.g_retune.theta_space[i],
        );
    }
    println!(
        "err_jfb={}  err_retune={}  bound_lemma1={}  bound_th2={}",
        fmt(report.err_jfb),
        fmt(report.err_retune),
        report.bound_jfb.map(fmt).unwrap_or_else(|| "n/a".into()),
        report.bound_retune.map(fmt).unwrap_or_else(|| "n/a".into()),
    );

    let mut rows = Vec::new();
    for i in 0..report.theta.len() {
        rows.push(vec![
            i.to_string(),
            labels.get(i).cloned().unwrap_or_else(|| format!("theta_{i}")),
            fmt(report.theta[i]),
            deq.as_ref().map(|g| fmt(g.theta_space[i])).unwrap_or_else(|| "nan".into()),
            fmt(report.g_neumann.theta_space[i]),
            fmt(report.g_jfb.theta_space[i]),
            fmt(report.g_trunc.theta_space[i]),
            fmt(report.g_retune.theta_space[i]),
            deq.as_ref().map(|g| fmt(g.log_space[i])).unwrap_or_else(|| "nan".into()),
            fmt(report.g_neumann.log_space[i]),
            fmt(report.g_jfb.log_space[i]),
            fmt(report.g_trunc.log_space[i]),
            fmt(report.g_retune.log_space[i]),
            fmt(report.err_jfb),
            fmt(report.err_retune),
            report.bound_jfb.map(fmt).unwrap_or_else(|| "nan".into()),
            report.bound_retune.map(fmt).unwrap_or_else(|| "nan".into()),
            report.delta_k.map(fmt).unwrap_or_else(|| "nan".into()),
            report.p_neumann.to_string(),
        ]);
    }
    write_csv(
        &out,
        &[
            "param_index",
            "param",
            "theta",
            "g_deq",
            "g_neumann",
            "g_jfb",
            "g_trunc",
            "g_retune",
            "g_deq_log",
            "g_neumann_log",
            "g_jfb_log",
            "g_trunc_log",
            "g_retune_log",
            "err_jfb",
            "err_retune",
            "bound_lemma1",
            "bound_theorem2",
            "delta_K",
            "p_neumann",
        ],
        &rows,
    )?;
    println!("wrote {}", out.display());
    Ok(0)
}
