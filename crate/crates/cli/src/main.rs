use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use rbatem::forward::forward_response;
use rbatem::inversion::{run_inversion, InversionConfig, StopReason};
use rbatem::mesh_assembly::{build_problem, Model, Problem, ProblemSpec};
use rbatem::rba::{fit_common_pole, validate_fit, FitConfig, RationalApproximant, TimeChannels};
use rbatem::regularization::build_reg;
use rbatem::reporting::{report_from_rundir, scaling_benchmark, write_rundir, RunReport};
use rbatem::sensitivity::{adjoint_test, taylor_test, JacobianOperator, TaylorReport};
use rbatem::shifted_solver::{ShiftedFactorCache, SolveCounters, SolverConfig};
use rbatem::synthetic_data::{make_dataset, DataSet, NoiseSpec};

#[derive(Parser)]
#[command(name = "rbatem", version, about = "Transient diffusion forward modelling and inversion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit shared poles and per-channel residues to exp(-t x).
    FitRba {
        /// Channels as `lo:hi:count` in log10 seconds.
        #[arg(long, default_value = "-6:-3:31", allow_hyphen_values = true)]
        times_log10: String,
        #[arg(long, default_value_t = 21)]
        poles: usize,
        /// Upper end of the spectral interval.
        #[arg(long, default_value_t = 1e10)]
        xmax: f64,
        #[arg(long, default_value_t = 50)]
        max_iters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the transient response of a model.
    Forward {
        #[arg(long)]
        problem: PathBuf,
        /// Model JSON; the true model of the problem file when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        approx: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Also write K, M, Q and f in Matrix Market format to this directory.
        #[arg(long)]
        export_matrices: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate noisy observations of a model.
    MakeData {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        approx: PathBuf,
        #[arg(long, default_value_t = 0.03)]
        eps_r: f64,
        /// Absolute noise floor; 1e-6 of the peak datum when omitted.
        #[arg(long)]
        eps_a: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gauss-Newton inversion of a data set.
    Invert {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        approx: PathBuf,
        /// Starting and reference model; the uniform background when omitted.
        #[arg(long)]
        start: Option<PathBuf>,
        #[arg(long)]
        lambda0: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        chi2_target: f64,
        #[arg(long, default_value_t = 30)]
        max_gn: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Try a quadratic-interpolation step before halving.
        #[arg(long)]
        quadratic_step: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Taylor remainder and adjoint tests of the Jacobian.
    Verify {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        approx: PathBuf,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Output directory for verify.json and taylor.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Consolidate the artifacts of a run directory into report.json.
    Report {
        #[arg(long)]
        rundir: PathBuf,
    },
    /// Time factorize-all and solve-all phases per worker count.
    BenchScaling {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        approx: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        workers: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_times(spec: &str) -> Result<TimeChannels> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [lo, hi, n] = parts.as_slice() else {
        bail!("expected lo:hi:count, got {spec:?}");
    };
    Ok(TimeChannels::log_spaced(lo.parse()?, hi.parse()?, n.parse()?)?)
}

struct Loaded {
    spec: ProblemSpec,
    problem: Problem,
}

fn load_problem(path: &Path) -> Result<Loaded> {
    let spec = ProblemSpec::load(path).with_context(|| format!("reading {}", path.display()))?;
    let problem = build_problem(&spec)?;
    Ok(Loaded { spec, problem })
}

fn load_model(loaded: &Loaded, path: Option<&Path>) -> Result<Model> {
    let model = match path {
        Some(p) => Model::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => loaded.spec.true_model(loaded.problem.grid.as_ref().context("problem has no grid")?),
    };
    if model.len() != loaded.problem.parameter_count() {
        bail!(
            "model has {} parameters, the problem has {}",
            model.len(),
            loaded.problem.parameter_count()
        );
    }
    Ok(model)
}

fn load_approx(path: &Path) -> Result<RationalApproximant> {
    RationalApproximant::load(path).with_context(|| format!("reading {}", path.display()))
}

fn cache(workers: usize) -> ShiftedFactorCache {
    ShiftedFactorCache::new(SolverConfig {
        workers,
        ..SolverConfig::default()
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct ForwardFile<'a> {
    times: &'a [f64],
    receivers: &'a [[f64; 2]],
    data: &'a [f64],
    counters: SolveCounters,
}

#[derive(Serialize)]
struct VerifyFile {
    adjoint_trials: usize,
    adjoint_max_mismatch: f64,
    taylor: TaylorReport,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::FitRba {
            times_log10,
            poles,
            xmax,
            max_iters,
            out,
        } => {
            let channels = parse_times(&times_log10)?;
            let cfg = FitConfig {
                max_iters,
                ..FitConfig::default()
            };
            let approx = fit_common_pole(&channels, [0.0, xmax], poles, &cfg)?;
            let audit = validate_fit(&approx, 10_000)?;
            approx.save(&out)?;
            println!(
                "{} poles, {} channels: fit error {:.3e}, audit max {:.3e}, converged {} after {} sweeps",
                approx.pole_count(),
                channels.len(),
                approx.fit_error(),
                audit.max_abs,
                approx.converged,
                approx.iterations
            );
        }
        Command::Forward {
            problem,
            model,
            approx,
            workers,
            export_matrices,
            out,
        } => {
            let loaded = load_problem(&problem)?;
            let model = load_model(&loaded, model.as_deref())?;
            let approx = load_approx(&approx)?;
            if let Some(dir) = export_matrices {
                loaded.problem.export_matrix_market(&model, dir)?;
            }
            let fwd = forward_response(&loaded.problem, &model, &approx, &mut cache(workers), false)?;
            write_json(
                &out,
                &ForwardFile {
                    times: &fwd.times,
                    receivers: &loaded.problem.receivers,
                    data: &fwd.data,
                    counters: fwd.counters,
                },
            )?;
            println!(
                "{} data, {} factorizations, {} solves",
                fwd.data.len(),
                fwd.counters.factorizations,
                fwd.counters.solves
            );
        }
        Command::MakeData {
            problem,
            model,
            approx,
            eps_r,
            eps_a,
            seed,
            workers,
            out,
        } => {
            let loaded = load_problem(&problem)?;
            let model = load_model(&loaded, model.as_deref())?;
            let approx = load_approx(&approx)?;
            let noise = NoiseSpec { eps_r, eps_a, seed };
            let (data, _) = make_dataset(&loaded.problem, &model, &approx, &mut cache(workers), &noise)?;
            data.save(&out)?;
            println!("{} data, eps_r {}, eps_a {:.3e}, seed {seed}", data.len(), data.eps_r, data.eps_a);
        }
        Command::Invert {
            problem,
            data,
            approx,
            start,
            lambda0,
            chi2_target,
            max_gn,
            workers,
            quadratic_step,
            out,
        } => {
            let loaded = load_problem(&problem)?;
            let data = DataSet::load(&data).with_context(|| format!("reading {}", data.display()))?;
            let approx = load_approx(&approx)?;
            let grid = loaded.problem.grid.as_ref().context("problem has no grid")?;
            let start = match start {
                Some(_) => load_model(&loaded, start.as_deref())?,
                None => loaded.spec.background_model(grid),
            };
            let reg = build_reg(grid)?;
            let mut cfg = InversionConfig {
                lambda0,
                chi2_target,
                max_gn,
                ..InversionConfig::default()
            };
            cfg.line_search.quadratic = quadratic_step;
            let mut cache = cache(workers);
            let state = run_inversion(&loaded.problem, &approx, &reg, &data, &start, &mut cache, &cfg)?;
            let report = RunReport::from_state(&state, state.counters, approx.pole_count());
            write_rundir(&out, &data, &state, &report)?;
            state.model.save(out.join("model.json"))?;
            println!(
                "{:?} after {} iterations: chi2 {:.4}, lambda {:.3e}",
                state.status, state.iteration, state.objective.chi2, state.lambda
            );
            if matches!(state.status, StopReason::Failed(_) | StopReason::Diverged(_)) {
                std::process::exit(2);
            }
        }
        Command::Verify {
            problem,
            model,
            approx,
            trials,
            seed,
            workers,
            out,
        } => {
            use rand::SeedableRng;
            use rand_distr::Distribution;
            let loaded = load_problem(&problem)?;
            let model = load_model(&loaded, model.as_deref())?;
            let approx = load_approx(&approx)?;
            let mut cache = cache(workers);
            let fwd = forward_response(&loaded.problem, &model, &approx, &mut cache, false)?;
            let mismatch = {
                let op = JacobianOperator::new(&loaded.problem, &model, &approx, &cache, &fwd.pole_fields)?;
                adjoint_test(&op, trials, seed)?
            };
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let dir: Vec<f64> = (0..model.len())
                .map(|_| rand_distr::StandardNormal.sample(&mut rng))
                .collect();
            let hs = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5];
            let taylor = taylor_test(&loaded.problem, &model, &approx, &dir, &hs, &mut cache)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("taylor.csv"), taylor.to_csv())?;
            println!(
                "adjoint mismatch {mismatch:.3e} over {trials} trials; Taylor slopes e0 {:?}, e1 {:?}",
                taylor.slope0, taylor.slope1
            );
            write_json(
                &out.join("verify.json"),
                &VerifyFile {
                    adjoint_trials: trials,
                    adjoint_max_mismatch: mismatch,
                    taylor,
                },
            )?;
        }
        Command::Report { rundir } => {
            let report = report_from_rundir(&rundir)?;
            report.save(rundir.join("report.json"))?;
            println!(
                "{:?}: {} iterations, chi2 {:.4}, timing a {:?} b {:?} R^2 {:?}",
                report.status,
                report.iterations,
                report.final_chi2,
                report.timing.a,
                report.timing.b,
                report.timing.r2
            );
        }
        Command::BenchScaling {
            problem,
            model,
            approx,
            workers,
            repeats,
            out,
        } => {
            let loaded = load_problem(&problem)?;
            let model = load_model(&loaded, model.as_deref())?;
            let approx = load_approx(&approx)?;
            let rows = scaling_benchmark(&loaded.problem, &model, &approx, &workers, repeats)?;
            println!("workers  factorize_ms  solve_ms  efficiency  checksum");
            for r in &rows {
                println!(
                    "{:7}  {:12.2}  {:8.2}  {:10.3}  {:016x}",
                    r.workers, r.factorize_ms, r.solve_ms, r.efficiency, r.checksum
                );
            }
            write_json(&out, &rows)?;
        }
    }
    Ok(())
}
