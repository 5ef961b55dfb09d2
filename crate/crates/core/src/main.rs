use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde_json::json;

use gammarank::cluster::{assign_bayes, assign_threshold, cluster_summary, ClusterAssignment, UNASSIGNED};
use gammarank::em::{
    em_fit, estimate_shared_params, log_density_matrix, refit_shared_params, unordered_log_density_matrix,
    EmConfig, EstimationConfig, Init, LogDensityMatrix,
};
use gammarank::error::Error;
use gammarank::io::{self, DataMatrix, Delimiter, LayoutInfo, OutputPaths, ReadOptions};
use gammarank::model::{log_density, ObservationModel, SharedParams};
use gammarank::rankprob::{gamma_rank_prob, gamma_rank_prob_mc, log_gamma_rank_prob, GammaRankProblem};
use gammarank::simulator::{simulate, SimulationConfig};
use gammarank::structures::{enumerate_ordered_structures, enumerate_partitions, filter_catalog, parse_structure};
use gammarank::structures::{ExperimentLayout, OrderedStructure};

#[derive(Parser)]
#[command(name = "gammarank", version, about = "Cluster expression rows by ordered mean structures")]
struct Cli {
    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = "GAMMARANK_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List the ordered structures for p groups.
    Catalog {
        #[arg(long)]
        p: usize,
        #[arg(long)]
        no_null: bool,
    },
    /// Probability that independent gammas fall in decreasing order.
    Rankprob {
        /// Comma-separated integer shapes.
        #[arg(long, value_delimiter = ',', required = true)]
        shapes: Vec<f64>,
        /// Comma-separated rates.
        #[arg(long, value_delimiter = ',', required = true)]
        rates: Vec<f64>,
        /// Print the natural log instead.
        #[arg(long)]
        log: bool,
        /// Monte Carlo estimate with this many draws.
        #[arg(long)]
        mc: Option<u64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Log density of one row under one structure.
    Density {
        #[command(flatten)]
        input: InputArgs,
        /// Row id, or 0-based row index.
        #[arg(long)]
        row: String,
        #[arg(long)]
        structure: String,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Estimate (alpha, alpha0, nu0) from gamma-model data.
    EstimateParams {
        #[command(flatten)]
        input: InputArgs,
        /// Largest alpha0 on the grid 1..=max.
        #[arg(long, default_value_t = 20)]
        grid_max: u32,
        #[arg(long, default_value_t = 50)]
        em_iters: usize,
    },
    /// Draw synthetic data from the mixture.
    Simulate(SimulateArgs),
    /// Fit mixing weights and cluster rows.
    Fit(FitArgs),
    /// Cluster rows from a posterior table.
    Assign {
        #[arg(long)]
        posterior: PathBuf,
        #[command(flatten)]
        assign: AssignArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adjusted Rand index between two assignment files.
    Compare { a: PathBuf, b: PathBuf },
}

#[derive(Args)]
struct InputArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    layout: PathBuf,
    /// Read comma-separated input.
    #[arg(long)]
    csv: bool,
    /// Count data (Poisson model; the layout needs library sizes).
    #[arg(long)]
    counts: bool,
    /// Raise gamma-model values below EPS to EPS.
    #[arg(long, value_name = "EPS")]
    floor: Option<f64>,
}

#[derive(Args, Clone, Copy)]
struct ParamArgs {
    #[arg(long)]
    alpha: Option<u32>,
    #[arg(long)]
    alpha0: Option<u32>,
    #[arg(long)]
    nu0: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AssignMode {
    Bayes,
    Threshold,
}

#[derive(Args, Clone, Copy)]
struct AssignArgs {
    #[arg(long, value_enum, default_value = "bayes")]
    mode: AssignMode,
    /// Posterior threshold for threshold mode.
    #[arg(long, default_value_t = 0.5)]
    c: f64,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    p: usize,
    /// Replicates per group.
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long)]
    rows: usize,
    #[arg(long, default_value_t = 10)]
    alpha: u32,
    #[arg(long, default_value_t = 3)]
    alpha0: u32,
    #[arg(long, default_value_t = 32.0)]
    nu0: f64,
    /// Comma-separated weights over the catalog (uniform when omitted).
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    #[arg(long)]
    no_null: bool,
    #[arg(long)]
    counts: bool,
    /// Library size of every sample in count mode.
    #[arg(long, default_value_t = 1.0)]
    library_size: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also write the latent group means.
    #[arg(long)]
    latent: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    params: ParamArgs,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Estimate the shared parameters even when all are given.
    #[arg(long)]
    estimate_params: bool,
    /// Drop structures whose unordered parent never reaches this posterior
    /// in an unordered pre-fit.
    #[arg(long)]
    filter_threshold: Option<f64>,
    #[arg(long)]
    no_null: bool,
    /// Write the posterior matrix.
    #[arg(long)]
    posterior: bool,
    #[command(flatten)]
    assign: AssignArgs,
    /// Alternate EM with an integer search over (alpha, alpha0).
    #[arg(long)]
    refit: bool,
    #[arg(long, default_value_t = 10)]
    refit_cycles: usize,
    /// Random starting weights from this seed (uniform when omitted).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn model_of(counts: bool) -> ObservationModel {
    if counts {
        ObservationModel::Counts
    } else {
        ObservationModel::Gamma
    }
}

fn read_input(input: &InputArgs) -> gammarank::Result<(DataMatrix, ExperimentLayout, LayoutInfo)> {
    let mut opts = ReadOptions::new(model_of(input.counts));
    opts.delimiter = if input.csv { Delimiter::Comma } else { Delimiter::Tab };
    opts.floor = input.floor;
    let matrix = io::read_matrix(&input.data, &opts)?;
    let (layout, info) = io::read_layout(&input.layout, Some(&matrix.sample_ids))?;
    if input.counts && layout.library_sizes().is_none() {
        return Err(Error::Config("--counts needs a library-size column in the layout".into()));
    }
    Ok((matrix, layout, info))
}

fn catalog_for(p: usize, no_null: bool) -> gammarank::Result<Vec<OrderedStructure>> {
    Ok(enumerate_ordered_structures(p)?
        .into_iter()
        .filter(|eta| !(no_null && eta.is_null()))
        .collect())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(4);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(1, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Catalog { p, no_null } => {
            for (i, eta) in catalog_for(p, no_null)?.iter().enumerate() {
                println!("{}\t{}\t{}\t{}", i + 1, eta.num_blocks(), eta, eta.unordered());
            }
        }
        Command::Rankprob {
            shapes,
            rates,
            log,
            mc,
            seed,
        } => {
            let problem = GammaRankProblem::from_real_shapes(&shapes, rates)?;
            match mc {
                Some(n) => {
                    let (p, se) = gamma_rank_prob_mc(&problem, n, seed);
                    if log {
                        println!("{}\t{}", p.ln(), se / p);
                    } else {
                        println!("{p}\t{se}");
                    }
                }
                None if log => println!("{}", log_gamma_rank_prob(&problem)),
                None => println!("{}", gamma_rank_prob(&problem)),
            }
        }
        Command::Density {
            input,
            row,
            structure,
            params,
        } => {
            let (matrix, layout, _) = read_input(&input)?;
            let g = match matrix.row_ids.iter().position(|id| *id == row) {
                Some(g) => g,
                None => row
                    .parse::<usize>()
                    .ok()
                    .filter(|&g| g < matrix.row_ids.len())
                    .ok_or_else(|| Error::invalid(format!("no row {row:?}")))?,
            };
            let eta = parse_structure(&structure, layout.p())?;
            let params = resolve_params(&matrix, &layout, params, model_of(input.counts), false)?.0;
            let x = matrix.values.row(g).to_vec();
            println!("{}", log_density(model_of(input.counts), &x, &eta, &layout, &params)?);
        }
        Command::EstimateParams {
            input,
            grid_max,
            em_iters,
        } => {
            if input.counts {
                return Err(Error::Config("parameter estimation needs gamma-model data".into()).into());
            }
            let (matrix, layout, _) = read_input(&input)?;
            let config = EstimationConfig {
                alpha0_grid: (1..=grid_max).collect(),
                em_iters,
                ..Default::default()
            };
            let est = estimate_shared_params(matrix.values.view(), &layout, &config)?;
            println!("{}", serde_json::to_string_pretty(&est)?);
        }
        Command::Simulate(args) => run_simulate(args)?,
        Command::Fit(args) => run_fit(args)?,
        Command::Assign { posterior, assign, out } => {
            let table = io::read_posterior(&posterior)?;
            let assignment = assign_rows(&table.values, assign)?;
            io::write_assignments(&out, &table.row_ids, &table.structures, &assignment)?;
            eprintln!("{} rows unassigned", assignment.unassigned().len());
        }
        Command::Compare { a, b } => {
            let la = io::read_assignment_labels(&a)?;
            let lb = io::read_assignment_labels(&b)?;
            let by_id: std::collections::HashMap<&str, &str> =
                lb.iter().map(|(id, l)| (id.as_str(), l.as_str())).collect();
            if la.len() != lb.len() || la.iter().any(|(id, _)| !by_id.contains_key(id.as_str())) {
                return Err(Error::invalid("assignment files cover different rows").into());
            }
            let (mut xa, mut xb) = (Vec::new(), Vec::new());
            let mut skipped = 0;
            for (id, l) in &la {
                let m = by_id[id.as_str()];
                if l == UNASSIGNED || m == UNASSIGNED {
                    skipped += 1;
                    continue;
                }
                xa.push(l.as_str());
                xb.push(m);
            }
            let ari = gammarank::cluster::adjusted_rand_index(&xa, &xb)?;
            println!("ari\t{ari}\nrows_compared\t{}\nrows_unassigned\t{skipped}", xa.len());
        }
    }
    Ok(())
}

fn assign_rows(posterior: &Array2<f64>, args: AssignArgs) -> gammarank::Result<ClusterAssignment> {
    match args.mode {
        AssignMode::Bayes => Ok(assign_bayes(posterior.view())),
        AssignMode::Threshold => assign_threshold(posterior.view(), args.c),
    }
}

/// Shared parameters from overrides, estimating whatever is missing (or
/// everything when `force` is set).
fn resolve_params(
    matrix: &DataMatrix,
    layout: &ExperimentLayout,
    args: ParamArgs,
    model: ObservationModel,
    force: bool,
) -> gammarank::Result<(SharedParams<f64>, Option<gammarank::em::ParamEstimate>)> {
    let complete = match model {
        ObservationModel::Gamma => args.alpha.is_some() && args.alpha0.is_some() && args.nu0.is_some(),
        ObservationModel::Counts => args.alpha0.is_some() && args.nu0.is_some(),
    };
    if complete && !force {
        return Ok((SharedParams::new(args.alpha.unwrap_or(1), args.alpha0.expect("set"), args.nu0.expect("set"))?, None));
    }
    if model == ObservationModel::Counts {
        return Err(Error::Config("count model needs --alpha0 and --nu0".into()));
    }
    let est = estimate_shared_params(matrix.values.view(), layout, &EstimationConfig::default())?;
    let params = SharedParams::new(
        args.alpha.unwrap_or(est.params.alpha),
        args.alpha0.unwrap_or(est.params.alpha0),
        args.nu0.unwrap_or(est.params.nu0),
    )?;
    Ok((params, Some(est)))
}

fn run_simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let model = model_of(args.counts);
    let mut layout = ExperimentLayout::balanced(args.p, args.reps)?;
    if args.counts {
        let n = layout.n_samples();
        layout = layout.with_library_sizes(vec![args.library_size; n])?;
    }
    let catalog = catalog_for(args.p, args.no_null)?;
    let weights = args
        .weights
        .clone()
        .unwrap_or_else(|| vec![1.0 / catalog.len() as f64; catalog.len()]);
    let config = SimulationConfig {
        layout: layout.clone(),
        params: SharedParams::new(args.alpha, args.alpha0, args.nu0)?,
        catalog: catalog.clone(),
        weights,
        rows: args.rows,
        seed: args.seed,
        model,
    };
    let sim = simulate(&config)?;
    let row_ids: Vec<String> = (1..=args.rows).map(|g| format!("row{g}")).collect();
    let info = LayoutInfo {
        sample_ids: (1..=layout.n_samples()).map(|i| format!("s{i}")).collect(),
        group_names: (1..=args.p).map(|j| format!("G{j}")).collect(),
    };
    let out = &args.out;
    io::write_matrix(
        &out.join("data.tsv"),
        &DataMatrix {
            row_ids: row_ids.clone(),
            sample_ids: info.sample_ids.clone(),
            values: sim.data,
        },
        Delimiter::Tab,
    )?;
    io::write_layout(&out.join("layout.tsv"), &layout, &info)?;
    let mut truth = String::from("id\tstructure\tcluster\n");
    for (id, &l) in row_ids.iter().zip(&sim.labels) {
        truth.push_str(&format!("{id}\t{}\t{}\n", catalog[l], l + 1));
    }
    io::write_file(&out.join("truth.tsv"), &truth)?;
    if args.latent {
        io::write_matrix(
            &out.join("latent.tsv"),
            &DataMatrix {
                row_ids,
                sample_ids: info.group_names.clone(),
                values: sim.latent_means,
            },
            Delimiter::Tab,
        )?;
    }
    Ok(())
}

fn random_weights(k: usize, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = gammarank::rng::stream(seed, 0);
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn run_fit(args: FitArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let model = model_of(args.input.counts);
    let (matrix, layout, info) = read_input(&args.input)?;
    let (mut params, estimate) = resolve_params(&matrix, &layout, args.params, model, args.estimate_params)?;
    let full_catalog = catalog_for(layout.p(), args.no_null)?;
    let full_size = full_catalog.len();

    let catalog = match args.filter_threshold {
        None => full_catalog,
        Some(t) => {
            if model == ObservationModel::Counts {
                return Err(Error::Config("--filter-threshold uses the gamma unordered pre-fit".into()).into());
            }
            let parents: Vec<_> = enumerate_partitions(layout.p())?
                .into_iter()
                .filter(|u| !(args.no_null && u.num_blocks() == 1))
                .collect();
            let ld = unordered_log_density_matrix(matrix.values.view(), &parents, &layout, &params)?;
            let pre = em_fit(&ld, &Init::Uniform, &EmConfig::default())?;
            let kept = filter_catalog(&full_catalog, &parents, pre.posterior.view(), t)?;
            if kept.is_empty() {
                return Err(Error::Config(format!("--filter-threshold {t} removes every structure")).into());
            }
            kept
        }
    };

    let em_config = EmConfig {
        max_iters: args.iters,
        rel_tol: args.tol,
    };
    let init = match args.seed {
        Some(s) => Init::Weights(random_weights(catalog.len(), s)),
        None => Init::Uniform,
    };
    let (fit, refit_history) = if args.refit {
        let (p, fit, history) =
            refit_shared_params(matrix.values.view(), &catalog, &layout, params, model, &em_config, args.refit_cycles)?;
        params = p;
        (fit, Some(history))
    } else {
        let ld: LogDensityMatrix<f64> = log_density_matrix(matrix.values.view(), &catalog, &layout, &params, model)?;
        (em_fit(&ld, &init, &em_config)?, None)
    };
    let posterior = &fit.posterior;
    let assignment = assign_rows(posterior, args.assign)?;

    let paths = OutputPaths::in_dir(&args.out);
    let texts: Vec<String> = catalog.iter().map(ToString::to_string).collect();
    io::write_weights(&paths.weights, &catalog, &fit.weights)?;
    io::write_trace(&paths.loglik, &fit.loglik_trace)?;
    if args.posterior {
        io::write_posterior(&paths.posterior, &matrix.row_ids, &catalog, posterior)?;
    }
    io::write_assignments(&paths.assignments, &matrix.row_ids, &texts, &assignment)?;
    io::write_profiles(&paths.profiles, &matrix.values, &layout, &info.group_names, &texts, &assignment)?;
    let summary = cluster_summary(&assignment, &catalog);
    let manifest = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config": {
            "data": path_str(&args.input.data),
            "layout": path_str(&args.input.layout),
            "model": model,
            "floor": args.input.floor,
            "iters": args.iters,
            "tol": args.tol,
            "filter_threshold": args.filter_threshold,
            "no_null": args.no_null,
            "assign_mode": match args.assign.mode { AssignMode::Bayes => "bayes", AssignMode::Threshold => "threshold" },
            "c": args.assign.c,
            "refit": args.refit,
            "seed": args.seed,
        },
        "params": params,
        "estimate": estimate,
        "refit_history": refit_history,
        "groups": info.group_names.iter().enumerate().map(|(i, g)| json!({"label": i + 1, "name": g})).collect::<Vec<_>>(),
        "catalog_size": full_size,
        "catalog_size_fitted": catalog.len(),
        "iterations": fit.iterations,
        "converged": fit.converged,
        "loglik": fit.loglik(),
        "unassigned": summary.unassigned,
        "wall_time_seconds": started.elapsed().as_secs_f64(),
    });
    io::write_json(&paths.manifest, &manifest).context("writing manifest")?;
    eprintln!(
        "fitted {} structures over {} rows: loglik {} after {} iterations, {} unassigned",
        catalog.len(),
        matrix.row_ids.len(),
        fit.loglik(),
        fit.iterations,
        summary.unassigned
    );
    Ok(())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}
