mod config;
mod manifest;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use msnimble::diffabund::{fit_all, run_da, Analysis};
use msnimble::factor::{estimate_factors, select_k, FactorEstimate};
use msnimble::mechanism::MechanismEstimate;
use msnimble::mtgwas::{write_gwas, GenotypeMatrix};
use msnimble::pipeline::{estimate_mechanisms, run_pipeline};
use msnimble::simulate::{
    da_calls, evaluate, generate, impute_minimum, impute_svd, imputed_factor_calls, ols_calls, MethodMetrics, SimConfig, SimDataset,
};
use msnimble::{partition_metabolites, DesignMatrix, ObservedMatrix, SelectionCdf, TableFormat};

use config::{parse_cdf, Overrides, RunConfig};
use manifest::write_manifest;

#[derive(Parser, Debug)]
#[command(name = "msnimble", version, about = "Metabolomics analysis with non-ignorable missing data and latent factors")]
struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate each missing-class metabolite's selection parameters.
    EstimateMechanisms {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate latent factors and their dependence on the design.
    Factors {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        mech: Option<PathBuf>,
        /// Number of factors; parallel analysis chooses it when omitted.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Differential abundance for every analysed metabolite.
    Da {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        mech: Option<PathBuf>,
        #[arg(long)]
        factors: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score-test scan of every (metabolite, SNP) pair.
    Gwas {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        mech: Option<PathBuf>,
        #[arg(long)]
        factors: Option<PathBuf>,
        /// SNP-by-sample allele counts.
        #[arg(long)]
        geno: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulated replicates scored for FDP, power and interval coverage.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', default_value = "msnimble,min-impute,svd-impute")]
        methods: Vec<Method>,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        /// Also write the first replicate's data (Y.tsv, X.tsv, G.tsv, truth.tsv) here.
        #[arg(long)]
        data_out: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fill missing cells with an imputation baseline.
    Impute {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "min")]
        method: ImputeMethod,
        /// Multiple of the observed minimum used by `min`.
        #[arg(long, default_value_t = 1.0)]
        scale_a: f64,
        /// Rank used by `svd`.
        #[arg(long, default_value_t = 10)]
        rank: usize,
        #[arg(long, default_value_t = 100)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Metabolite-by-sample log abundances; empty or NA cells are missing.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Sample-by-covariate design, including any intercept column.
    #[arg(long)]
    design: Option<PathBuf>,
    /// Design columns of interest, comma separated.
    #[arg(long, value_delimiter = ',')]
    interest: Option<Vec<String>>,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    /// Selection CDF: t4, t:<df>, logistic or normal.
    #[arg(long, value_parser = parse_cdf)]
    cdf: Option<SelectionCdf>,
    #[arg(long)]
    quadrature_order: Option<usize>,
    #[arg(long)]
    max_weight: Option<f64>,
    #[arg(long)]
    fisher_max_iter: Option<usize>,
    #[arg(long)]
    fisher_tol: Option<f64>,
    /// q-value cut used when refining Ω̂.
    #[arg(long)]
    q_thresh: Option<f64>,
    #[arg(long)]
    refine_iters: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Method {
    Msnimble,
    /// Minimum imputation, then factors and OLS on the imputed data.
    MinImpute,
    /// Minimum imputation, then OLS on the design alone.
    MinOls,
    /// Iterative SVD imputation, then factors and OLS on the imputed data.
    SvdImpute,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ImputeMethod {
    Min,
    Svd,
}

enum CliError {
    Missing(String),
    Core(msnimble::Error),
}

impl From<msnimble::Error> for CliError {
    fn from(e: msnimble::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

type CliResult<T> = Result<T, CliError>;

fn required<'a>(v: &'a Option<PathBuf>, flag: &str, sub: &str) -> CliResult<&'a Path> {
    v.as_deref().ok_or_else(|| CliError::Missing(format!("--{flag} is required for `{sub}`")))
}

fn overrides(cli: &Cli, model: Option<&ModelArgs>, k: Option<usize>, interest: Option<&Vec<String>>) -> Overrides {
    let d = ModelArgs::default();
    let m = model.unwrap_or(&d);
    Overrides {
        seed: cli.seed,
        threads: cli.threads,
        k,
        interest: interest.cloned(),
        cdf: m.cdf,
        quadrature_order: m.quadrature_order,
        max_weight: m.max_weight,
        fisher_max_iter: m.fisher_max_iter,
        fisher_tol: m.fisher_tol,
        q_thresh: m.q_thresh,
        refine_iters: m.refine_iters,
    }
}

fn header(sub: &str, cfg: &RunConfig) -> Vec<String> {
    vec![format!("msnimble {} {sub}", env!("CARGO_PKG_VERSION")), format!("cdf={} seed={}", cfg.cdf.label(), cfg.seed)]
}

struct Loaded {
    m: ObservedMatrix,
    x: DesignMatrix,
}

fn load_data(data: &DataArgs, cfg: &RunConfig, sub: &str) -> CliResult<Loaded> {
    let input = required(&data.input, "input", sub)?;
    let design = required(&data.design, "design", sub)?;
    let m = ObservedMatrix::load(input, TableFormat::from_path(input))?;
    let x = DesignMatrix::load(design, TableFormat::from_path(design), &cfg.interest, m.sample_ids())?;
    Ok(Loaded { m, x })
}

/// Mechanisms come with their CDF; an explicit `--cdf` must agree with it.
fn load_mech(path: &Path, cfg: &mut RunConfig, flag: Option<SelectionCdf>) -> CliResult<MechanismEstimate> {
    let mech = match flag {
        Some(c) => MechanismEstimate::load_expecting(path, &c)?,
        None => MechanismEstimate::load(path)?,
    };
    cfg.cdf = mech.cdf;
    Ok(mech)
}

fn run(cli: &Cli) -> CliResult<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::EstimateMechanisms { data, model, out } => {
            cfg.apply(&overrides(cli, Some(model), None, data.interest.as_ref()));
            init_threads(&cfg);
            let sub = "estimate-mechanisms";
            let input = required(&data.input, "input", sub)?;
            let out = required(out, "out", sub)?;
            let m = ObservedMatrix::load(input, TableFormat::from_path(input))?;
            let mut inputs = vec![input];
            if let Some(d) = data.design.as_deref() {
                // Checked for sample agreement only; mechanisms do not use covariates.
                DesignMatrix::load(d, TableFormat::from_path(d), &cfg.interest, m.sample_ids())?;
                inputs.push(d);
            }
            let part = partition_metabolites(&m);
            let mech = estimate_mechanisms(&m, &part, &cfg.cdf, &cfg.mechanism)?;
            mech.save(out)?;
            write_manifest(sub, &inputs, &[out], &cfg)?;
        }
        Command::Factors { data, model, mech, k, out } => {
            cfg.apply(&overrides(cli, Some(model), *k, data.interest.as_ref()));
            init_threads(&cfg);
            let sub = "factors";
            let mech_path = required(mech, "mech", sub)?;
            let out = required(out, "out", sub)?;
            let d = load_data(data, &cfg, sub)?;
            let mech = load_mech(mech_path, &mut cfg, model.cdf)?;
            let part = partition_metabolites(&d.m);
            let k = match cfg.k {
                Some(k) => k,
                None => select_k(&d.m, &part, &d.x, &cfg.factor)?,
            };
            cfg.k = Some(k);
            let (fe, _) = estimate_factors(&d.m, &part, &d.x, &mech, k, &cfg.factor)?;
            fe.save(out)?;
            write_manifest(sub, &[data.input.as_deref().unwrap(), data.design.as_deref().unwrap(), mech_path], &[out], &cfg)?;
        }
        Command::Da { data, model, mech, factors, out } => {
            cfg.apply(&overrides(cli, Some(model), None, data.interest.as_ref()));
            init_threads(&cfg);
            let sub = "da";
            let mech_path = required(mech, "mech", sub)?;
            let fac_path = required(factors, "factors", sub)?;
            let out = required(out, "out", sub)?;
            let d = load_data(data, &cfg, sub)?;
            let mech = load_mech(mech_path, &mut cfg, model.cdf)?;
            let fe = FactorEstimate::load(fac_path)?;
            cfg.k = Some(fe.k);
            let part = partition_metabolites(&d.m);
            let table = run_da(&d.m, &part, &d.x, &mech, &fe, &cfg.da)?;
            table.write(out, &header(sub, &cfg))?;
            write_manifest(sub, &[data.input.as_deref().unwrap(), data.design.as_deref().unwrap(), mech_path, fac_path], &[out], &cfg)?;
        }
        Command::Gwas { data, model, mech, factors, geno, out } => {
            cfg.apply(&overrides(cli, Some(model), None, data.interest.as_ref()));
            init_threads(&cfg);
            let sub = "gwas";
            let mech_path = required(mech, "mech", sub)?;
            let fac_path = required(factors, "factors", sub)?;
            let geno_path = required(geno, "geno", sub)?;
            let out = required(out, "out", sub)?;
            let d = load_data(data, &cfg, sub)?;
            let mech = load_mech(mech_path, &mut cfg, model.cdf)?;
            let fe = FactorEstimate::load(fac_path)?;
            cfg.k = Some(fe.k);
            let g = GenotypeMatrix::load(geno_path, TableFormat::from_path(geno_path), d.m.sample_ids())?;
            let part = partition_metabolites(&d.m);
            let an = Analysis::new(&d.m, &part, &d.x, &mech, &fe, cfg.da.quadrature_order)?;
            let fits = fit_all(&an, &d.x, &cfg.da)?;
            let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
            write_gwas(&mut w, &an, &d.x, &fe, &fits, &g, &cfg.gwas, &header(sub, &cfg))?;
            w.flush()?;
            drop(w);
            let inputs = [data.input.as_deref().unwrap(), data.design.as_deref().unwrap(), mech_path, fac_path, geno_path];
            write_manifest(sub, &inputs, &[out], &cfg)?;
        }
        Command::Simulate { model, methods, replicates, k, data_out, out } => {
            cfg.apply(&overrides(cli, Some(model), *k, None));
            if let Some(r) = replicates {
                cfg.simulation.replicates = *r;
            }
            init_threads(&cfg);
            let out = required(out, "out", "simulate")?;
            simulate(&cfg, methods, data_out.as_deref(), out)?;
            let mut inputs = Vec::new();
            if let Some(c) = cli.config.as_deref() {
                inputs.push(c);
            }
            write_manifest("simulate", &inputs, &[out], &cfg)?;
        }
        Command::Impute { input, method, scale_a, rank, max_iter, tol, out } => {
            cfg.apply(&overrides(cli, None, None, None));
            init_threads(&cfg);
            let sub = "impute";
            let input = required(input, "input", sub)?;
            let out = required(out, "out", sub)?;
            let m = ObservedMatrix::load(input, TableFormat::from_path(input))?;
            let filled = match method {
                ImputeMethod::Min => impute_minimum(&m, *scale_a)?,
                ImputeMethod::Svd => svd_impute_observed_rows(&m, *rank, *max_iter, *tol)?,
            };
            let note = match method {
                ImputeMethod::Min => format!("method=min scale_a={scale_a}"),
                ImputeMethod::Svd => format!("method=svd rank={rank}"),
            };
            let mut meta = header(sub, &cfg);
            meta.push(note);
            filled.write(out, TableFormat::from_path(out), &meta)?;
            write_manifest(sub, &[input], &[out], &cfg)?;
        }
    }
    Ok(())
}

fn init_threads(cfg: &RunConfig) {
    if cfg.threads > 0 {
        // Fails only if the pool already exists, in which case it is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
}

/// SVD imputation of the rows with at least one observation; other rows stay missing.
fn svd_impute_observed_rows(m: &ObservedMatrix, rank: usize, max_iter: usize, tol: f64) -> msnimble::Result<ObservedMatrix> {
    let rows: Vec<usize> = (0..m.n_metabolites()).filter(|&g| m.n_observed(g) > 0).collect();
    let imp = impute_svd(&m.select_rows(&rows), rank, max_iter, tol)?.matrix;
    let n = m.n_samples();
    let mut cells: Vec<Option<f64>> = (0..m.n_metabolites()).flat_map(|g| (0..n).map(move |i| (g, i))).map(|(g, i)| m.get(g, i)).collect();
    for (r, &g) in rows.iter().enumerate() {
        for i in 0..n {
            cells[g * n + i] = imp.get(r, i);
        }
    }
    ObservedMatrix::from_cells(cells, m.metabolite_ids().to_vec(), m.sample_ids().to_vec())
}

fn simulate(cfg: &RunConfig, methods: &[Method], data_out: Option<&Path>, out: &Path) -> msnimble::Result<()> {
    let sim = &cfg.simulation;
    let pc = cfg.pipeline();
    let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
    for line in header("simulate", cfg) {
        writeln!(w, "# {line}")?;
    }
    writeln!(w, "replicate\tmethod\tk\tq\tfdp\tpower\tn_rejected\tn_evaluated\tcoverage\tmean_width\tcoverage_top_decile\ttype1_05")?;
    for rep in 0..sim.replicates {
        let design = SimConfig { seed: sim.design.seed + rep as u64, ..sim.design.clone() };
        let d = generate(&design)?;
        if rep == 0 {
            if let Some(dir) = data_out {
                write_sim_data(&d, dir, design.seed)?;
            }
        }
        let r = run_pipeline(&d.observed, &d.design, &pc)?;
        let k = r.factors.k;
        let rows = r.partition.analyzed();
        for &method in methods {
            let calls = match method {
                Method::Msnimble => da_calls(&r.da, &r.partition),
                Method::MinImpute => imputed_factor_calls(&impute_minimum(&d.observed, 1.0)?, &r.partition, &d.design, k, &pc.factor)?,
                Method::MinOls => ols_calls(&impute_minimum(&d.observed, 1.0)?, &rows, &d.design, None)?,
                Method::SvdImpute => {
                    let sub = d.observed.select_rows(&rows);
                    let rank = 10.min(sub.n_metabolites().min(sub.n_samples()) - 1);
                    let imp = impute_svd(&sub, rank, 100, 1e-6)?.matrix;
                    let mut calls = imputed_factor_calls(&imp, &partition_metabolites(&sub), &d.design, k, &pc.factor)?;
                    for c in &mut calls {
                        c.metabolite = rows[c.metabolite];
                    }
                    calls
                }
            };
            let name = method.to_possible_value().expect("no skipped variants").get_name().to_string();
            let mm = evaluate(&d.truth, &r.partition, &name, &calls, &sim.q_thresholds);
            write_metrics(&mut w, rep, k, &mm)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_metrics(w: &mut impl Write, rep: usize, k: usize, m: &MethodMetrics) -> std::io::Result<()> {
    for r in &m.rates {
        writeln!(
            w,
            "{rep}\t{}\t{k}\t{:?}\t{:?}\t{:?}\t{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}",
            m.method, r.q, r.fdp, r.power, r.n_rejected, m.n_evaluated, m.coverage, m.mean_width, m.coverage_top_decile, m.type1_05
        )?;
    }
    Ok(())
}

/// Null genotypes written beside simulated data.
const SIM_DATA_SNPS: usize = 200;

fn write_sim_data(d: &SimDataset, dir: &Path, seed: u64) -> msnimble::Result<()> {
    std::fs::create_dir_all(dir)?;
    d.observed.write(&dir.join("Y.tsv"), TableFormat::Tsv, &[])?;
    d.design.write(&dir.join("X.tsv"), TableFormat::Tsv, d.observed.sample_ids())?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("truth.tsv"))?);
    writeln!(w, "metabolite\tbeta\talpha\tdelta\tmu\tsigma")?;
    for (g, id) in d.observed.metabolite_ids().iter().enumerate() {
        let t = &d.truth;
        writeln!(w, "{id}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}", t.beta[g], t.alpha[g], t.delta[g], t.mu[g], t.sigma[g])?;
    }
    w.flush()?;
    GenotypeMatrix::simulate(SIM_DATA_SNPS, d.observed.n_samples(), 0.05, seed.wrapping_add(1 << 32)).write(&dir.join("G.tsv"), d.observed.sample_ids())?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("USAGE_ERROR: {first}");
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Missing(msg)) => {
            eprintln!("MISSING_INPUT: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Core(e)) => {
            eprintln!("{}: {}", e.class(), e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
