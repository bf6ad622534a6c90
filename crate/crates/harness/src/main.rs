use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use memlab_core::grammar::{count_total_data, Grammar};
use memlab_core::{Error, Result};
use memlab_harness::bp_check::validate_bp;
use memlab_harness::config::RunConfig;
use memlab_harness::output::{csv_error, prepare_dir, write_json};
use memlab_harness::report;
use memlab_harness::{run_phase_diagram, run_rhm_training, run_twin_experiment};
use memlab_kernel_lab::{eigen_oracle, fit_powerlaw, sweep_tau_mem, GaussianCloud, KernelSpec, ModeAnsatz};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "memlab", about = "Generalization and memorization in small diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.lr=0.02`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory for config, traces and tables.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds for the individual random streams.
    #[arg(long)]
    seed_grammar: Option<u64>,
    #[arg(long)]
    seed_data: Option<u64>,
    #[arg(long)]
    seed_init: Option<u64>,
    #[arg(long)]
    seed_diffusion: Option<u64>,
    #[arg(long)]
    seed_generation: Option<u64>,
    #[arg(long)]
    seed_probe: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a grammar and print it, its strings or its statistics.
    Grammar {
        #[command(flatten)]
        common: Common,
        #[arg(value_enum, default_value_t = GrammarAction::Build)]
        action: GrammarAction,
    },
    /// Train one denoiser on a sampled training set.
    Train(Common),
    /// Train two models on disjoint sets and track their distance.
    Twin {
        #[command(flatten)]
        common: Common,
        /// Give both models the same training set.
        #[arg(long)]
        identical: bool,
    },
    /// Train across training-set sizes and label every checkpoint.
    PhaseDiagram(Common),
    /// Gaussian-cloud experiments.
    Kernel {
        #[command(subcommand)]
        action: KernelAction,
    },
    /// Compare belief propagation with enumeration.
    BpValidate(Common),
    /// Collect run directories into plot-ready tables.
    Report {
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GrammarAction {
    Build,
    Enumerate,
    Validate,
}

#[derive(Subcommand)]
enum KernelAction {
    /// Memorization time along one axis; grid and settings under `[kernel]`.
    Sweep(Common),
    /// Rayleigh quotient of a localized mode across noise levels and sizes.
    Eigen {
        #[arg(long, value_enum, default_value_t = KernelChoice::Power)]
        kernel: KernelChoice,
        #[arg(long, default_value_t = 1.0)]
        nu: f64,
        #[arg(long, default_value_t = 1.0)]
        coef: f64,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.02,0.05,0.1")]
        sigmas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "16,32,64,128,256")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 1_000_000)]
        n_mc: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelChoice {
    Constant,
    Power,
    Relu,
}

fn load(common: &Common) -> Result<RunConfig> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Format(e.to_string()))?;
    for kv in &common.set {
        let (key, raw) = kv.split_once('=').ok_or_else(|| Error::InvalidArgument(format!("expected KEY=VALUE, got {kv}")))?;
        let value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").unwrap(),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut node = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()))
                .as_table_mut()
                .ok_or_else(|| Error::InvalidArgument(format!("{key}: {part} is not a section")))?;
        }
        node.insert(parts[parts.len() - 1].to_string(), value);
    }
    let mut cfg = RunConfig::from_toml(&toml::to_string(&doc).map_err(|e| Error::Format(e.to_string()))?)?;
    let s = &mut cfg.seeds;
    for (slot, flag) in [
        (&mut s.grammar, common.seed_grammar),
        (&mut s.data, common.seed_data),
        (&mut s.init, common.seed_init),
        (&mut s.diffusion, common.seed_diffusion),
        (&mut s.generation, common.seed_generation),
        (&mut s.probe, common.seed_probe),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if common.out.is_some() {
        cfg.output = common.out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn grammar_cmd(cfg: &RunConfig, action: GrammarAction) -> Result<bool> {
    let g = Grammar::build(cfg.grammar_params())?;
    match action {
        GrammarAction::Build => println!("{}", g.to_json()),
        GrammarAction::Enumerate => {
            for x in g.enumerate(cfg.bp.enumeration_limit)? {
                println!("{}", x.tokens().iter().map(|t| t.to_string()).collect::<Vec<_>>().join(","));
            }
        }
        GrammarAction::Validate => {
            let p = cfg.grammar_params();
            println!("strings {}", count_total_data(&p));
            for l in 1..=p.depth {
                println!("P*_{l} {}", p.sample_complexity(l));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.data);
            let ok = (0..1000).all(|_| g.validate_layers(&g.sample_datum(&mut rng)).iter().all(|&v| v));
            println!("samples_valid {ok}");
            return Ok(ok);
        }
    }
    Ok(true)
}

fn eigen_cmd(
    kernel: KernelSpec,
    dim: usize,
    sigmas: &[f64],
    sizes: &[usize],
    n_mc: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<bool> {
    let largest = sizes.iter().copied().max().unwrap_or(1);
    let points = GaussianCloud::sample(largest, dim, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let cloud = |p: usize, sigma: f64| GaussianCloud::new(dim, points.points()[..p * dim].to_vec(), sigma);
    let mut rows = Vec::new();
    let p0 = sizes.first().copied().unwrap_or(largest);
    for &s in sigmas {
        rows.push(("sigma", s, p0, eigen_oracle(&kernel, &cloud(p0, s)?, &ModeAnsatz::new(0), n_mc, seed)?));
    }
    let s0 = sigmas.first().copied().unwrap_or(0.01);
    for &p in sizes {
        rows.push(("p", s0, p, eigen_oracle(&kernel, &cloud(p, s0)?, &ModeAnsatz::new(0), n_mc, seed)?));
    }
    let mut all_ok = true;
    for axis in ["sigma", "p"] {
        let sel: Vec<_> = rows.iter().filter(|r| r.0 == axis).collect();
        let xs: Vec<f64> = sel.iter().map(|r| if axis == "sigma" { r.1 } else { r.2 as f64 }).collect();
        let ys: Vec<f64> = sel.iter().map(|r| r.3.lambda.abs()).collect();
        match fit_powerlaw(&xs, &ys) {
            Ok(fit) => println!("{axis} slope {:.4} r2 {:.6}", fit.slope, fit.r2),
            Err(e) => println!("{axis} fit unavailable: {e}"),
        }
    }
    for r in &rows {
        println!("{} sigma={} P={} lambda={:.6e} stderr={:.2e}", r.0, r.1, r.2, r.3.lambda, r.3.stderr);
        if let Some(w) = &r.3.warning {
            eprintln!("warning: {w}");
            all_ok = false;
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("eigen.csv")).map_err(csv_error)?;
        w.write_record(["axis", "sigma", "P", "lambda", "stderr"]).map_err(csv_error)?;
        for r in &rows {
            w.write_record([r.0.to_string(), r.1.to_string(), r.2.to_string(), r.3.lambda.to_string(), r.3.stderr.to_string()])
                .map_err(csv_error)?;
        }
        w.flush()?;
    }
    Ok(all_ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Grammar { common, action } => grammar_cmd(&load(&common)?, action),
        Command::Train(common) => {
            let cfg = load(&common)?;
            let trace = run_rhm_training(&cfg, cfg.output.as_deref())?;
            println!("checkpoints {} tau_mem {:?}", trace.checkpoints.len(), trace.tau_mem);
            Ok(true)
        }
        Command::Twin { common, identical } => {
            let cfg = load(&common)?;
            let r = run_twin_experiment(&cfg, identical, cfg.output.as_deref())?;
            println!("tau_mem {:?} {:?}", r.trace_a.tau_mem, r.trace_b.tau_mem);
            match r.before_after() {
                Some((before, after)) => println!("distance before {before:.4} after {after:.4}"),
                None => println!("distance comparison unavailable"),
            }
            Ok(true)
        }
        Command::PhaseDiagram(common) => {
            let cfg = load(&common)?;
            let cells = run_phase_diagram(&cfg, cfg.output.as_deref())?;
            let failed = cells.iter().filter(|c| c.regime.starts_with("failed")).count();
            println!("cells {} failed {failed}", cells.len());
            Ok(failed == 0)
        }
        Command::Kernel { action: KernelAction::Sweep(common) } => {
            let cfg = load(&common)?;
            let table = sweep_tau_mem(&cfg.kernel)?;
            for r in &table.rows {
                println!("{} {:?}", r.value, r.tau_mem);
            }
            if let Some(f) = &table.fit {
                println!("slope {:.4} r2 {:.4}", f.slope, f.r2);
            }
            if let Some(dir) = &cfg.output {
                prepare_dir(dir, &cfg)?;
                report::write_sweep_csv(&dir.join("sweep.csv"), &cfg.hash()?, &table)?;
            }
            Ok(table.rows.iter().all(|r| !r.censored))
        }
        Command::Kernel { action: KernelAction::Eigen { kernel, nu, coef, dim, sigmas, sizes, n_mc, seed, out } } => {
            let spec = match kernel {
                KernelChoice::Constant => KernelSpec::Constant,
                KernelChoice::Power => KernelSpec::PowerLaw { coef, nu },
                KernelChoice::Relu => KernelSpec::ReluNtk,
            };
            eigen_cmd(spec, dim, &sigmas, &sizes, n_mc, seed, out.as_deref())
        }
        Command::BpValidate(common) => {
            let cfg = load(&common)?;
            let r = validate_bp(&cfg)?;
            println!("strings {} levels {} evidences {} max_tv {:.3e} passed {}", r.strings, r.noise_levels.len(), r.evidences, r.max_tv, r.passed);
            if let Some(dir) = &cfg.output {
                prepare_dir(dir, &cfg)?;
                write_json(&dir.join("bp_report.json"), &r)?;
            }
            Ok(r.passed)
        }
        Command::Report { dirs, out } => {
            let rows = report::collect(&dirs)?;
            let path = out.unwrap_or_else(|| PathBuf::from("report.csv"));
            report::write_report(&path, &rows)?;
            println!("{} runs -> {}", rows.len(), path.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
