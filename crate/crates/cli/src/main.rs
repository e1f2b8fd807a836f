//! `distemb` command-line tool.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use distemb::checkpoint;
use distemb::data::{self, generate_synthetic, split_by_subject, Dataset, SynthSpec};
use distemb::eval::{run_protocol, ModelBackend, ProtocolConfig, Scenario};
use distemb::model::{Method, Representation};
use distemb::selftest;
use distemb::train::{train, trace_csv, TrainConfig, TrainError, TrainState};

#[derive(Parser)]
#[command(name = "distemb", version, about = "Distributional sequence embeddings: synthesis, training, evaluation")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write the best checkpoint plus a loss trace.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trace CSV path (default: `<out>.trace.csv`).
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Continue from this checkpoint's parameters, optimizer state and step.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the config's method.
        #[arg(long)]
        method: Option<Method>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's iteration count.
        #[arg(long)]
        iterations: Option<u64>,
        /// Train only on this fraction of subjects (the rest is held out).
        #[arg(long, requires = "split_seed")]
        train_fraction: Option<f64>,
        #[arg(long)]
        split_seed: Option<u64>,
    },
    /// Run the enrollment protocol and write `<out>.csv` and `<out>.json`.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "v")]
        scenario: Vec<Scenario>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        n: Vec<usize>,
        /// Enrolled-subject fractions (default: per-scenario grid).
        #[arg(long, value_delimiter = ',')]
        enrolled_fraction: Option<Vec<f64>>,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate only the subjects held out by the same split used for training.
        #[arg(long, requires = "split_seed")]
        train_fraction: Option<f64>,
        #[arg(long)]
        split_seed: Option<u64>,
    },
    /// Print the model distance between two sequence files.
    Dist {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Finite-difference check of the training loss gradient on a tiny model.
    Gradcheck {
        #[arg(long, default_value = "quantile-wasserstein")]
        method: Method,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Run the built-in oracle suites.
    Selftest,
}

enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => m,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> Failure {
    Failure::Data(e.to_string())
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::Data(format!("{}: {}", path.display(), e)))
}

fn load_subset(dir: &Path, train_fraction: Option<f64>, split_seed: Option<u64>, take_train: bool) -> Result<Dataset, Failure> {
    let data = Dataset::load(dir).map_err(data_err)?;
    match (train_fraction, split_seed) {
        (Some(f), Some(seed)) => {
            let (train, test) = split_by_subject(&data, f, seed).map_err(data_err)?;
            Ok(if take_train { train } else { test })
        }
        _ => Ok(data),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Synth { spec, out, seed } => {
            let text = fs::read_to_string(&spec).map_err(|e| Failure::Data(format!("{}: {}", spec.display(), e)))?;
            let mut spec = SynthSpec::from_kv(&text).map_err(data_err)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let dataset = generate_synthetic(&spec).map_err(data_err)?;
            dataset.save(&out).map_err(data_err)?;
            println!("wrote {} subjects, {} sequences to {}", dataset.n_subjects(), dataset.n_sequences(), out.display());
            Ok(())
        }
        Command::Train { data, config, out, trace, resume, method, seed, iterations, train_fraction, split_seed } => {
            let dataset = load_subset(&data, train_fraction, split_seed, true)?;
            let dim = dataset.dim().ok_or_else(|| Failure::Data("dataset is empty".into()))?;
            let text = fs::read_to_string(&config).map_err(|e| Failure::Data(format!("{}: {}", config.display(), e)))?;
            let mut cfg = TrainConfig::from_kv(&text, dim).map_err(data_err)?;
            if let Some(m) = method {
                cfg.method = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(i) = iterations {
                cfg.iterations = i;
            }
            cfg.validate().map_err(data_err)?;
            let resume = match resume {
                Some(path) => {
                    let (model, adam) = checkpoint::load(&path).map_err(data_err)?;
                    let adam = adam.ok_or_else(|| Failure::Data(format!("{}: checkpoint has no optimizer state", path.display())))?;
                    Some(TrainState { model, adam })
                }
                None => None,
            };
            let trace_path = trace.unwrap_or_else(|| with_suffix(&out, ".trace.csv"));
            let mut trace_file = fs::File::create(&trace_path).map_err(|e| Failure::Data(format!("{}: {}", trace_path.display(), e)))?;
            trace_file.write_all(trace_csv(&[]).as_bytes()).map_err(data_err)?;
            let mut io_error = None;
            let outcome = train(&dataset, &cfg, resume, |row| {
                let line = trace_csv(std::slice::from_ref(row));
                let body = line.split_once('\n').map_or("", |(_, b)| b);
                if let Err(e) = trace_file.write_all(body.as_bytes()) {
                    io_error.get_or_insert(e);
                }
            })
            .map_err(|e| match e {
                TrainError::NonFiniteGradient(_) | TrainError::NonFiniteLoss(_) | TrainError::Tensor(_) | TrainError::Metric(_) => Failure::Numerical(e.to_string()),
                other => Failure::Data(other.to_string()),
            })?;
            if let Some(e) = io_error {
                return Err(Failure::Data(format!("{}: {}", trace_path.display(), e)));
            }
            checkpoint::save(&out, &outcome.best).map_err(data_err)?;
            if let Some(err) = outcome.error {
                return Err(Failure::Numerical(format!("training stopped: {} (trace kept in {})", err, trace_path.display())));
            }
            let last = outcome.trace.last();
            println!(
                "method {}: {} steps, final loss {}, best validation AUC {}; checkpoint {}",
                cfg.method,
                outcome.best.adam.step,
                last.map_or("n/a".into(), |r| r.loss.to_string()),
                outcome.best_val_auc.map_or("n/a".into(), |a| a.to_string()),
                out.display()
            );
            Ok(())
        }
        Command::Eval { data, checkpoint: ckpt, scenario, n, enrolled_fraction, repeats, seed, out, train_fraction, split_seed } => {
            if n.iter().any(|&v| !(1..=distemb::eval::HELD_OUT).contains(&v)) {
                return Err(Failure::Usage(format!("--n values must lie in 1..={}", distemb::eval::HELD_OUT)));
            }
            let dataset = load_subset(&data, train_fraction, split_seed, false)?;
            let (model, _) = checkpoint::load(&ckpt).map_err(data_err)?;
            let cfg = ProtocolConfig { scenarios: scenario, ns: n, fractions: enrolled_fraction, repeats, seed };
            let report = run_protocol(&dataset, &ModelBackend { model: &model }, &cfg).map_err(data_err)?;
            let csv = with_suffix(&out, ".csv");
            let json = with_suffix(&out, ".json");
            write_file(&csv, report.to_csv().as_bytes())?;
            write_file(&json, (report.to_json() + "\n").as_bytes())?;
            for c in &report.cells {
                println!("{} n={} fraction={}: {} {:.4} ± {:.4}{}", c.scenario, c.n, c.enrolled_fraction, c.metric, c.mean, c.std_error, if c.degenerate { " (degenerate)" } else { "" });
            }
            if report.reduced_holdout {
                println!("note: some subjects had fewer than 6 sequences; fewer were held out");
            }
            Ok(())
        }
        Command::Dist { checkpoint: ckpt, a, b } => {
            let (model, _) = checkpoint::load(&ckpt).map_err(data_err)?;
            let d = model.config().network.input_dim;
            let embed = |path: &Path| -> Result<Representation, Failure> {
                let rec = data::read_sequence(path, d).map_err(data_err)?;
                let input = rec.input().map_err(data_err)?;
                model.represent(&input).map_err(data_err)
            };
            let (ra, rb) = (embed(&a)?, embed(&b)?);
            let dist = ra.distance(&rb, model.config().distance).map_err(|e| Failure::Numerical(e.to_string()))?;
            println!("{}", dist);
            Ok(())
        }
        Command::Gradcheck { method, seed, step } => {
            if !(step > 0.0 && step.is_finite()) {
                return Err(Failure::Usage("--step must be positive".into()));
            }
            let report = selftest::model_grad_check(method, seed, step).map_err(|e| Failure::Numerical(e.to_string()))?;
            println!(
                "{}: max relative error {:.3e} over {} parameters ({} probes rejected near kinks)",
                method, report.max_rel_error, report.checked, report.rejected_probes
            );
            if report.max_rel_error > 1e-4 {
                return Err(Failure::Numerical(format!("gradient check failed: analytic {} vs numeric {}", report.analytic, report.numeric)));
            }
            Ok(())
        }
        Command::Selftest => {
            let results = selftest::run_all();
            for r in &results {
                println!("[{}] {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if results.iter().all(|r| r.passed) {
                Ok(())
            } else {
                Err(Failure::Numerical("self-test failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
