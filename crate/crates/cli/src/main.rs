use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vaelab::datasets::{DatasetKind, GroundTruth};
use vaelab::experiment::csv::{matrix_to_csv, read_samples, Table};
use vaelab::experiment::plot::{self, PlotKind};
use vaelab::experiment::reproduce::{self, PaperTable, Scale};
use vaelab::experiment::verify::Suite;
use vaelab::experiment::{train, ExperimentConfig};
use vaelab::{rng, Error, Result};

/// Exit status when a run hit a non-finite loss.
const EXIT_NUMERICAL: u8 = 3;
/// Exit status when a property suite or table comparison has failures.
const EXIT_CHECKS: u8 = 4;

#[derive(Parser)]
#[command(name = "vaelab", version, about = "Train and probe variational autoencoders on synthetic manifolds")]
struct Cli {
    /// Root directory for outputs.
    #[arg(long, global = true, env = "VAELAB_OUT", default_value = "runs")]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic dataset to CSV, with its generator as a JSON sidecar.
    GenData {
        #[arg(long)]
        kind: DatasetKind,
        #[arg(long)]
        intrinsic: usize,
        #[arg(long)]
        ambient: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV path; defaults to a name under `<out-root>/data`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every seed of a TOML config and write a run directory.
    Train { config: PathBuf },
    /// Run a published table's column sweep and compare.
    Reproduce {
        table: PaperTable,
        /// Ten times the desk-scale step counts.
        #[arg(long)]
        paper_scale: bool,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Zero-based column indices; all columns when omitted.
        #[arg(long, value_delimiter = ',')]
        columns: Option<Vec<usize>>,
    },
    /// Run a property suite (`linear-props`, `nonlinear-props`, `flow-props`, or `all`).
    Verify { suite: String },
    /// Render a CSV output as SVG.
    Plot {
        kind: PlotKind,
        input: PathBuf,
        /// Ground-truth JSON; defaults to `ground_truth.json` or `<input>.json` beside the input.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        /// Intrinsic dimension for `sphere-hist` when no ground truth is at hand.
        #[arg(long)]
        intrinsic: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Outcome {
    Ok,
    Checks,
    Numerical,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Checks) => ExitCode::from(EXIT_CHECKS),
        Ok(Outcome::Numerical) => ExitCode::from(EXIT_NUMERICAL),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_usage() {
        2
    } else if matches!(e, Error::Numerical(_)) {
        EXIT_NUMERICAL
    } else {
        1
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<Outcome> {
    let root = cli.out_root;
    match cli.command {
        Command::GenData {
            kind,
            intrinsic,
            ambient,
            n,
            seed,
            out,
        } => {
            let gt = GroundTruth::build(kind, intrinsic, ambient, seed)?;
            let x = gt.sample(n, rng::derive_seed(seed, 1))?;
            let path = out.unwrap_or_else(|| root.join("data").join(format!("{}-rs{intrinsic}-d{ambient}-n{n}-s{seed}.csv", kind.as_str())));
            write(&path, matrix_to_csv(&x).as_bytes())?;
            let sidecar = path.with_extension("json");
            write(&sidecar, (serde_json::to_string_pretty(&gt)? + "\n").as_bytes())?;
            println!("{}", path.display());
            Ok(Outcome::Ok)
        }
        Command::Train { config } => {
            let text = std::fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
            let cfg = ExperimentConfig::from_toml_str(&text)?;
            let (dir, report) = train(&cfg, &root)?;
            for s in &report.per_seed {
                println!("seed {} {:?} steps {}", s.seed, s.status, s.steps_completed);
            }
            for (k, v) in &report.means {
                println!("  {k:<22} {}", v.map_or("n/a".into(), |v| format!("{v:.6}")));
            }
            println!("{}", dir.display());
            Ok(if report.any_non_finite() { Outcome::Numerical } else { Outcome::Ok })
        }
        Command::Reproduce {
            table,
            paper_scale,
            seeds,
            columns,
        } => {
            let scale = if paper_scale { Scale::Paper } else { Scale::Desk };
            let dir = root.join(format!("reproduce-{}", table.as_str()));
            let cmp = reproduce::reproduce(table, scale, &seeds, columns.as_deref(), Some(&dir))?;
            print!("{}", cmp.to_text());
            println!("{}", dir.display());
            let non_finite = cmp.columns.iter().any(|c| c.report.any_non_finite());
            Ok(if non_finite {
                Outcome::Numerical
            } else if cmp.passed() {
                Outcome::Ok
            } else {
                Outcome::Checks
            })
        }
        Command::Verify { suite } => {
            let suites: Vec<Suite> = if suite == "all" { Suite::ALL.to_vec() } else { vec![suite.parse()?] };
            let mut ok = true;
            for s in suites {
                println!("{}", s.as_str());
                for c in s.run() {
                    ok &= c.pass;
                    println!("  {}", c.line());
                }
            }
            Ok(if ok { Outcome::Ok } else { Outcome::Checks })
        }
        Command::Plot {
            kind,
            input,
            ground_truth,
            intrinsic,
            out,
        } => {
            let svg = match kind {
                PlotKind::LossCurves => plot::loss_curves(&Table::read(&input)?)?,
                PlotKind::SvDecay => plot::sv_decay(&Table::read(&input)?)?,
                PlotKind::SphereHist => {
                    let rs = match intrinsic {
                        Some(r) => r,
                        None => load_ground_truth(&input, ground_truth.as_deref())?.r_star(),
                    };
                    plot::sphere_hist(&read_samples(&input)?, rs)?
                }
                PlotKind::SigmoidScatter => match load_ground_truth(&input, ground_truth.as_deref())? {
                    GroundTruth::Sigmoid(g) => plot::sigmoid_scatter(&read_samples(&input)?, &g.a_star)?,
                    other => return Err(Error::Schema(format!("sigmoid-scatter needs sigmoid ground truth, got {}", other.kind().as_str()))),
                },
            };
            let path = out.unwrap_or_else(|| {
                let stem = input.file_stem().map_or("plot".into(), |s| s.to_string_lossy().into_owned());
                input.with_file_name(format!("{stem}-{}.svg", kind.as_str()))
            });
            plot::write_svg(&path, &svg)?;
            println!("{}", path.display());
            Ok(Outcome::Ok)
        }
    }
}

fn load_ground_truth(input: &Path, given: Option<&Path>) -> Result<GroundTruth> {
    let path = match given {
        Some(p) => p.to_path_buf(),
        None => {
            let beside = input.with_file_name("ground_truth.json");
            if beside.exists() {
                beside
            } else {
                let sidecar = input.with_extension("json");
                if !sidecar.exists() {
                    return Err(Error::Config(format!("no ground truth found for {}; pass --ground-truth", input.display())));
                }
                sidecar
            }
        }
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}
