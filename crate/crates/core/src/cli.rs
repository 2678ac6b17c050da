//! Command-line surface.

use crate::calibration::{fit, FitSpec};
use crate::engine::simulate;
use crate::error::{ModelError, Result};
use crate::io::{
    read_parameter_file, read_target_file, write_csv, write_fit, write_parameter_file,
    write_simulation, ParameterFile,
};
use crate::model::{ScriptEntry, TargetDataset};
use crate::oracle::{compare_outputs, simulate_naive};
use crate::plot::{fit_plots, simulation_plots};
use crate::targets::{synthetic_script, ScriptProfile};
use crate::validate::{validate_dataset, validate_parameters};
use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "greenlab", version, about = "Tree growth simulation and calibration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Synthetic {
    Tree1,
    Tree2,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the growth model and write its outputs.
    Simulate {
        #[arg(long)]
        params: PathBuf,
        /// Target file supplying the trunk script.
        #[arg(long, required_unless_present = "synthetic")]
        target: Option<PathBuf>,
        /// Generate the trunk script instead of reading it.
        #[arg(long, conflicts_with = "target")]
        synthetic: Option<Synthetic>,
        /// Defaults to the script length.
        #[arg(long)]
        cycles: Option<u32>,
        /// Environment index into `v_env`.
        #[arg(long, default_value_t = 0)]
        tree: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plots: bool,
    },
    /// Identify parameters against one or more target files.
    Fit {
        #[arg(long)]
        params: PathBuf,
        #[arg(long, required = true)]
        target: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed of the parameter file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        plots: bool,
    },
    /// Check a parameter file and optional target files.
    Validate {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        target: Vec<PathBuf>,
    },
    /// Run the metamer-by-metamer reference engine and compare.
    Oracle {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        cycles: Option<u32>,
        #[arg(long, default_value_t = 0)]
        tree: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure of a command, mapped to an exit status.
#[derive(Debug)]
pub enum Failure {
    Validation(Vec<String>),
    Runtime(ModelError),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn report(&self) -> String {
        match self {
            Failure::Validation(msgs) => msgs
                .iter()
                .map(|m| format!("error[validation]: {m}"))
                .collect::<Vec<_>>()
                .join("\n"),
            Failure::Runtime(e) => format!("error[runtime]: {e}"),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Parse(msgs) => Failure::Validation(msgs),
            e => Failure::Runtime(e),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn load_params(path: &Path) -> std::result::Result<ParameterFile, Failure> {
    let pf = read_parameter_file(path)?;
    let report = validate_parameters(&pf.params, &pf.zones);
    if !report.is_pass() {
        return Err(Failure::Validation(
            report
                .violations
                .iter()
                .map(|v| format!("{}: {v}", path.display()))
                .collect(),
        ));
    }
    Ok(pf)
}

fn load_targets(paths: &[PathBuf]) -> std::result::Result<Vec<TargetDataset>, Failure> {
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for p in paths {
        match read_target_file(p) {
            Ok(d) => out.push(d),
            Err(ModelError::Parse(msgs)) => errors.extend(msgs),
            Err(e) => return Err(e.into()),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(Failure::Validation(errors))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| ModelError::Io(format!("{}: {e}", dir.display())))
}

/// Executes a parsed command line.
pub fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Simulate {
            params,
            target,
            synthetic,
            cycles,
            tree,
            out,
            plots,
        } => {
            let pf = load_params(&params)?;
            let script: Vec<ScriptEntry> = match (target, synthetic) {
                (Some(t), _) => load_targets(&[t])?.remove(0).trunk_script,
                (None, Some(Synthetic::Tree1)) => {
                    synthetic_script(cycles.unwrap_or(21), &ScriptProfile::tree1_like())
                }
                (None, Some(Synthetic::Tree2)) => {
                    synthetic_script(cycles.unwrap_or(46), &ScriptProfile::tree2_like())
                }
                (None, None) => {
                    return Err(Failure::Validation(vec![
                        "simulate needs --target or --synthetic".into(),
                    ]))
                }
            };
            let n = cycles.unwrap_or(script.len() as u32);
            let output = simulate(&pf.params, &pf.zones, &script, tree, n)?;
            let mut files = write_simulation(&out, &output)?;
            if plots {
                files.extend(simulation_plots(&out, &output)?);
            }
            log::info!("simulated {n} cycles, wrote {} files", files.len());
            Ok(())
        }
        Command::Fit {
            params,
            target,
            out,
            seed,
            plots,
        } => {
            let pf = load_params(&params)?;
            let targets = load_targets(&target)?;
            let mut spec = pf
                .fit
                .clone()
                .unwrap_or_else(|| FitSpec::reference(&pf.params, &pf.zones));
            if let Some(s) = seed {
                spec.seed = s;
            }
            let result = fit(&pf.params, &pf.zones, &targets, &spec)?;
            create_dir(&out)?;
            write_fit(&out, &result)?;
            let (p, z) = result.apply(&pf.params, &pf.zones);
            write_parameter_file(
                &out.join("fitted_params.txt"),
                &ParameterFile {
                    params: p,
                    zones: z,
                    fit: Some(spec),
                },
            )?;
            if plots {
                fit_plots(&out, &result)?;
            }
            log::info!(
                "objective {:.6e} after {} evaluations",
                result.objective,
                result.evaluations
            );
            Ok(())
        }
        Command::Validate { params, target } => {
            let pf = read_parameter_file(&params)?;
            let mut msgs: Vec<String> = validate_parameters(&pf.params, &pf.zones)
                .violations
                .iter()
                .map(|v| format!("{}: {v}", params.display()))
                .collect();
            if let Some(spec) = &pf.fit {
                if let Err(e) = spec.check(&pf.params, &pf.zones) {
                    msgs.push(format!("{}: [fit] {e}", params.display()));
                }
            }
            match load_targets(&target) {
                Ok(ds) => {
                    for (d, path) in ds.iter().zip(&target) {
                        msgs.extend(
                            validate_dataset(d, pf.params.pa_max)
                                .violations
                                .iter()
                                .map(|v| format!("{}: {v}", path.display())),
                        );
                    }
                }
                Err(Failure::Validation(m)) => msgs.extend(m),
                Err(f) => return Err(f),
            }
            if msgs.is_empty() {
                println!("ok");
                Ok(())
            } else {
                Err(Failure::Validation(msgs))
            }
        }
        Command::Oracle {
            params,
            target,
            cycles,
            tree,
            out,
        } => {
            let pf = load_params(&params)?;
            let script = load_targets(&[target])?.remove(0).trunk_script;
            let n = cycles.unwrap_or(script.len() as u32);
            let naive = simulate_naive(&pf.params, &pf.zones, &script, tree, n)?;
            let fact = simulate(&pf.params, &pf.zones, &script, tree, n)?;
            create_dir(&out)?;
            write_csv(&out.join("oracle_trunk.csv"), &naive.trunk)?;
            write_csv(&out.join("oracle_rings.csv"), &naive.rings)?;
            write_csv(&out.join("oracle_branches.csv"), &naive.branches)?;
            let diffs = compare_outputs(&fact, &naive, 1e-9);
            let report = if diffs.is_empty() {
                format!("equal: {n} cycles, {} metamers\n", naive.metamer_count)
            } else {
                diffs.join("\n") + "\n"
            };
            std::fs::write(out.join("comparison.txt"), &report)
                .map_err(|e| ModelError::Io(e.to_string()))?;
            print!("{report}");
            if diffs.is_empty() {
                Ok(())
            } else {
                Err(Failure::Runtime(ModelError::Domain(format!(
                    "{} fields differ from the reference engine",
                    diffs.len()
                ))))
            }
        }
    }
}

/// Entry point shared by the binary.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.report());
            ExitCode::from(f.exit_code())
        }
    }
}
