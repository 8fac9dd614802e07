//! Command-line surface: dataset generation, structure search,
//! fixed-structure fitting, transparency checking, and property extraction.

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};
use share::analysis::{
    detect_segments, extract_water_properties, plot_svg, sample_shape, AnalysisError,
    MIN_SEGMENT_WIDTH, PLATEAU_SLOPE_THRESHOLD,
};
use share::closedform;
use share::config::{apply_config, preset, render_config};
use share::data::{self, csv_read, csv_write, format_value, Dataset, WaterConstants};
use share::eval::{load_model, save_model, EvalError};
use share::expr::{canonical_render, structural_metrics, validate_transparent};
use share::gp::{evolve, FrontierReport, SearchConfig};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

const EXIT_INPUT: u8 = 2;
const EXIT_ANALYSIS: u8 = 3;
const EXIT_TRAINING: u8 = 4;

#[derive(Parser)]
#[command(name = "share", about = "Shape arithmetic expression toolkit", version)]
struct Cli {
    /// Worker threads for fitness evaluation (default: machine cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as CSV.
    Gen {
        /// temperature, risk_scores, or eq:<id>
        dataset: String,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        noise_std: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search expression structures with genetic programming.
    Fit {
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// paper-main or paper-appendix
        #[arg(long, default_value = "paper-main")]
        preset: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train shape functions for one fixed structure.
    FitFixed {
        data: PathBuf,
        /// Expression with shape placeholders, e.g. "s1(E/m + s2(t0))".
        expression: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "paper-main")]
        preset: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 3)]
        restarts: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Check closed-form equations for transparent expressibility.
    Check {
        /// Corpus file with `name :: expression` lines; omit with --inline.
        corpus: Option<PathBuf>,
        #[arg(long)]
        inline: Option<String>,
        #[arg(long, default_value_t = 2)]
        max_substitutions: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract water properties from a fitted model's shape curve.
    Extract {
        model: PathBuf,
        /// Training CSV the model was fitted on; fixes the sampling range.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        shape_id: usize,
        #[arg(long, default_value_t = 2000)]
        points: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: String,
    seed: u64,
    input_hashes: Vec<(String, String)>,
    outputs: Vec<String>,
    duration_secs: f64,
}

fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    // write to a temp name first so a crash cannot leave a partial manifest
    let tmp = dir.join("run.json.tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, dir.join("run.json"))
}

struct CliError {
    code: u8,
    msg: String,
}

fn input_err(msg: impl std::fmt::Display) -> CliError {
    CliError { code: EXIT_INPUT, msg: msg.to_string() }
}

impl From<data::DataError> for CliError {
    fn from(e: data::DataError) -> Self {
        input_err(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        input_err(e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let code = match e {
            EvalError::TrainingDiverged
            | EvalError::NonFiniteOutput
            | EvalError::NonFiniteGradient => EXIT_TRAINING,
            _ => EXIT_INPUT,
        };
        CliError { code, msg: e.to_string() }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        let code = match e {
            AnalysisError::PatternMismatch { .. } | AnalysisError::NoSegments => EXIT_ANALYSIS,
            _ => EXIT_INPUT,
        };
        CliError { code, msg: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .ok();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

fn load_search_config(
    preset_name: &str,
    config_path: &Option<PathBuf>,
    seed: Option<u64>,
) -> Result<SearchConfig, CliError> {
    let mut cfg = preset(preset_name).map_err(input_err)?;
    if let Some(path) = config_path {
        let text = std::fs::read_to_string(path)?;
        cfg = apply_config(&text, cfg).map_err(input_err)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.inner.seed = s;
    }
    Ok(cfg)
}

fn run(cmd: Command) -> Result<(), CliError> {
    let start = Instant::now();
    match cmd {
        Command::Gen { dataset, n, seed, noise_std, out } => {
            let generator = data::find_generator(&dataset)?;
            let default_n = match dataset.as_str() {
                "risk_scores" => 200,
                "temperature" => 2000,
                _ => 100,
            };
            let ds = generator.generate(n.unwrap_or(default_n), seed, noise_std)?;
            csv_write(&ds, &out)?;
            if let Some(dir) = out.parent() {
                let manifest = RunManifest {
                    command: format!("gen {dataset}"),
                    config: format!("n = {}\nseed = {seed}\nnoise_std = {noise_std}\n", ds.n_rows()),
                    seed,
                    input_hashes: Vec::new(),
                    outputs: vec![out.display().to_string()],
                    duration_secs: start.elapsed().as_secs_f64(),
                };
                write_manifest(dir, &manifest)?;
            }
            println!("wrote {} rows to {}", ds.n_rows(), out.display());
            Ok(())
        }
        Command::Fit { data, config, preset, seed, out_dir } => {
            let cfg = load_search_config(&preset, &config, seed)?;
            let ds = csv_read(&data)?;
            std::fs::create_dir_all(&out_dir)?;
            let report = evolve(&ds, &cfg).map_err(|e| CliError {
                code: EXIT_TRAINING,
                msg: e.to_string(),
            })?;
            let outputs = write_frontier(&out_dir, &report, &ds)?;
            let manifest = RunManifest {
                command: "fit".into(),
                config: render_config(&cfg),
                seed: cfg.seed,
                input_hashes: vec![(data.display().to_string(), sha256_file(&data)?)],
                outputs,
                duration_secs: start.elapsed().as_secs_f64(),
            };
            write_manifest(&out_dir, &manifest)?;
            println!("frontier rows: {}", report.rows.len());
            Ok(())
        }
        Command::FitFixed { data, expression, config, preset, seed, restarts, out_dir } => {
            let cfg = load_search_config(&preset, &config, seed)?;
            let ds = csv_read(&data)?;
            let parsed = closedform::parse(&expression).map_err(input_err)?;
            let tree = closedform::to_expr_tree(&parsed.node, &ds.column_names)
                .map_err(input_err)?;
            let verdict = validate_transparent(&tree);
            if !verdict.is_transparent {
                let list = verdict
                    .violations
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join("; ");
                return Err(input_err(format!("expression fails validation: {list}")));
            }
            std::fs::create_dir_all(&out_dir)?;
            let (x_train, y_train) = ds.subset(&ds.train);
            let (x_val, y_val) = ds.subset(&ds.validation);
            let (fitted, rep) = share::eval::train_restarts(
                &tree, &x_train, &y_train, &x_val, &y_val, &cfg.inner, restarts,
            )?;
            let model_path = out_dir.join("model.json");
            save_model(&fitted, &model_path)?;
            let metrics = format!(
                "expression,{}\nval_r2,{}\nval_mse,{}\nchosen_lr,{}\nepochs_run,{}\n",
                canonical_render(&tree),
                format_value(rep.val_r2),
                format_value(rep.val_mse),
                rep.chosen_lr,
                rep.epochs_run,
            );
            std::fs::write(out_dir.join("metrics.csv"), &metrics)?;
            let mut outputs = vec![
                model_path.display().to_string(),
                out_dir.join("metrics.csv").display().to_string(),
            ];
            outputs.extend(write_shape_plots(&out_dir, "model", &fitted, &x_train)?);
            let manifest = RunManifest {
                command: format!("fit-fixed {expression}"),
                config: render_config(&cfg),
                seed: cfg.inner.seed,
                input_hashes: vec![(data.display().to_string(), sha256_file(&data)?)],
                outputs,
                duration_secs: start.elapsed().as_secs_f64(),
            };
            write_manifest(&out_dir, &manifest)?;
            println!("val_r2 = {:.6}", rep.val_r2);
            Ok(())
        }
        Command::Check { corpus, inline, max_substitutions, out } => {
            let lines: Vec<(String, String)> = match (&corpus, &inline) {
                (_, Some(expr)) => vec![("inline".to_string(), expr.clone())],
                (Some(path), None) => {
                    let text = std::fs::read_to_string(path)?;
                    parse_corpus(&text)
                }
                (None, None) => data::bundled_corpus(),
            };
            let census = closedform::census(&lines, max_substitutions);
            let csv = closedform::census_csv(&census);
            match out {
                Some(path) => std::fs::write(path, &csv)?,
                None => print!("{csv}"),
            }
            eprintln!(
                "{} equations: {} direct, {} after rewrites",
                census.n_total, census.n_direct, census.n_after_rewrites
            );
            Ok(())
        }
        Command::Extract { model, data, shape_id, points, out } => {
            let m = load_model(&model)?;
            let ds = csv_read(&data)?;
            let (x_train, _) = ds.subset(&ds.train);
            let trace = sample_shape(&m, shape_id, points, &x_train)?;
            let dec = detect_segments(&trace, PLATEAU_SLOPE_THRESHOLD, MIN_SEGMENT_WIDTH)?;
            let est = extract_water_properties(&dec)?;
            let truth = WaterConstants::default();
            let mut report = String::from("property,estimate,ground_truth,relative_error\n");
            for (name, got, want) in [
                ("c_ice", est.c_ice, truth.c_ice),
                ("c_water", est.c_water, truth.c_water),
                ("c_steam", est.c_steam, truth.c_steam),
                ("l_fusion", est.l_fusion, truth.l_fusion),
                ("l_vapor", est.l_vapor, truth.l_vapor),
            ] {
                report.push_str(&format!(
                    "{name},{},{},{}\n",
                    format_value(got),
                    format_value(want),
                    format_value((got - want).abs() / want),
                ));
            }
            std::fs::write(&out, report)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn parse_corpus(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|l| match l.split_once("::") {
            Some((name, expr)) => (name.trim().to_string(), expr.trim().to_string()),
            None => (l.trim().to_string(), l.trim().to_string()),
        })
        .collect()
}

fn write_frontier(
    out_dir: &Path,
    report: &FrontierReport,
    ds: &Dataset,
) -> Result<Vec<String>, CliError> {
    let mut outputs = Vec::new();
    let mut csv = String::from("shape_count,expression,val_r2,val_mse,size,depth\n");
    let (x_train, _) = ds.subset(&ds.train);
    for (count, program) in &report.rows {
        let m = structural_metrics(&program.tree);
        csv.push_str(&format!(
            "{count},\"{}\",{},{},{},{}\n",
            program.canonical_key,
            format_value(program.val_r2),
            format_value(program.val_mse),
            m.size,
            m.depth,
        ));
        let model_path = out_dir.join(format!("model_{count}shapes.json"));
        save_model(&program.fitted, &model_path)?;
        outputs.push(model_path.display().to_string());
        let tag = format!("model_{count}shapes");
        outputs.extend(write_shape_plots(out_dir, &tag, &program.fitted, &x_train)?);
    }
    let frontier_path = out_dir.join("frontier.csv");
    std::fs::write(&frontier_path, csv)?;
    outputs.push(frontier_path.display().to_string());
    Ok(outputs)
}

fn write_shape_plots(
    out_dir: &Path,
    tag: &str,
    model: &share::eval::CompiledModel,
    x_train: &[Vec<f64>],
) -> Result<Vec<String>, CliError> {
    if model.n_shapes() == 0 {
        return Ok(Vec::new());
    }
    let mut traces = Vec::new();
    let mut labels = Vec::new();
    for id in 0..model.n_shapes() {
        traces.push(sample_shape(model, id, 400, x_train)?);
        labels.push(format!("s{}", id + 1));
    }
    let path = out_dir.join(format!("{tag}_shapes.svg"));
    plot_svg(&traces, &labels, &path)?;
    Ok(vec![path.display().to_string()])
}
