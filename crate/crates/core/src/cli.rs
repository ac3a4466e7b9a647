//! The `shm` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid input or data, 3 numerical failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::classify::{
    classify, evaluate, extract_features, format_confusion, full_study_dataset, study_csv, train_classifier, Pathway,
};
use crate::config::{Method, RunConfig};
use crate::error::{Result, ShmError};
use crate::fem::DamageSpec;
use crate::harness::{
    case_modal, identified_setup, identify_series, online_demo, run_study, simulate_case, study_summary, with_workers,
};
use crate::persist::{load_model, save_model, SavedModel};
use crate::sim::TimeSeries;
use crate::sysid::{extract_modes, one_step_nmse, Predictor};

pub const WORKERS_ENV: &str = "SHM_WORKERS";

#[derive(Parser, Debug)]
#[command(name = "shm", version, about = "Composite cantilever damage workbench")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configuration's master_seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads for the study (default: $SHM_WORKERS, else one per core).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    #[arg(long, global = true, value_name = "ar|mlp")]
    method: Option<Method>,
    #[arg(long, global = true, value_name = "N")]
    window: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    order: Option<usize>,
    #[arg(long, global = true, value_name = "oracle|identified")]
    pathway: Option<Pathway>,
    /// Relative frequency noise for classifier replicates.
    #[arg(long, global = true, value_name = "REL")]
    noise: Option<f64>,
    #[arg(long, global = true, value_name = "N")]
    replicates: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Natural frequencies of one damage case.
    Modes {
        #[arg(long, default_value_t = 0)]
        case: usize,
    },
    /// Simulate the sensor record of one case.
    Simulate {
        #[arg(long, default_value_t = 0)]
        case: usize,
        /// Output CSV (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a predictor to a record and save it.
    Identify {
        #[arg(long, default_value_t = 0)]
        case: usize,
        /// Time-series CSV to fit instead of simulating `--case`.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Channel to fit (default: the first).
        #[arg(long)]
        channel: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Modal frequencies and damping of a saved AR model.
    ExtractModes {
        #[arg(long)]
        model: PathBuf,
    },
    /// All 61 cases: oracle and identified frequencies, classifier metrics.
    Study {
        /// Output directory for the CSVs, summary and report.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip the identified pathway.
        #[arg(long)]
        oracle_only: bool,
    },
    /// Train the damage classifier on the study dataset and save it.
    TrainClassifier {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify one case (or explicit frequencies) with a saved classifier.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, conflicts_with = "freqs")]
        case: Option<usize>,
        /// Four measured frequencies in Hz, comma separated.
        #[arg(long, value_delimiter = ',')]
        freqs: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stream a pristine-then-damaged record through an adapting AR model.
    OnlineDemo {
        /// Damage case after the switch.
        #[arg(long, default_value_t = 41)]
        case: usize,
        /// NLMS step size (default: the configuration's sysid.online_lr).
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 5.0)]
        pre: f64,
        #[arg(long, default_value_t = 20.0)]
        post: f64,
        /// Trailing seconds over which prediction errors are compared (default: all of `--post`).
        #[arg(long)]
        eval: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parse `argv` (program name first), run the command and return the exit code.
pub fn main_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match run(cli, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Commands that draw random numbers refuse to run without a master seed.
fn resolve_config(c: &Common, needs_seed: bool) -> Result<RunConfig> {
    let mut cfg = match (&c.config, c.seed) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, None) if needs_seed => {
            return Err(ShmError::invalid("a master seed is required: pass --config or --seed"))
        }
        (None, _) => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.master_seed = seed;
    }
    if let Some(m) = c.method {
        cfg.sysid.method = m;
    }
    if c.window.is_some() {
        cfg.sysid.window = c.window;
    }
    if c.order.is_some() {
        cfg.sysid.order = c.order;
    }
    if let Some(p) = c.pathway {
        cfg.classifier.pathway = p;
    }
    if let Some(n) = c.noise {
        cfg.classifier.noise_rel = n;
    }
    if let Some(r) = c.replicates {
        cfg.classifier.replicates = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_workers(c: &Common) -> Result<usize> {
    if let Some(n) = c.workers {
        return Ok(n);
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map_err(|_| ShmError::invalid(format!("{WORKERS_ENV}={v:?} is not a worker count"))),
        _ => Ok(0),
    }
}

fn check_case(case: usize) -> Result<DamageSpec> {
    DamageSpec::from_case_id(case)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| ShmError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| ShmError::io("<stdout>", e))
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let needs_seed = !matches!(cli.command, Command::Modes { .. } | Command::ExtractModes { .. } | Command::Classify { .. });
    let cfg = resolve_config(&cli.common, needs_seed)?;
    let workers = resolve_workers(&cli.common)?;
    match cli.command {
        Command::Modes { case } => {
            let spec = check_case(case)?;
            let (_, modal) = case_modal(&cfg, spec.case_id)?;
            let mut text = format!(
                "case {} (severity {}, length {}, start element {})\nmode  omega_rad_s      freq_hz\n",
                spec.case_id, spec.severity, spec.length_elements, spec.start_element
            );
            for (i, (w, f)) in modal.omegas.iter().zip(&modal.freqs_hz).enumerate() {
                text.push_str(&format!("{:4} {:12.6} {:12.6}\n", i + 1, w, f));
            }
            emit(out, &text)
        }
        Command::Simulate { case, out: path } => {
            check_case(case)?;
            let series = simulate_case(&cfg, case)?;
            match path {
                Some(p) => series.write_csv(&p),
                None => emit(out, &series.to_csv()),
            }
        }
        Command::Identify { case, input, channel, out: path } => {
            check_case(case)?;
            let series = match &input {
                Some(p) => TimeSeries::read_csv(p)?,
                None => simulate_case(&cfg, case)?,
            };
            let channel = match channel {
                Some(c) => c,
                None => series.channels[0].name.clone(),
            };
            let values = series.channel(&channel)?.to_vec();
            let (predictor, history) = identify_series(&cfg, &series, &channel)?;
            let mut text = String::new();
            match &predictor {
                Predictor::Ar(ar) => {
                    text.push_str(&format!("ar order {} at {} Hz, residual rms {:.6e}\n", ar.order(), ar.fs, ar.residual_rms));
                    for m in extract_modes(ar)? {
                        text.push_str(&format!("  mode {:10.5} Hz  zeta {:.5}\n", m.freq_hz, m.zeta));
                    }
                }
                Predictor::Mlp(m) => {
                    text.push_str(&format!("mlp {:?}, final training loss {:.6e}\n", m.layer_sizes(), history.last().copied().unwrap_or(f64::NAN)));
                    text.push_str(&format!("one-step nmse {:.6e}\n", one_step_nmse(&predictor, &values)?));
                }
            }
            if let Some(p) = path {
                save_model(&SavedModel::Predictor(predictor), &p)?;
            }
            emit(out, &text)
        }
        Command::ExtractModes { model } => {
            let SavedModel::Predictor(Predictor::Ar(ar)) = load_model(&model)? else {
                return Err(ShmError::invalid(format!("{}: modes can only be extracted from an AR model", model.display())));
            };
            let mut text = String::from("mode      freq_hz       zeta\n");
            for (i, m) in extract_modes(&ar)?.iter().enumerate() {
                text.push_str(&format!("{:4} {:12.6} {:10.6}\n", i + 1, m.freq_hz, m.zeta));
            }
            emit(out, &text)
        }
        Command::Study { out: dir, oracle_only } => {
            let res = with_workers(workers, || run_study(&cfg, !oracle_only))??;
            let summary = study_summary(&res.report);
            if let Some(dir) = dir {
                std::fs::create_dir_all(&dir).map_err(|e| ShmError::io(&dir, e))?;
                write_file(&dir.join("study_oracle.csv"), &study_csv(&res.oracle.rows))?;
                if let Some(ident) = &res.identified {
                    write_file(&dir.join("study_identified.csv"), &study_csv(&ident.rows))?;
                }
                write_file(&dir.join("summary.txt"), &summary)?;
                write_file(&dir.join("report.json"), &to_json(&res.report))?;
            }
            for (stage, secs) in &res.report.timings {
                eprintln!("{stage}: {secs:.2} s");
            }
            emit(out, &summary)
        }
        Command::TrainClassifier { out: path } => {
            let c = &cfg.classifier;
            let setup = identified_setup(&cfg);
            let data = with_workers(workers, || {
                full_study_dataset(
                    &cfg.beam,
                    c.pathway,
                    c.noise_rel,
                    c.replicates,
                    cfg.master_seed,
                    (c.pathway == Pathway::Identified).then_some(&setup),
                )
            })??;
            let (model, history) = train_classifier(&data, &c.hyper)?;
            let metrics = evaluate(&model, &data.rows)?;
            let mut text = format!(
                "trained on {} rows ({} excluded cases), final loss {:.6e}\ndetection accuracy {:.1}%\n",
                data.rows.len(),
                data.exclusions.len(),
                history.last().copied().unwrap_or(f64::NAN),
                100.0 * metrics.detection_accuracy
            );
            text.push_str(&format_confusion("severity", &metrics.severity));
            text.push_str(&format_confusion("location", &metrics.location));
            text.push_str(&format_confusion("length", &metrics.length));
            if let Some(p) = path {
                save_model(&SavedModel::Classifier(model), &p)?;
            }
            emit(out, &text)
        }
        Command::Classify { model, case, freqs, out: path } => {
            let SavedModel::Classifier(clf) = load_model(&model)? else {
                return Err(ShmError::invalid(format!("{}: not a classifier model", model.display())));
            };
            let (_, pristine) = case_modal(&cfg, 0)?;
            let current = match (case, freqs) {
                (_, Some(f)) if f.len() == 4 => f,
                (_, Some(f)) => return Err(ShmError::invalid(format!("--freqs needs 4 values, got {}", f.len()))),
                (Some(id), None) => {
                    check_case(id)?;
                    case_modal(&cfg, id)?.1.freqs_hz
                }
                (None, None) => return Err(ShmError::invalid("classify needs --case or --freqs")),
            };
            let features = extract_features(&pristine.freqs_hz, &current)?;
            let report = classify(&clf, &features)?;
            #[derive(Serialize)]
            struct Out<'a> {
                frequencies_hz: &'a [f64],
                features: [f64; 4],
                start_element: Option<usize>,
                #[serde(flatten)]
                report: &'a crate::classify::DamageReport,
            }
            let json = to_json(&Out {
                frequencies_hz: &current,
                features: features.rel_shifts,
                start_element: report.start_element(),
                report: &report,
            });
            match path {
                Some(p) => write_file(&p, &json),
                None => emit(out, &json),
            }
        }
        Command::OnlineDemo { case, lr, pre, post, eval, out: path } => {
            let damage = check_case(case)?;
            let lr = lr.unwrap_or(cfg.sysid.online_lr);
            let rep = online_demo(&cfg, damage, pre, post, lr, eval.unwrap_or(post))?;
            let f = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x:.5}"));
            let text = format!(
                "f1 fem: pristine {:.5} Hz, damaged {:.5} Hz\nf1 identified: frozen {} Hz, online {} Hz\ngap closed: {}\nfinal {} s one-step mse: frozen {:.6e}, online {:.6e}\n",
                rep.f1_pristine_fem,
                rep.f1_damaged_fem,
                f(rep.f1_frozen),
                f(rep.f1_online),
                rep.gap_closed.map_or("n/a".to_string(), |g| format!("{:.1}%", 100.0 * g)),
                rep.eval_s,
                rep.mse_frozen,
                rep.mse_online
            );
            if let Some(p) = path {
                write_file(&p, &to_json(&rep))?;
            }
            emit(out, &text)
        }
    }
}
