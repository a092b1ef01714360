//! Command-line front end.
//!
//! Every subcommand reads a JSON scenario config, writes `results.csv` (or a
//! dataset/checkpoint) plus a `manifest.json` carrying the config hash, seed,
//! and git describe string into `--out`. Reruns with identical arguments
//! produce byte-identical outputs.

use crate::channel::{generate_dataset, generate_channel_set, load_channel_dataset, MultiUserChannel};
use crate::config::{load_config, SystemConfig};
use crate::digital::DigitalScheme;
use crate::dnn::{load_checkpoint, meta_for, save_checkpoint, train, SuDnnModel, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_variants, mean_sum_rate, weighted_round_sim, EvalOptions, RateReport, RunManifest,
    Scheme, SchemeSpec, UnitGain,
};
use clap::{Parser, Subcommand, ValueEnum};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "beamlab", version, about = "TDD massive-MIMO hybrid precoding laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DigitalArg {
    Zf,
    Wmmse,
}

impl From<DigitalArg> for DigitalScheme {
    fn from(d: DigitalArg) -> Self {
        match d {
            DigitalArg::Zf => DigitalScheme::Zf,
            DigitalArg::Wmmse => DigitalScheme::Wmmse,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a channel dataset file.
    GenChannels {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the per-user analog precoding network.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Training hyperparameter profile.
        #[arg(long, value_enum, default_value = "desk")]
        profile: ProfileArg,
        /// Single-user training samples (realizations are ceil(n/K)).
        #[arg(long, default_value_t = 20_000)]
        train_samples: usize,
        #[arg(long, default_value_t = 1_000)]
        val_samples: usize,
        /// Optional pre-generated dataset; defaults to on-the-fly generation.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Override the number of training epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Monte-Carlo rate evaluation of one scheme.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trials: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "perfect_csi")]
        scheme: String,
        /// Checkpoint directory (required for --scheme proposed).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "zf")]
        digital: DigitalArg,
        /// Sweep one config axis: AXIS=lo:hi:step with AXIS in
        /// {L, L_a, SNR_DL, SNR_UL, L_p, K, Q}.
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Train one model per pilot split and tabulate mean rates.
    SweepPilots {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trials: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "desk")]
        profile: ProfileArg,
        #[arg(long, default_value_t = 20_000)]
        train_samples: usize,
        #[arg(long, default_value_t = 1_000)]
        val_samples: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum, default_value = "zf")]
        digital: DigitalArg,
    },
    /// Weighted-rate fairness simulation over a user population.
    Fairness {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        rounds: usize,
        #[arg(long)]
        population: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "wmmse")]
        digital: DigitalArg,
    },
    /// Evaluate one model at several phase-shifter resolutions (0 = infinite).
    QuantizeEval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        trials: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "0,8,4", value_delimiter = ',')]
        levels: Vec<u32>,
        #[arg(long, value_enum, default_value = "zf")]
        digital: DigitalArg,
    },
}

/// Entry point used by the binary; returns the process exit code.
/// Usage errors exit 2, module errors exit 1.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config_with_seed(path: &Path, seed: Option<u64>) -> Result<SystemConfig> {
    let mut cfg = load_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn train_profile(profile: ProfileArg, epochs: Option<usize>) -> TrainConfig {
    let mut tc = match profile {
        ProfileArg::Desk => TrainConfig::desk(),
        ProfileArg::Paper => TrainConfig::paper(),
    };
    if let Some(e) = epochs {
        tc.epochs = e;
    }
    tc
}

fn realizations_for(samples: usize, k: usize) -> usize {
    samples.div_ceil(k).max(1)
}

/// Train/validation realizations, either loaded from a dataset file or
/// generated from the config seed.
fn training_sets(
    cfg: &SystemConfig,
    dataset: Option<&Path>,
    train_samples: usize,
    val_samples: usize,
) -> Result<(Vec<MultiUserChannel>, Vec<MultiUserChannel>)> {
    let train_r = realizations_for(train_samples, cfg.k);
    let val_r = realizations_for(val_samples, cfg.k);
    let set = match dataset {
        Some(path) => {
            let (header, set) = load_channel_dataset(path)?;
            if header.config.m() != cfg.m() || header.config.n_c != cfg.n_c {
                return Err(Error::DimMismatch(
                    "dataset geometry does not match the config".into(),
                ));
            }
            set
        }
        None => generate_channel_set(cfg, train_r + val_r, cfg.seed),
    };
    if set.len() < train_r + val_r {
        return Err(Error::Invalid(format!(
            "dataset holds {} realizations, need {}",
            set.len(),
            train_r + val_r
        )));
    }
    let mut set = set;
    let val = set.split_off(set.len() - val_r);
    set.truncate(train_r);
    Ok((set, val))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn write_rate_rows(
    w: &mut csv::Writer<std::fs::File>,
    cfg: &SystemConfig,
    axis: &str,
    value: &str,
    scheme: &str,
    digital: DigitalScheme,
    reports: &[RateReport],
) -> Result<()> {
    let digital = match digital {
        DigitalScheme::Zf => "zf",
        DigitalScheme::Wmmse => "wmmse",
    };
    let fail = |e: csv::Error| Error::Format(e.to_string());
    for (t, rep) in reports.iter().enumerate() {
        let mut row = vec![
            axis.to_string(),
            value.to_string(),
            t.to_string(),
            scheme.to_string(),
            digital.to_string(),
            rep.sum.to_string(),
        ];
        row.extend(rep.per_user.iter().map(|r| r.to_string()));
        w.write_record(&row).map_err(fail)?;
    }
    // summary: mean over trials, then the standard deviation of the sum rate
    let mean = mean_sum_rate(reports);
    let mut mean_row = vec![
        axis.to_string(),
        value.to_string(),
        "mean".to_string(),
        scheme.to_string(),
        digital.to_string(),
        mean.to_string(),
    ];
    for u in 0..cfg.k {
        let m = reports.iter().map(|r| r.per_user[u]).sum::<f64>() / reports.len() as f64;
        mean_row.push(m.to_string());
    }
    w.write_record(&mean_row).map_err(fail)?;
    let std = if reports.len() > 1 {
        let var = reports
            .iter()
            .map(|r| (r.sum - mean) * (r.sum - mean))
            .sum::<f64>()
            / (reports.len() - 1) as f64;
        var.sqrt()
    } else {
        0.0
    };
    let mut std_row = vec![
        axis.to_string(),
        value.to_string(),
        "std".to_string(),
        scheme.to_string(),
        digital.to_string(),
        std.to_string(),
    ];
    std_row.extend(std::iter::repeat_n(String::new(), cfg.k));
    w.write_record(&std_row).map_err(fail)?;
    Ok(())
}

fn rate_header(cfg: &SystemConfig) -> Vec<String> {
    let mut h = vec![
        "sweep_axis".to_string(),
        "sweep_value".to_string(),
        "trial".to_string(),
        "scheme".to_string(),
        "digital".to_string(),
        "sum_rate".to_string(),
    ];
    for u in 0..cfg.k {
        h.push(format!("user_rate_{u}"));
    }
    h
}

/// Parse "AXIS=lo:hi:step" into per-point configs.
fn sweep_points(cfg: &SystemConfig, spec: &str) -> Result<Vec<(String, f64, SystemConfig)>> {
    let (axis, range) = spec
        .split_once('=')
        .ok_or_else(|| Error::Invalid(format!("sweep {spec:?} is not AXIS=lo:hi:step")))?;
    let parts: Vec<&str> = range.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Invalid(format!("sweep {spec:?} is not AXIS=lo:hi:step")));
    }
    let lo: f64 = parts[0].parse().map_err(|_| Error::Invalid(format!("bad sweep bound {}", parts[0])))?;
    let hi: f64 = parts[1].parse().map_err(|_| Error::Invalid(format!("bad sweep bound {}", parts[1])))?;
    let step: f64 = parts[2].parse().map_err(|_| Error::Invalid(format!("bad sweep step {}", parts[2])))?;
    if !(step > 0.0) || hi < lo {
        return Err(Error::Invalid("sweep needs lo <= hi and step > 0".into()));
    }
    let mut out = Vec::new();
    let mut v = lo;
    while v <= hi + 1e-9 {
        out.push((axis.to_string(), v, apply_axis(cfg, axis, v)?));
        v += step;
    }
    Ok(out)
}

fn apply_axis(cfg: &SystemConfig, axis: &str, value: f64) -> Result<SystemConfig> {
    let mut c = cfg.clone();
    let as_usize = |v: f64| -> Result<usize> {
        if (v - v.round()).abs() > 1e-9 || v < 0.0 {
            return Err(Error::Invalid(format!("axis {axis} needs a non-negative integer, got {v}")));
        }
        Ok(v.round() as usize)
    };
    match axis {
        "L" => {
            let l = as_usize(value)?;
            if l <= c.l_d {
                return Err(Error::Invalid(format!("L = {l} leaves no analog frames (L_d = {})", c.l_d)));
            }
            c.l = l;
            c.l_a = l - c.l_d;
        }
        "L_a" => {
            let l_a = as_usize(value)?;
            if l_a >= c.l {
                return Err(Error::Invalid(format!("L_a = {l_a} leaves no digital frames (L = {})", c.l)));
            }
            c.l_a = l_a;
            c.l_d = c.l - l_a;
        }
        "SNR_DL" => c.set_snr_dl_db(value),
        "SNR_UL" => c.set_snr_ul_db(value),
        "L_p" => c.l_p = as_usize(value)?.max(1),
        "K" => c.k = as_usize(value)?.max(1),
        "Q" => c.q = as_usize(value)? as u32,
        other => return Err(Error::Invalid(format!("unknown sweep axis {other:?}"))),
    }
    c.validate()?;
    Ok(c)
}

fn load_model(dir: &Path) -> Result<SuDnnModel> {
    Ok(load_checkpoint(dir)?.0)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenChannels { config, out, count, seed } => {
            let cfg = load_config_with_seed(&config, seed)?;
            ensure_out(&out)?;
            generate_dataset(&cfg, count, out.join("channels.bin"))?;
            let args = vec![format!("--count={count}")];
            RunManifest::new("gen-channels", &args, &cfg).write(out.join("manifest.json"))?;
            println!("wrote {} realizations to {}", count, out.join("channels.bin").display());
            Ok(())
        }
        Command::Train {
            config,
            out,
            seed,
            profile,
            train_samples,
            val_samples,
            dataset,
            epochs,
        } => {
            let cfg = load_config_with_seed(&config, seed)?;
            ensure_out(&out)?;
            let tc = train_profile(profile, epochs);
            let (train_set, val_set) = training_sets(&cfg, dataset.as_deref(), train_samples, val_samples)?;
            let outcome = train(&cfg, &tc, &train_set, &val_set)?;
            if outcome.diverged {
                eprintln!("warning: training diverged; keeping the best earlier checkpoint");
            }
            save_checkpoint(
                out.join("checkpoint"),
                &outcome.model,
                &meta_for(&outcome.model, outcome.best_epoch, outcome.best_val_loss),
            )?;
            let log_path = out.join("training_log.csv");
            let mut w = csv_writer(&log_path)?;
            w.write_record(["epoch", "train_loss", "val_loss", "lr"])
                .map_err(|e| Error::Format(e.to_string()))?;
            for r in &outcome.log {
                w.write_record([
                    r.epoch.to_string(),
                    r.train_loss.to_string(),
                    r.val_loss.to_string(),
                    r.lr.to_string(),
                ])
                .map_err(|e| Error::Format(e.to_string()))?;
            }
            w.flush().map_err(|e| Error::io(&log_path, e))?;
            let args = vec![format!("--train-samples={train_samples}"), format!("--val-samples={val_samples}")];
            RunManifest::new("train", &args, &cfg).write(out.join("manifest.json"))?;
            println!(
                "best validation loss {:.6} at epoch {} (initial {:.6})",
                outcome.best_val_loss, outcome.best_epoch, outcome.initial_val_loss
            );
            Ok(())
        }
        Command::Evaluate {
            config,
            out,
            trials,
            seed,
            scheme,
            model,
            digital,
            sweep,
        } => {
            let cfg = load_config_with_seed(&config, seed)?;
            ensure_out(&out)?;
            let scheme = Scheme::parse(&scheme)?;
            let model = match (scheme, &model) {
                (Scheme::Proposed, Some(dir)) => Some(load_model(dir)?),
                (Scheme::Proposed, None) => {
                    return Err(Error::Invalid("--scheme proposed requires --model".into()))
                }
                _ => None,
            };
            let digital: DigitalScheme = digital.into();
            let points = match &sweep {
                Some(spec) => sweep_points(&cfg, spec)?,
                None => vec![(String::new(), f64::NAN, cfg.clone())],
            };
            let csv_path = out.join("results.csv");
            let mut w = csv_writer(&csv_path)?;
            w.write_record(rate_header(&cfg)).map_err(|e| Error::Format(e.to_string()))?;
            for (axis, value, point_cfg) in &points {
                let opts = EvalOptions {
                    trials,
                    seed: point_cfg.seed,
                    digital,
                };
                let variants = [SchemeSpec {
                    cfg: point_cfg.clone(),
                    scheme,
                    model: model.as_ref(),
                }];
                let reports = evaluate_variants(point_cfg, &variants, &opts)?.remove(0);
                let value_str = if value.is_nan() { String::new() } else { value.to_string() };
                write_rate_rows(&mut w, point_cfg, axis, &value_str, scheme.name(), digital, &reports)?;
            }
            w.flush().map_err(|e| Error::io(&csv_path, e))?;
            let mut args = vec![format!("--trials={trials}"), format!("--scheme={}", scheme.name())];
            if let Some(s) = &sweep {
                args.push(format!("--sweep={s}"));
            }
            RunManifest::new("evaluate", &args, &cfg).write(out.join("manifest.json"))?;
            println!("wrote {}", csv_path.display());
            Ok(())
        }
        Command::SweepPilots {
            config,
            out,
            trials,
            seed,
            profile,
            train_samples,
            val_samples,
            epochs,
            digital,
        } => {
            let cfg = load_config_with_seed(&config, seed)?;
            ensure_out(&out)?;
            let tc = train_profile(profile, epochs);
            let digital: DigitalScheme = digital.into();
            let opts = EvalOptions {
                trials,
                seed: cfg.seed.wrapping_add(1),
                digital,
            };
            let mut trainer = |split_cfg: &SystemConfig| -> Result<SuDnnModel> {
                let (train_set, val_set) = training_sets(split_cfg, None, train_samples, val_samples)?;
                Ok(train(split_cfg, &tc, &train_set, &val_set)?.model)
            };
            let table = crate::eval::sweep_pilot_allocation(&cfg, &mut trainer, &opts, digital)?;
            let csv_path = out.join("results.csv");
            let mut w = csv_writer(&csv_path)?;
            w.write_record(["L_a", "L_d", "mean_sum_rate", "best"])
                .map_err(|e| Error::Format(e.to_string()))?;
            for (i, row) in table.rows.iter().enumerate() {
                w.write_record([
                    row.l_a.to_string(),
                    row.l_d.to_string(),
                    row.mean_sum_rate.to_string(),
                    (i == table.best).to_string(),
                ])
                .map_err(|e| Error::Format(e.to_string()))?;
            }
            w.flush().map_err(|e| Error::io(&csv_path, e))?;
            let args = vec![format!("--trials={trials}")];
            RunManifest::new("sweep-pilots", &args, &cfg).write(out.join("manifest.json"))?;
            println!(
                "best split: L_a = {}, L_d = {}",
                table.best_row().l_a,
                table.best_row().l_d
            );
            Ok(())
        }
        Command::Fairness {
            config,
            out,
            model,
            rounds,
            population,
            seed,
            digital,
        } => {
            let cfg = load_config_with_seed(&config, seed)?;
            ensure_out(&out)?;
            let model = load_model(&model)?;
            let report = weighted_round_sim(&cfg, &model, population, rounds, &UnitGain, digital.into())?;
            let csv_path = out.join("results.csv");
            let mut w = csv_writer(&csv_path)?;
            w.write_record(["user", "times_scheduled", "average_rate", "weight"])
                .map_err(|e| Error::Format(e.to_string()))?;
            for u in &report.per_user {
                w.write_record([
                    u.user.to_string(),
                    u.times_scheduled.to_string(),
                    u.average_rate.to_string(),
                    u.weight.to_string(),
                ])
                .map_err(|e| Error::Format(e.to_string()))?;
            }
            let mean_ws =
                report.weighted_sums.iter().sum::<f64>() / report.weighted_sums.len() as f64;
            w.write_record(["mean_weighted_sum", "", &mean_ws.to_string(), ""])
                .map_err(|e| Error::Format(e.to_string()))?;
            w.flush().map_err(|e| Error::io(&csv_path, e))?;
            let args = vec![format!("--rounds={rounds}"), format!("--population={population}")];
            RunManifest::new("fairness", &args, &cfg).write(out.join("manifest.json"))?;
            println!("wrote {}", csv_path.display());
            Ok(())
        }
        Command::QuantizeEval {
            config,
            out,
            model,
            trials,
            seed,
            levels,
            digital,
        } => {
            let cfg = load_config_with_seed(&config, seed)?;
            ensure_out(&out)?;
            let model = load_model(&model)?;
            for &q in &levels {
                if q == 1 {
                    return Err(Error::Invalid("Q = 1 is not a valid phase resolution".into()));
                }
            }
            let digital: DigitalScheme = digital.into();
            let variants: Vec<SchemeSpec> = levels
                .iter()
                .map(|&q| SchemeSpec {
                    cfg: SystemConfig { q, ..cfg.clone() },
                    scheme: Scheme::Proposed,
                    model: Some(&model),
                })
                .collect();
            let opts = EvalOptions {
                trials,
                seed: cfg.seed,
                digital,
            };
            let results = evaluate_variants(&cfg, &variants, &opts)?;
            let csv_path = out.join("results.csv");
            let mut w = csv_writer(&csv_path)?;
            w.write_record(["q", "mean_sum_rate", "gap_vs_first"])
                .map_err(|e| Error::Format(e.to_string()))?;
            let reference = mean_sum_rate(&results[0]);
            for (q, reports) in levels.iter().zip(results.iter()) {
                let mean = mean_sum_rate(reports);
                let gap = (reference - mean) / reference;
                w.write_record([q.to_string(), mean.to_string(), gap.to_string()])
                    .map_err(|e| Error::Format(e.to_string()))?;
            }
            w.flush().map_err(|e| Error::io(&csv_path, e))?;
            let args = vec![format!("--trials={trials}")];
            RunManifest::new("quantize-eval", &args, &cfg).write(out.join("manifest.json"))?;
            println!("wrote {}", csv_path.display());
            Ok(())
        }
    }
}
