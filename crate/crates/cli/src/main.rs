use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use d2moe::pipeline::{evaluate, RuntimeModel};
use d2moe::Role;
use d2moe_cli::config::{KeyValues, RunConfig};
use d2moe_cli::driver::{self, TimingObserver};
use d2moe_cli::error::{CliError, CliResult, EXIT_USAGE};
use d2moe_cli::fixture::{gen_fixture, FixtureSpec};
use d2moe_cli::report::CompressionReport;
use d2moe_cli::{io, tables, Container};

#[derive(Parser)]
#[command(name = "d2moe", version, about = "Delta decomposition compression for mixture-of-experts models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn key_values(&self) -> CliResult<KeyValues> {
        let mut kv = match &self.config {
            Some(p) => KeyValues::load(p)?,
            None => KeyValues::default(),
        };
        for s in &self.set {
            kv.push_override(s)?;
        }
        Ok(kv)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a seeded synthetic model and calibration set.
    GenFixture {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Capture calibration statistics (Grams, routing counts, Fisher).
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compress a dense model.
    Compress {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        /// Precomputed statistics from `calibrate`.
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        ratio_delta: Option<String>,
        #[arg(long)]
        sparsity: Option<String>,
        #[arg(long)]
        merge: Option<String>,
        #[arg(long)]
        trim: Option<String>,
        #[arg(long)]
        profile: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Loss and perplexity of a dense or compressed model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
    },
    /// Expert similarity, layer sensitivity and rate-loss tables.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Write cka.csv for `--layer` and `--role`.
        #[arg(long)]
        cka: bool,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value = "up")]
        role: String,
        /// Write sensitivity.csv.
        #[arg(long)]
        sensitivity: bool,
        /// Average delta ratio to reallocate across layers.
        #[arg(long, default_value_t = 0.5)]
        budget_ratio: f64,
        #[arg(long, default_value_t = 0.05)]
        p_min: f64,
        /// Write frontier.csv.
        #[arg(long)]
        frontier: bool,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.5,0.7,1.0")]
        ratios: Vec<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Validate a report and print it in canonical form.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

fn load(path: &Path) -> CliResult<Container> {
    Container::load(path)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::GenFixture { model, calib, seed, cfg } => {
            let mut kv = cfg.key_values()?;
            if let Some(s) = seed {
                kv.set("seed", &s.to_string());
            }
            let spec = FixtureSpec::from_kv(&kv)?;
            let f = gen_fixture(&spec)?;
            io::save(&io::dense_to_container(&f.model)?, &model)?;
            io::save(&io::calibration_to_container(&f.calibration)?, &calib)?;
        }
        Cmd::Calibrate { model, calib, out, cfg } => {
            let rc = RunConfig::from_kv(&cfg.key_values()?)?;
            let m = io::dense_from_container(&load(&model)?)?;
            let c = io::calibration_from_container(&load(&calib)?)?;
            let ctx = driver::prepare_context(&m, &c, &rc, &mut TimingObserver::default())?;
            io::save(&io::stats_to_container(&ctx.layers, ctx.fisher.as_ref())?, &out)?;
        }
        Cmd::Compress { model, calib, stats, out, report, ratio_delta, sparsity, merge, trim, profile, cfg } => {
            let mut kv = cfg.key_values()?;
            for (k, v) in [("ratio_delta", ratio_delta), ("sparsity", sparsity), ("merge", merge), ("trim", trim), ("profile", profile)] {
                if let Some(v) = v {
                    kv.set(k, &v);
                }
            }
            let rc = RunConfig::from_kv(&kv)?;
            let m = io::dense_from_container(&load(&model)?)?;
            let c = io::calibration_from_container(&load(&calib)?)?;
            let ctx = match stats {
                Some(p) => Some(io::stats_from_container(&load(&p)?)?),
                None => None,
            };
            let (compressed, rep) = driver::run_compression(&m, &c, ctx, &rc)?;
            io::save(&io::runtime_to_container(&compressed)?, &out)?;
            let text = rep.to_text()?;
            std::fs::write(&report, text).map_err(|e| CliError::io(&report, e))?;
            if let Some(e) = &rep.eval {
                println!("loss_before={:?} loss_after={:?}", e.loss_before, e.loss_after);
            }
        }
        Cmd::Eval { model, calib, batch_size } => {
            let m: RuntimeModel = io::runtime_from_container(&load(&model)?)?;
            let c = io::calibration_from_container(&load(&calib)?)?;
            let r = evaluate(&m, &c.tokens, &c.labels, batch_size)?;
            println!("loss={:?} perplexity={:?} tokens={}", r.loss, r.perplexity, r.tokens);
        }
        Cmd::Analyze { model, calib, out_dir, cka, layer, role, sensitivity, budget_ratio, p_min, frontier, ratios, cfg } => {
            let rc = RunConfig::from_kv(&cfg.key_values()?)?;
            let m = io::dense_from_container(&load(&model)?)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| CliError::io(&out_dir, e))?;
            if cka {
                let role = Role::parse(&role).ok_or_else(|| CliError::key("role", format!("unknown role `{role}`")))?;
                tables::write_cka(&out_dir.join("cka.csv"), &driver::cka_table(&m, layer, role)?)?;
            }
            if sensitivity || frontier {
                let calib = calib.ok_or_else(|| CliError::key("calib", "required for --sensitivity and --frontier"))?;
                let c = io::calibration_from_container(&load(&calib)?)?;
                if sensitivity {
                    let rows = driver::sensitivity_rows(&m, &c, &rc, budget_ratio, p_min)?;
                    tables::write_sensitivity(&out_dir.join("sensitivity.csv"), &rows)?;
                }
                if frontier {
                    let pts = driver::frontier(&m, &c, &rc, &ratios)?;
                    tables::write_frontier(&out_dir.join("frontier.csv"), &pts)?;
                }
            }
        }
        Cmd::Report { input } => {
            let text = std::fs::read_to_string(&input).map_err(|e| CliError::io(&input, e))?;
            print!("{}", CompressionReport::parse(&text)?.to_text()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(EXIT_USAGE as u8) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
