use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mabench::analysis::{write_report, ReportOptions};
use mabench::emulator::{fit_profile_to_targets, FitTargets};
use mabench::message::SizeClass;
use mabench::persistence::{load_records, JsonlSink};
use mabench::scheduler::{run_experiment, ExperimentConfig, MetadataSource};
use mabench::transport::real::{serve, RealLink, RealLinks};
use mabench::transport::TransportConfig;

#[derive(Parser)]
#[command(name = "mabench", version, about = "Multi-link upload latency benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the acknowledgement server (UDP+TCP on PORT, secure on PORT+1).
    Serve {
        #[arg(long, default_value = "0.0.0.0:47000")]
        bind: SocketAddr,
        #[arg(long, default_value_t = 5.0)]
        stall_timeout: f64,
        /// Append server-side transaction log lines here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run an experiment over real interfaces.
    Run {
        #[command(flatten)]
        common: RunArgs,
        /// Server address; overrides the configuration.
        #[arg(long)]
        server: Option<SocketAddr>,
    },
    /// Run an experiment over emulated links.
    EmulateRun {
        #[command(flatten)]
        common: RunArgs,
        /// Repeat the campaign with consecutive seeds.
        #[arg(long, default_value_t = 1)]
        runs: u32,
    },
    /// Produce tables and ECDF files from a log.
    Analyze {
        log: PathBuf,
        #[arg(long, default_value = "report")]
        out: PathBuf,
        #[arg(long, default_value_t = 0.010)]
        max_skew: f64,
        #[arg(long, default_value_t = 6.0)]
        client_timeout: f64,
    },
    /// Fit an emulated link profile to UDP median, q90 and success rate.
    Fit {
        #[arg(long, default_value = "link")]
        id: String,
        #[arg(long)]
        median: f64,
        #[arg(long)]
        q90: f64,
        #[arg(long)]
        success_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    size: Option<SizeClass>,
    /// Comma-separated subset of configured link ids.
    #[arg(long, value_delimiter = ',')]
    links: Vec<String>,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.output {
            cfg.output = o.clone();
        }
        if let Some(s) = self.size {
            cfg.size_class = s;
        }
        if !self.links.is_empty() {
            cfg.select_links(&self.links)?;
        }
        if cfg.links.is_empty() {
            bail!("no links configured");
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Serve { bind, stall_timeout, log } => {
            let handle = serve(bind, stall_timeout, log.as_deref()).with_context(|| format!("binding {bind}"))?;
            println!("listening on {} (secure {})", handle.addr(), handle.secure_addr());
            loop {
                std::thread::park();
            }
        }
        Command::Run { common, server } => {
            let cfg = common.config()?;
            let server = server.or(cfg.transport.server_address).context("no server address given")?;
            let links = cfg
                .links
                .iter()
                .map(|l| RealLink {
                    id: l.id.clone(),
                    bind: l.bind,
                    metadata: l.metadata_file.clone().map_or(MetadataSource::Unavailable, MetadataSource::File),
                })
                .collect();
            let mut links = RealLinks::new(links, server);
            let sink = JsonlSink::open(&cfg.output)?;
            let summary = run_experiment(&mut links, &cfg, &sink)?;
            println!("{} rounds, {} records -> {}", summary.rounds, summary.records, cfg.output.display());
        }
        Command::EmulateRun { common, runs } => {
            let base = common.config()?;
            let sink = JsonlSink::open(&base.output)?;
            for i in 0..runs {
                let mut cfg = base.clone();
                if runs > 1 {
                    cfg.seed = base.seed + i as u64;
                    cfg.run_id = format!("{}-{i}", base.run_id);
                }
                let mut links = cfg.emulated_links()?;
                let summary = run_experiment(&mut links, &cfg, &sink)?;
                println!("{}: {} rounds, {} records", cfg.run_id, summary.rounds, summary.records);
            }
            println!("log: {}", base.output.display());
        }
        Command::Analyze { log, out, max_skew, client_timeout } => {
            let loaded = load_records(&log)?;
            if !loaded.skipped.is_empty() {
                eprintln!("skipped {} malformed line(s)", loaded.skipped.len());
            }
            let opts = ReportOptions { max_skew, client_timeout, ..Default::default() };
            let summary = write_report(&loaded.records, &out, &opts)?;
            println!(
                "{} records, {} of {} rounds synchronized, {} files in {}",
                loaded.records.len(),
                summary.rounds_kept,
                summary.rounds,
                summary.files.len(),
                out.display()
            );
        }
        Command::Fit { id, median, q90, success_rate, seed } => {
            let profile = fit_profile_to_targets(&id, &FitTargets::new(median, q90, success_rate), &TransportConfig::default(), seed)?;
            print!("{}", toml::to_string(&profile)?);
        }
    }
    Ok(())
}
