//! `opsense`: one binary for every role.
//!
//! Exit status: 0 on success, 1 on a domain error, 2 on a usage error.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use opsense_core::clock;
use opsense_core::engine::VirtualSensorConfig;
use opsense_core::node::{Node, NodeConfig, RegistryNode};
use opsense_core::plugin::{PluginDescriptor, PluginDirectory};
use opsense_harness::report::{read_report, report_csv, summary_rows, write_comparison};
use opsense_harness::run::ReadyLine;
use opsense_harness::{bundled, read_events, resolve, run_scenario, MetricsReport, RunOptions};
use tracing::Level;

use config::NodeFlags;

#[derive(Debug, Parser)]
#[command(name = "opsense", version, about = "Distributed opportunistic sensing node and load harness")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run a sensing node
    #[command(subcommand)]
    Node(NodeCmd),
    /// Run the registry nodes register with
    #[command(subcommand)]
    Registry(RegistryCmd),
    /// Plugin descriptor tools
    #[command(subcommand)]
    Plugin(PluginCmd),
    /// Virtual sensor config tools
    #[command(subcommand)]
    Vsensor(VsensorCmd),
    /// Multi-process load experiments
    #[command(subcommand)]
    Harness(HarnessCmd),
    /// Effective configuration
    #[command(subcommand)]
    Config(ConfigCmd),
}

#[derive(Debug, Subcommand)]
enum NodeCmd {
    /// Serve the node api until interrupted or told to shut down
    Serve(NodeFlags),
}

#[derive(Debug, Subcommand)]
enum RegistryCmd {
    /// Serve the registry api
    Serve(RegistryArgs),
}

#[derive(Debug, Args)]
struct RegistryArgs {
    /// Address to bind
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Port to bind; 0 picks a free one
    #[arg(long, default_value_t = 8460)]
    port: u16,
    /// error, warn, info, debug or trace
    #[arg(long, env = "MOSDEN_LOG_LEVEL", default_value = "info")]
    log_level: String,
}

#[derive(Debug, Subcommand)]
enum PluginCmd {
    /// Check a plugin descriptor
    Validate {
        file: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum VsensorCmd {
    /// Check a virtual sensor config, and against its plugin when one is found
    Validate {
        file: PathBuf,
        /// Directory of *.plugin descriptors to resolve the plugin in
        #[arg(long)]
        plugins_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum HarnessCmd {
    /// Run a scenario and write its event log and reports
    Run {
        /// Scenario file or bundled scenario name
        #[arg(long)]
        scenario: String,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario duration, in seconds
        #[arg(long)]
        duration_s: Option<u64>,
        /// error, warn, info, debug or trace
        #[arg(long, env = "MOSDEN_LOG_LEVEL", default_value = "info")]
        log_level: String,
    },
    /// Recompute the reports of a run directory from its event log
    Report {
        dir: PathBuf,
    },
    /// List bundled scenarios
    ListScenarios,
    /// Compare a restful run with a push run
    Compare {
        restful: PathBuf,
        push: PathBuf,
        /// Output directory for the comparison summary.csv
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum ConfigCmd {
    /// Print the effective node configuration
    Show(NodeFlags),
}

fn parse_level(level: &str) -> Result<Level, String> {
    level
        .parse()
        .map_err(|_| format!("log_level: `{level}` is not one of error, warn, info, debug, trace"))
}

fn init_logging(level: &str) -> Result<(), String> {
    let level = parse_level(level)?;
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(level)
        .try_init();
    Ok(())
}

fn ready(line: ReadyLine) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", serde_json::to_string(&line).expect("ready line serializes"));
    let _ = out.flush();
}

fn runtime(workers: usize) -> Result<tokio::runtime::Runtime, String> {
    let mut b = tokio::runtime::Builder::new_multi_thread();
    if workers > 0 {
        b.worker_threads(workers);
    }
    b.enable_all().build().map_err(|e| format!("runtime: {e}"))
}

async fn interrupted() {
    let _ = tokio::signal::ctrl_c().await;
}

fn node_serve(cfg: NodeConfig) -> Result<(), String> {
    init_logging(&cfg.log_level)?;
    cfg.validate().map_err(|e| e.to_string())?;
    let rt = runtime(cfg.worker_threads)?;
    rt.block_on(async {
        let node = Node::start(cfg, clock::system()).await.map_err(|e| e.to_string())?;
        let s = node.services();
        ready(ReadyLine::new(
            "node",
            s.address().unwrap_or_default(),
            s.node_id.to_string(),
        ));
        node.run_until(interrupted()).await;
        Ok(())
    })
}

fn registry_serve(a: RegistryArgs) -> Result<(), String> {
    init_logging(&a.log_level)?;
    let bind = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|_| format!("host: `{}` is not an IP address", a.host))?;
    runtime(0)?.block_on(async {
        let reg = RegistryNode::start(bind, clock::system()).await.map_err(|e| e.to_string())?;
        ready(ReadyLine::new("registry", reg.local_addr().to_string(), "registry"));
        reg.run_until(interrupted()).await;
        Ok(())
    })
}

fn vsensor_validate(file: &Path, plugins_dir: Option<PathBuf>) -> Result<(), String> {
    let mut c = VirtualSensorConfig::load(file).map_err(|e| e.to_string())?;
    let plugins = PluginDirectory::new(plugins_dir.clone());
    if plugins_dir.is_some() {
        plugins.rescan().map_err(|e| e.to_string())?;
    }
    match plugins.get(&c.plugin_id) {
        Some(p) => {
            c.resolve(&p).map_err(|e| format!("{}: {e}", file.display()))?;
            println!("{}: ok (plugin `{}`)", file.display(), c.plugin_id);
        }
        None if plugins_dir.is_some() => {
            return Err(format!("{}: plugin_id: `{}` not found", file.display(), c.plugin_id));
        }
        None => println!("{}: ok (plugin `{}` not checked)", file.display(), c.plugin_id),
    }
    Ok(())
}

fn print_summary(r: &MetricsReport) {
    for (k, v) in summary_rows(r) {
        println!("{k}: {v}");
    }
}

fn harness(cmd: HarnessCmd) -> Result<(), String> {
    match cmd {
        HarnessCmd::Run {
            scenario,
            out,
            duration_s,
            log_level,
        } => {
            init_logging(&log_level)?;
            let scenario = resolve(&scenario).map_err(|e| e.to_string())?;
            let binary = std::env::current_exe().map_err(|e| format!("locating own binary: {e}"))?;
            let outcome = runtime(0)?
                .block_on(run_scenario(RunOptions {
                    binary,
                    out_dir: out,
                    scenario,
                    duration: duration_s.map(Duration::from_secs),
                }))
                .map_err(|e| e.to_string())?;
            print_summary(&outcome.report);
            if outcome.report.failed {
                return Err(format!("run failed: {}", outcome.report.failure_reason));
            }
            Ok(())
        }
        HarnessCmd::Report { dir } => {
            let events = read_events(&dir).map_err(|e| e.to_string())?;
            let report = MetricsReport::from_events(&events);
            report_csv(&report, &dir).map_err(|e| e.to_string())?;
            print_summary(&report);
            Ok(())
        }
        HarnessCmd::ListScenarios => {
            for (name, _) in bundled() {
                let c = resolve(name).map_err(|e| format!("{name}: {e}"))?;
                println!("{name}\t{}", c.description);
            }
            Ok(())
        }
        HarnessCmd::Compare { restful, push, out } => {
            let a = read_report(&restful).map_err(|e| e.to_string())?;
            let b = read_report(&push).map_err(|e| e.to_string())?;
            let ratio = write_comparison(&out, &a, &b).map_err(|e| e.to_string())?;
            match ratio {
                Some(r) => println!("push/restful mean round trip: {r:.3}"),
                None => println!("push/restful mean round trip: n/a"),
            }
            Ok(())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), String> {
    match cli.command {
        Cmd::Node(NodeCmd::Serve(flags)) => node_serve(flags.resolve()?),
        Cmd::Registry(RegistryCmd::Serve(a)) => registry_serve(a),
        Cmd::Plugin(PluginCmd::Validate { file }) => {
            let d = PluginDescriptor::load(&file).map_err(|e| e.to_string())?;
            println!("{}: ok (plugin `{}`)", file.display(), d.plugin_id);
            Ok(())
        }
        Cmd::Vsensor(VsensorCmd::Validate { file, plugins_dir }) => vsensor_validate(&file, plugins_dir),
        Cmd::Harness(cmd) => harness(cmd),
        Cmd::Config(ConfigCmd::Show(flags)) => {
            let c = flags.resolve()?;
            c.validate().map_err(|e| e.to_string())?;
            parse_level(&c.log_level)?;
            print!("{}", toml::to_string(&c).map_err(|e| e.to_string())?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors and 0 for --help.
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
