//! Command-line runner: execute a configured policy matrix on a feeder,
//! check the welfare bounds of the two allocation policies, or dump the
//! grid response factors

use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use peerflow::scenario::{format_sig, run_scenarios, write_outputs, ScenarioConfig};
use peerflow::{FlowForm, Policy, RadialNetwork, SensitivityTable, SolverOptions};

#[derive(Parser)]
#[command(
    name = "peerflow",
    version,
    about = "Peer-to-peer trading studies on radial distribution feeders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured scenario and write its output tables.
    Run(RunArgs),
    /// Run the uniform and per-peer policies and check the welfare bounds.
    Verify(VerifyArgs),
    /// Solve the pre-trade operating point and print the full table of
    /// voltage, flow, and loss response factors as CSV.
    DumpSensitivity(DumpArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Write tables here instead of the config's output_dir.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override the recorded seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run only this comma-separated subset of the configured policies.
    #[arg(long, value_delimiter = ',', value_parser = parse_policy)]
    policies: Option<Vec<Policy>>,
    /// Force per-iteration trace files on or off.
    #[arg(long)]
    trace: Option<bool>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Scenario config (TOML); the policy list is replaced by
    /// universal + causal for the check.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct DumpArgs {
    /// Feeder description file.
    #[arg(long)]
    network: PathBuf,
    /// Line-flow quantity the factors differentiate.
    #[arg(long, default_value = "branch-current", value_parser = parse_flow_form)]
    form: FlowForm,
    /// Output file; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    match s {
        "base" => Ok(Policy::Base),
        "universal" => Ok(Policy::Universal),
        "causal" => Ok(Policy::Causal),
        other => Err(format!(
            "unknown policy {other:?}; expected base, universal, or causal"
        )),
    }
}

fn parse_flow_form(s: &str) -> Result<FlowForm, String> {
    match s {
        "branch-current" => Ok(FlowForm::BranchCurrent),
        "sending-end-only" => Ok(FlowForm::SendingEndOnly),
        other => Err(format!(
            "unknown flow form {other:?}; expected branch-current or sending-end-only"
        )),
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Verify(args) => verify(args),
        Command::DumpSensitivity(args) => dump_sensitivity(args),
    }
}

fn load_config(path: &PathBuf) -> Result<ScenarioConfig> {
    ScenarioConfig::from_file(path).with_context(|| format!("loading {}", path.display()))
}

fn run(args: RunArgs) -> Result<()> {
    let mut config = load_config(&args.config)?;
    if let Some(dir) = args.output_dir {
        config.scenario.output_dir = dir;
    }
    if let Some(seed) = args.seed {
        config.scenario.seed = seed;
    }
    if let Some(subset) = args.policies {
        let missing: Vec<_> = subset
            .iter()
            .filter(|p| !config.scenario.policies.contains(p))
            .collect();
        if !missing.is_empty() {
            bail!("requested policies not in the config: {missing:?}");
        }
        config.scenario.policies.retain(|p| subset.contains(p));
    }
    if let Some(trace) = args.trace {
        config.negotiation.trace = trace;
    }

    let bundle = run_scenarios(&config)?;

    println!(
        "scenario {} on {} nodes, {} peers",
        bundle.scenario_id,
        bundle.net.node_count(),
        bundle.peers.len()
    );
    println!(
        "{:<10} {:>12} {:>12} {:>10} {:>12} {:>10}",
        "policy", "volume MWh", "welfare $", "loss MWh", "violations", "rounds"
    );
    for outcome in &bundle.outcomes {
        let s = &outcome.state;
        println!(
            "{:<10} {:>12} {:>12} {:>10} {:>12} {:>10}{}",
            outcome.policy.to_string(),
            format_sig(s.volumes.iter().sum::<f64>() / 2.0),
            format_sig(s.welfare),
            format_sig(bundle.net.to_mva(s.grid.loss)),
            s.violations.count(),
            s.tau,
            if s.converged { "" } else { "  NOT CONVERGED" },
        );
    }
    for outcome in &bundle.outcomes {
        if !outcome.state.converged {
            eprintln!(
                "warning: {} stopped at max_iterations without meeting the tolerances",
                outcome.policy
            );
        }
    }

    let files = write_outputs(&bundle, &config.scenario.output_dir)?;
    println!("wrote {} files to {}", files.len(), config.scenario.output_dir.display());
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<()> {
    let mut config = load_config(&args.config)?;
    config.scenario.policies = vec![Policy::Universal, Policy::Causal];
    config.negotiation.trace = false;

    let bundle = run_scenarios(&config)?;
    let report = bundle
        .propositions
        .as_ref()
        .context("proposition report missing despite both policies running")?;

    let mut ok = true;
    let mut check = |label: &str, pass: bool, detail: String| {
        println!("{}  {label}: {detail}", if pass { "PASS" } else { "FAIL" });
        ok &= pass;
    };
    for outcome in &bundle.outcomes {
        check(
            &format!("{} negotiation converged", outcome.policy),
            outcome.state.converged,
            format!("{} rounds", outcome.state.tau),
        );
    }
    check(
        "uniform-rate welfare stays at or below the optimum",
        report.universal_bounded,
        format!(
            "optimum {} $, uniform {} $ (gap {})",
            format_sig(report.optimum_welfare),
            format_sig(report.universal_welfare),
            format_sig(report.universal_gap),
        ),
    );
    check(
        "per-peer-rate welfare attains the optimum within 0.5%",
        report.causal_relative_gap <= 5e-3,
        format!("relative gap {}", format_sig(report.causal_relative_gap)),
    );
    check(
        "co-located market closes the uniform-rate gap to 0.1%",
        report.colocation_gap <= 1e-3,
        format!("relative gap {}", format_sig(report.colocation_gap)),
    );

    if !ok {
        std::process::exit(1);
    }
    Ok(())
}

fn dump_sensitivity(args: DumpArgs) -> Result<()> {
    let net = RadialNetwork::from_file(&args.network)
        .with_context(|| format!("loading {}", args.network.display()))?;
    let options = SolverOptions {
        flow_form: args.form,
        ..SolverOptions::default()
    };
    let state = peerflow::solve_power_flow(&net, net.base_injection().as_slice(), None, &options)?;
    let probes: Vec<usize> = (1..net.node_count()).collect();
    let table = SensitivityTable::compute(&net, &state, &probes, args.form)?;

    match args.output {
        Some(path) => {
            let mut file = std::fs::File::create(&path)
                .with_context(|| format!("creating {}", path.display()))?;
            table.write_csv(&mut file)?;
            file.flush()?;
            println!("wrote {}", path.display());
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            table.write_csv(&mut lock)?;
        }
    }
    Ok(())
}
