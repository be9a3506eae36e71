mod cli;
mod commands;
mod config;
mod output;
mod serve;

use std::process::ExitCode;

use clap::Parser;
use tracing_subscriber::EnvFilter;

use cli::{Cli, Command};
use config::FileConfig;
use output::Output;

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let cfg = FileConfig::resolve(cli.config.as_deref())?;
    let out = Output { pretty: cli.pretty };
    match &cli.command {
        Command::Generate(a) => commands::generate(a, &cfg, &out),
        Command::Corpus(a) => commands::corpus(a, &cfg, &out),
        Command::Augment(a) => commands::augment(a, &cfg, &out),
        Command::Train(a) => commands::train(a, &cfg, &out),
        Command::Eval(a) => commands::eval(a, &cfg, &out),
        Command::Grade(a) => commands::grade_image(a, &cfg, &out),
        Command::ServeCloud(a) => serve::cloud(a, &cfg, &out),
        Command::ServeEdge(a) => serve::edge(a, &cfg, &out),
        Command::Simulate(a) => serve::simulate(a, &cfg, &out),
    }
}

fn main() -> ExitCode {
    let filter = EnvFilter::try_from_env("GRADELINE_LOG").unwrap_or_else(|_| EnvFilter::new("warn"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::FAILURE } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
