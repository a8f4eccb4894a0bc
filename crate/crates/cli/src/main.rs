use clap::Parser;

use mgt_lab::{dispatch, Cli, CliConfig};

fn main() {
    let cli = CliConfig::from(Cli::parse());
    let outcome = dispatch(&cli);
    for line in &outcome.stdout {
        println!("{line}");
    }
    std::process::exit(outcome.code);
}
