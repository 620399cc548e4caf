use clap::Parser;

use qtb_cli::cli::Cli;
use qtb_cli::pipeline;

fn main() {
    let cli = Cli::parse();
    if let Err(err) = pipeline::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
