use clap::Parser;
use gqn_core::cli::{execute, Cli, EXIT_OK};

fn main() {
    let outcome = execute(&Cli::parse());
    if outcome.code == EXIT_OK {
        println!("{}", outcome.message);
    } else {
        eprintln!("gqn: {}", outcome.message);
    }
    std::process::exit(outcome.code);
}
