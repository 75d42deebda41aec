use clap::Parser;

use bayes_peft::cli::{error_json, execute, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = execute(&cli) {
        eprintln!("{}", error_json(&e));
        std::process::exit(e.exit_code());
    }
}
