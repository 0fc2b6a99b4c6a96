use clap::Parser;
use grad_cli::{main_with, Cli};

fn main() {
    let exit = main_with(Cli::parse());
    std::process::exit(exit.code());
}
