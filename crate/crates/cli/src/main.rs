use clap::Parser;

fn main() {
    std::process::exit(bcp_cli::run(bcp_cli::Cli::parse()));
}
