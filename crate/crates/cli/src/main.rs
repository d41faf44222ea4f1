use clap::Parser;

fn main() {
    env_logger::init();
    let cli = augcal_cli::config::Cli::parse();
    std::process::exit(augcal_cli::run(cli));
}
