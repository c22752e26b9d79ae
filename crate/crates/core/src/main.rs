use clap::Parser;

fn main() {
    let cli = msmspline::cli::Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    std::process::exit(msmspline::cli::run(cli));
}
