use clap::Parser;

fn main() {
    let cli = ceo_rate::cli::Cli::parse();
    std::process::exit(ceo_rate::cli::run(cli));
}
