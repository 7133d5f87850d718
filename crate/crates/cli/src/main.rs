use clap::Parser;

fn main() {
    let cli = credence_cli::Cli::parse();
    if let Err(e) = credence_cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
