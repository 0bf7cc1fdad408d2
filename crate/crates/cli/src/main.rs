use clap::Parser;
use mnbr_cli::Cli;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = mnbr_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
