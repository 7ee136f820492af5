use clap::Parser;

fn main() {
    let cli = vconv::cli::Cli::parse();
    if let Err(e) = vconv::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
