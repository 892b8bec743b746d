use clap::Parser;

fn main() {
    let cli = iffnn_cli::Cli::parse();
    if let Err(e) = iffnn_cli::run(cli) {
        eprintln!("iffnn: {e}");
        std::process::exit(e.exit_code());
    }
}
