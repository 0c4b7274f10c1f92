use clap::Parser;
use mvot_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    if let Err(e) = run(cli, &mut stdout.lock()) {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}
