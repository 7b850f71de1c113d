use clap::Parser;

use dinf::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    let (code, out, err) = run(&cli);
    print!("{out}");
    if let Some(e) = err {
        eprintln!("{e}");
    }
    std::process::exit(code);
}
