use clap::Parser;

fn main() {
    let cli = stogate::cli::Cli::parse();
    match stogate::cli::run(&cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
