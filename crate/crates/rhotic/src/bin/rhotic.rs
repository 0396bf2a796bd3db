use clap::Parser;

fn main() {
    let cli = match rhotic::cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Usage and parse errors exit 1; --help/--version exit 0.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = rhotic::cli::run(cli.command) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
