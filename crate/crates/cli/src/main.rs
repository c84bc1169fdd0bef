use clap::Parser;

use quantlab::error::{EXIT_CONFIG, EXIT_OK};
use quantlab::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(&cli) {
        Ok(text) => print!("{text}"),
        Err(e) => {
            eprintln!("quantlab: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
