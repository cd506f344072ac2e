use std::io;

use clap::Parser;
use spectromatch::app::{log_level, run, Cli};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // only the verbosity is needed up front; `run` reports parse errors itself
    let verbose = Cli::try_parse_from(&args).map_or(0, |c| c.verbose);
    env_logger::Builder::new().filter_level(log_level(verbose)).parse_env("SPECTROMATCH_LOG").init();
    let code = run(args, &mut io::stdout().lock());
    std::process::exit(code);
}
