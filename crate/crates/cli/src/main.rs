use std::io::Write;

use clap::Parser;
use rpml_cli::{Cli, TRACE_TARGET};

/// One JSON object per line on stderr. Training records are already JSON
/// and pass through as they are.
fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            if record.target() == TRACE_TARGET {
                writeln!(buf, "{}", record.args())
            } else {
                let line = serde_json::json!({
                    "level": record.level().as_str(),
                    "message": record.args().to_string(),
                });
                writeln!(buf, "{line}")
            }
        })
        .init();
}

fn main() {
    let cli = Cli::parse();
    init_logging();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if let Err(e) = rpml_cli::run(cli, &mut out) {
        drop(out);
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}
