use std::path::Path;
use std::process::ExitCode;

use fair_rationale_cli::commands::output_root;
use fair_rationale_cli::{run, CliError, Command, RunConfig};

const USAGE: &str = "usage: fair-rationale {gen|pretrain-bias|train-task|eval|sweep} [--config FILE] [--key value ...]

Outputs go to $FR_OUTPUT_DIR/<digest>/ (default root: fr-output).
Keys and defaults: fair-rationale defaults";

fn parse(args: &[String]) -> Result<(Command, RunConfig), CliError> {
    let (cmd, rest) = args
        .split_first()
        .ok_or_else(|| CliError::Config("missing command".into()))?;
    let command: Command = cmd.parse()?;
    let mut config_file = None;
    let mut flags = Vec::new();
    let mut it = rest.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            let path = it
                .next()
                .ok_or_else(|| CliError::Config("--config needs a file".into()))?;
            config_file = Some(path.clone());
        } else if let Some(path) = a.strip_prefix("--config=") {
            config_file = Some(path.to_string());
        } else {
            flags.push(a.clone());
        }
    }
    let mut cfg = match config_file {
        Some(p) => RunConfig::load(Path::new(&p))?,
        None => RunConfig::default(),
    };
    cfg.apply_flags(&flags)?;
    Ok((command, cfg))
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args.first().map(String::as_str) {
        None | Some("-h" | "--help" | "help") => {
            println!("{USAGE}");
            return ExitCode::SUCCESS;
        }
        Some("defaults") => {
            print!("{}", RunConfig::default().to_text());
            return ExitCode::SUCCESS;
        }
        _ => {}
    }
    let result = parse(&args).and_then(|(command, cfg)| run(command, &cfg, &output_root()));
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, CliError::Config(_)) {
                eprintln!("{USAGE}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
