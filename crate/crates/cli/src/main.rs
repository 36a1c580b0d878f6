use std::process::ExitCode;

use vpy_cli::{config_from_args, run, Experiment};

const USAGE: &str = "usage: vpy <experiment> [--config FILE] [--key VALUE ...]
experiments: growth_report, saturation, field_check, simulate, stability, certify";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(name) = args.first() else {
        eprintln!("{USAGE}");
        return ExitCode::from(2);
    };
    if name == "-h" || name == "--help" {
        println!("{USAGE}");
        return ExitCode::SUCCESS;
    }
    let prepared = name
        .parse::<Experiment>()
        .and_then(|e| Ok((e, config_from_args(&args[1..])?)));
    let (experiment, cfg) = match prepared {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}\n{USAGE}");
            return ExitCode::from(vpy_cli::exit_code(&e) as u8);
        }
    };
    let summary = run(experiment, &cfg);
    if let Some(m) = &summary.message {
        eprintln!("{}: {m}", experiment.name());
    }
    println!("{}", summary.output_dir.join("manifest.json").display());
    ExitCode::from(summary.exit_code as u8)
}
