use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};
use projection_regret::cli::{run, RunConfig, COMMANDS, SCHEMA};

fn command() -> Command {
    let mut root = Command::new("prdet")
        .about("Novelty detection with diffusion and consistency models")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true);
    for name in COMMANDS {
        let mut sub = Command::new(name).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key = value configuration file"),
        );
        for (key, default, help) in SCHEMA {
            let help = if default.is_empty() {
                help.to_string()
            } else {
                format!("{} [default: {}]", help, default)
            };
            sub = sub.arg(Arg::new(*key).long(*key).value_name("VALUE").help(help));
        }
        root = root.subcommand(sub);
    }
    root
}

fn resolve(m: &ArgMatches) -> projection_regret::Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for (key, _, _) in SCHEMA {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.apply_env()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = command().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match resolve(sub).and_then(|cfg| run(name, &cfg)) {
        Ok(summary) => {
            println!("{}", summary);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
