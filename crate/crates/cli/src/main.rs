use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command as App};
use robustbench::config::{Settings, KEYS};
use robustbench::experiment::{self, Command};
use robustbench::Error;

fn app() -> App {
    let mut app = App::new("robustbench")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Train, attack and probe small full-precision and quantized models")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for command in Command::ALL {
        let mut sub = App::new(command.name()).arg(
            Arg::new("config")
                .long("config")
                .short('c')
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .action(ArgAction::Append)
                .help("key = value file or a run manifest; later files win"),
        );
        for (key, default, help) in KEYS {
            let flag = key.replace('_', "-");
            sub = sub.arg(
                Arg::new(*key)
                    .long(flag)
                    .value_name("VALUE")
                    .help(format!("{help} [default: {default:?}]")),
            );
        }
        app = app.subcommand(sub);
    }
    app
}

fn settings(matches: &ArgMatches) -> robustbench::Result<Settings> {
    let mut s = Settings::default();
    if let Some(files) = matches.get_many::<PathBuf>("config") {
        for f in files {
            s.apply_file(f)?;
        }
    }
    for (key, _, _) in KEYS {
        if let Some(v) = matches.get_one::<String>(key) {
            s.set(key, v)?;
        }
    }
    Ok(s)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::MissingDataset(_) | Error::Format { .. } => 3,
        Error::Checkpoint(_) | Error::Architecture(_) => 4,
        Error::Diverged { .. } => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = app().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let command = Command::parse(name).expect("subcommands come from Command::ALL");
    let result = settings(sub).and_then(|s| experiment::run(command, &s));
    match result {
        Ok(manifest) => {
            for (file, hash) in &manifest.outputs {
                println!("{hash}  {file}");
            }
            for (k, v) in &manifest.metrics {
                println!("{k} = {v}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("robustbench {name}: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
