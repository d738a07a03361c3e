mod args;
mod run;

use std::process::ExitCode;

use clap::Parser;

use crate::args::Cli;
use crate::run::CliError;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", cli.jobs)))?;
    }
    let manifest = match (cli.from_manifest, cli.command) {
        (Some(path), _) => run::replay(&path, cli.out)?,
        (None, Some(cmd)) => run::execute(cmd)?,
        (None, None) => {
            return Err(CliError::Usage(
                "nothing to do: give a subcommand or --from-manifest (see --help)".into(),
            ))
        }
    };
    println!(
        "{}: {} output file(s) recorded",
        manifest.invocation.name(),
        manifest.outputs.len()
    );
    Ok(())
}
