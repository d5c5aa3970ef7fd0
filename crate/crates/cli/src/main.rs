use aquasplat_cli::{expand_config, parse_args, run, Cli, CliError};

fn main() {
    let code = match parse().and_then(run) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("aquasplat: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn parse() -> Result<Cli, CliError> {
    let args = expand_config(std::env::args_os().collect())?;
    parse_args(args).map_err(|e| {
        if !e.use_stderr() {
            // --help and --version
            let _ = e.print();
            std::process::exit(0);
        }
        CliError::usage(e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string())
    })
}
