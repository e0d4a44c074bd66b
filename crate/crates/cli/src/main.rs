use std::process::ExitCode;

fn main() -> ExitCode {
    let env = kfdiff_cli::config::env_overrides();
    match kfdiff_cli::run(std::env::args_os(), &env) {
        Ok(Some(text)) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", kfdiff_cli::error_line(&e));
            ExitCode::from(2)
        }
    }
}
