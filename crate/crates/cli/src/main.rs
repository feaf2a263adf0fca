use std::process::ExitCode;

fn main() -> ExitCode {
    match sdfscene_cli::run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sdfscene: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
