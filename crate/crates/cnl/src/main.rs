use std::process::ExitCode;

fn main() -> ExitCode {
    match cnl::cli::run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(cnl::cli::exit_code(&err) as u8)
        }
    }
}
