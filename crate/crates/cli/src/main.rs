use clap::Parser;

fn main() -> std::process::ExitCode {
    match editlab_cli::run(editlab_cli::Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
