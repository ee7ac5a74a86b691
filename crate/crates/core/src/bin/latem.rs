use std::process::ExitCode;

fn main() -> ExitCode {
    latem::exec::init_thread_pool_from_env();
    ExitCode::from(latem::cli::run(std::env::args()) as u8)
}
