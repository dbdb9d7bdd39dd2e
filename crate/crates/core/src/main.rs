fn main() -> std::process::ExitCode {
    dalign_core::cli::run(std::env::args_os())
}
