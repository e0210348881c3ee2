fn main() -> std::process::ExitCode {
    dnada::cli::run(std::env::args_os())
}
