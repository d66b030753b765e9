fn main() -> std::process::ExitCode {
    latent_align::cli::main_with_args(std::env::args_os())
}
