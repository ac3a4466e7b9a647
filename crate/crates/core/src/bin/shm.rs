fn main() {
    std::process::exit(shm_core::cli::main_cli(std::env::args_os()));
}
