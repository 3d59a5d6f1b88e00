fn main() {
    std::process::exit(attnerase_service::cli::run_from(std::env::args_os()));
}
