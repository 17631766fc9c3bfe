fn main() {
    std::process::exit(sparta_core::cli::run(std::env::args_os()));
}
