fn main() {
    std::process::exit(vegcast_core::cli::run(std::env::args_os()));
}
