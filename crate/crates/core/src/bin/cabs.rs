fn main() {
    std::process::exit(cabs_core::cli::run(std::env::args_os()));
}
