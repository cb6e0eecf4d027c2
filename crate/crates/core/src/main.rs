fn main() {
    std::process::exit(nsf_core::cli::run(std::env::args_os()));
}
