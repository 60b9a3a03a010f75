fn main() {
    std::process::exit(dnf_core::cli::run(std::env::args_os()));
}
