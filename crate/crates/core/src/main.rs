fn main() {
    std::process::exit(o2sr_core::cli::run(std::env::args_os()));
}
