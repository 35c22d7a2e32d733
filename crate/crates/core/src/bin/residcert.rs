fn main() {
    std::process::exit(residcert::cli::run(std::env::args_os()));
}
