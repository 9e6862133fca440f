fn main() {
    std::process::exit(goalnca_cli::run(std::env::args_os()));
}
