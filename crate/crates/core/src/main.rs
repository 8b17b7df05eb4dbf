fn main() {
    std::process::exit(factorsens::cli::run(std::env::args_os()));
}
