fn main() {
    std::process::exit(lemmed::cli::main(std::env::args_os()));
}
