fn main() {
    std::process::exit(saaf_cli::run(std::env::args_os()));
}
