fn main() {
    std::process::exit(airdet_cli::run(std::env::args_os()));
}
