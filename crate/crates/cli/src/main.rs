fn main() {
    std::process::exit(difflm_cli::run(std::env::args_os()));
}
