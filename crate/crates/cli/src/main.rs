fn main() {
    std::process::exit(grafit_cli::run(std::env::args_os()));
}
