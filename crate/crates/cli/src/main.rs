fn main() {
    std::process::exit(lens_cli::run(std::env::args_os()));
}
