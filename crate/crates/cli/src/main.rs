fn main() {
    std::process::exit(octscreen_cli::run(std::env::args_os()));
}
