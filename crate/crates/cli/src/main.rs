fn main() {
    std::process::exit(mixer_cli::run(std::env::args_os()));
}
