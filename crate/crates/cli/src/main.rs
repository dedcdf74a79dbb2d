fn main() {
    std::process::exit(lungseg_cli::run(std::env::args_os()));
}
