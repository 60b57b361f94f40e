fn main() {
    std::process::exit(tonet_cli::run(std::env::args_os()));
}
