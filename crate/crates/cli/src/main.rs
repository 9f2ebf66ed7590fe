fn main() {
    std::process::exit(gitseg_cli::run(std::env::args_os()));
}
