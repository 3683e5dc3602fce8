fn main() {
    std::process::exit(satfuse_cli::run(std::env::args_os()));
}
