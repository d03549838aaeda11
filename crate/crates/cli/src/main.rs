fn main() {
    std::process::exit(svchange_cli::run(std::env::args_os()));
}
