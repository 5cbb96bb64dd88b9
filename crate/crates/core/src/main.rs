fn main() {
    let code = seriesforge::cli::run_cli(std::env::args_os());
    std::process::exit(code);
}
