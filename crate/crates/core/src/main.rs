fn main() {
    std::process::exit(tokencarve::cli::cli_dispatch(std::env::args_os()));
}
