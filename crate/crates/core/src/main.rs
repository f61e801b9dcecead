fn main() {
    std::process::exit(qmlp::cli::dispatch(std::env::args_os()));
}
