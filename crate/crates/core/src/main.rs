fn main() {
    std::process::exit(e2net::cli::dispatch(std::env::args_os()));
}
