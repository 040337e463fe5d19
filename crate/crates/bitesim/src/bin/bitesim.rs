fn main() {
    std::process::exit(bitesim::cli::dispatch(std::env::args_os()));
}
