fn main() {
    std::process::exit(iplforge::cli::dispatch(std::env::args_os()));
}
