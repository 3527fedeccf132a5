fn main() {
    std::process::exit(fbs_core::cli::dispatch(std::env::args_os()));
}
