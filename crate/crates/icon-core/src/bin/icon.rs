fn main() {
    std::process::exit(icon_core::cli::dispatch(std::env::args_os()));
}
