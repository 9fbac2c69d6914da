fn main() {
    std::process::exit(ssr_cli::dispatch(std::env::args_os()));
}
