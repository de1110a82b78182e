fn main() {
    std::process::exit(zogp_cli::run_from_args(std::env::args_os()));
}
