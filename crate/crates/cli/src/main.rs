fn main() {
    std::process::exit(stn_cli::run(std::env::args_os()));
}
