fn main() {
    std::process::exit(rgload::cli::run(std::env::args_os()));
}
