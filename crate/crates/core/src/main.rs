fn main() {
    std::process::exit(ovseg::cli::run(std::env::args_os()));
}
