fn main() {
    std::process::exit(emolat::cli::run(std::env::args_os()));
}
