fn main() {
    std::process::exit(gradshape::cli::run_from(std::env::args_os()));
}
