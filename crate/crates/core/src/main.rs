fn main() {
    std::process::exit(fmm2d::cli::run(std::env::args_os()));
}
