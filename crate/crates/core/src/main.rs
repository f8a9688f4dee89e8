fn main() {
    std::process::exit(mll_core::cli::run(std::env::args_os()));
}
