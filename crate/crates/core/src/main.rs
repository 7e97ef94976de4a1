fn main() {
    std::process::exit(thetaflex::cli::main_with_args(std::env::args_os()));
}
