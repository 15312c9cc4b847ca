fn main() {
    std::process::exit(trajmix::cli::main_with_args(std::env::args_os()));
}
