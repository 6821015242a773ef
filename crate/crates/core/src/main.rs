fn main() {
    std::process::exit(kerblam::cli::main_with_args(std::env::args_os()));
}
