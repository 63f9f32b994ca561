fn main() {
    std::process::exit(fup_lab::cli::main_with_args(std::env::args_os()));
}
