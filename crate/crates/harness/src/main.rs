fn main() {
    std::process::exit(resprompt_harness::cli::main_with_args(std::env::args_os()));
}
