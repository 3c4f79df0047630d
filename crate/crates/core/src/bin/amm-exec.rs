fn main() {
    std::process::exit(amm_exec::cli::main_with_args(std::env::args_os()));
}
