fn main() {
    std::process::exit(crowd_attn::cli::main_with_args(std::env::args_os()));
}
