fn main() {
    std::process::exit(frnet::cli::main_with(std::env::args_os()));
}
