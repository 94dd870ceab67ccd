fn main() {
    std::process::exit(dccn::cli::main_with(std::env::args_os()));
}
