fn main() {
    std::process::exit(vmfmil::cli::main_with(std::env::args_os()));
}
