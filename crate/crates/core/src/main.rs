fn main() {
    std::process::exit(pde_forge::cli::main_with(std::env::args_os()));
}
