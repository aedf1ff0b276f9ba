fn main() {
    std::process::exit(lpd_core::cli::main_entry(std::env::args_os()));
}
