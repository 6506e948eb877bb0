fn main() {
    std::process::exit(ama_core::cli::main_entry());
}
