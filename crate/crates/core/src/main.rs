fn main() {
    std::process::exit(conta::cli::main_entry());
}
