fn main() {
    std::process::exit(actionlab::cli::main_entry());
}
