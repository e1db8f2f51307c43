fn main() {
    std::process::exit(cylflow::runner::main());
}
