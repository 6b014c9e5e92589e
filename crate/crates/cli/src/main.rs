fn main() {
    std::process::exit(kdslu::main_with(std::env::args().collect()));
}
