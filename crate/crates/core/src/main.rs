fn main() {
    std::process::exit(lowbit_oct::harness::main_with_args(std::env::args_os()));
}
