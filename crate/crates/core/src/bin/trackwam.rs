fn main() {
    std::process::exit(trackwam::cli::main());
}
