fn main() {
    std::process::exit(rstarcnn::cli::main());
}
