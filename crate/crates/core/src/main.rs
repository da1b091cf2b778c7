fn main() {
    std::process::exit(lowrank_counts::cli::run(std::env::args_os()));
}
