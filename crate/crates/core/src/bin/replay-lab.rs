fn main() {
    std::process::exit(replay_lab::cli::run(std::env::args_os()));
}
