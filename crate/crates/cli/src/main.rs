fn main() {
    env_logger::init();
    std::process::exit(voxelfm_cli::run(std::env::args_os()));
}
