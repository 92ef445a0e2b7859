fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ATLASFORGE_LOG", "info")).init();
    std::process::exit(atlasforge::cli::run(std::env::args_os()));
}
