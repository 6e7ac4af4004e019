fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = dermoscan::cli::run(std::env::args_os());
    std::process::exit(result.exit_code);
}
