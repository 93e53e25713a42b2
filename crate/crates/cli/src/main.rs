fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = scent_cli::configure_threads() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
    std::process::exit(scent_cli::run_from(std::env::args_os()));
}
