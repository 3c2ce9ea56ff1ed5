fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PPM_LOG", "warn")).init();
    std::process::exit(ppmsplat_cli::run(std::env::args_os()));
}
