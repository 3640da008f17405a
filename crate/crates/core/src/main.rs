fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PSAT_LOG", "warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(psat::cli::run(&argv));
}
