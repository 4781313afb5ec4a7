use std::io::Write;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("PSC_LOG", "warn")).init();
    let code = psc::cli::run(std::env::args_os(), &mut std::io::stdout().lock());
    let _ = std::io::stdout().flush();
    std::process::exit(code);
}
