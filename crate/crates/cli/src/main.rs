use clap::Parser;
use sfmkit_cli::{run, Cli, Exit};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                Exit::Config.code()
            } else {
                Exit::Ok.code()
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let code = match run(&cli, &mut out) {
        Ok(exit) => exit.code(),
        Err(e) => {
            log::error!("{e}");
            e.exit.code()
        }
    };
    std::process::exit(code);
}
