fn main() {
    let outcome = cssda::cli::run(std::env::args_os());
    if !outcome.message.is_empty() {
        eprintln!("{}", outcome.message.trim_end());
    }
    std::process::exit(outcome.exit_code);
}
