fn main() {
    let result = certdispatch_cli::run(std::env::args_os());
    if result.exit_code == 0 {
        println!("{}", result.summary);
    } else {
        eprintln!("{}", result.summary);
    }
    std::process::exit(result.exit_code);
}
