fn main() -> std::process::ExitCode {
    wjmmd::cli::main()
}
