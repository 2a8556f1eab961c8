fn main() -> std::process::ExitCode {
    boxrefine::cli::main()
}
