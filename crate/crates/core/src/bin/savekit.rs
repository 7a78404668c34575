fn main() -> std::process::ExitCode {
    savekit::cli::main()
}
