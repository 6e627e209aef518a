fn main() -> std::process::ExitCode {
    densecomp::cli::main()
}
