fn main() -> std::process::ExitCode {
    facepipe::cli::main()
}
