fn main() -> std::process::ExitCode {
    tarnet::cli::main()
}
