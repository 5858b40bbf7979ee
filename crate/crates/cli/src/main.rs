fn main() -> std::process::ExitCode {
    colosla_cli::commands::main()
}
