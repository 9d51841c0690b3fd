fn main() {
    std::process::exit(cylseg::eval::cli_main(std::env::args_os()));
}
