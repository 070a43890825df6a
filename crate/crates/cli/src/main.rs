fn main() {
    std::process::exit(san_attn::run(std::env::args_os()));
}
