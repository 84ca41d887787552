use clap::Parser;

fn main() {
    std::process::exit(prefvec::cli::main_with(prefvec::cli::Args::parse()));
}
