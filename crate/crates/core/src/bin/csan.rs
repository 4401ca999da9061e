use clap::Parser;

fn main() {
    let spec = csan::cli::RunSpec::parse();
    std::process::exit(csan::cli::run(spec));
}
