use clap::Parser;

fn main() {
    let cli = scenecast::cli::Cli::parse();
    std::process::exit(scenecast::cli::run(cli));
}
