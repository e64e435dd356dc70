use clap::Parser;

fn main() {
    let cli = treemaml::cli::Cli::parse();
    std::process::exit(treemaml::cli::main_with(cli));
}
