use clap::Parser;

fn main() -> anyhow::Result<()> {
    rpam::cli::run(rpam::cli::Cli::parse())
}
