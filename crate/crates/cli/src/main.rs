use clap::Parser;
use rankcp_cli::{run, Cli};

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    print!("{}", run(&cli)?);
    Ok(())
}
