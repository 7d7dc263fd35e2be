mod args;
mod cmd_decode;
mod cmd_eval;
mod cmd_gen;
mod cmd_train;
mod manifest;

use clap::Parser;

use crate::args::{expand_config_args, Cli, Command};

fn main() -> anyhow::Result<()> {
    let argv = expand_config_args(std::env::args().collect())?;
    let cli = Cli::parse_from(argv);
    match cli.command {
        Command::GenCorpus(a) => cmd_gen::run(a),
        Command::Train(a) => cmd_train::run(a),
        Command::Decode(a) => cmd_decode::run(a),
        Command::Evaluate(a) => cmd_eval::run(a),
    }
}
