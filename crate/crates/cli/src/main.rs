use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dualpath::app::{
    cmd_evaluate, cmd_export, cmd_generate, cmd_make_data, cmd_train, cmd_train_pose_prior, cmd_train_sampler,
    EvaluateRequest, GenerateFlags, GenerateRequest,
};
use dualpath::config::RunConfig;
use dualpath::metrics::{Control, Protocol};
use dualpath::Error;

#[derive(Parser)]
#[command(name = "dualpath", version, about = "Dual-path CVAE for controllable motion prediction")]
struct Cli {
    /// Run configuration (JSON); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize or import motion windows and write the train/test split.
    MakeData,
    /// Train the dual-path model.
    Train {
        #[arg(long)]
        resume: bool,
    },
    /// Train the pose prior on training limb directions.
    TrainPosePrior {
        #[arg(long)]
        resume: bool,
    },
    /// Train the diversity sampler against the frozen model and pose prior.
    TrainSampler {
        #[arg(long)]
        resume: bool,
    },
    /// Generate K futures for the first H frames of a motion file.
    Generate {
        #[arg(long)]
        past: PathBuf,
        #[arg(long)]
        fix_zb: bool,
        #[arg(long)]
        fix_zt: bool,
        #[arg(long)]
        end_pose: bool,
        #[arg(long)]
        diverse: bool,
        #[arg(short, long)]
        k: Option<usize>,
        /// Also write an SVG strip per sample.
        #[arg(long)]
        plot: bool,
    },
    /// Evaluate a control protocol on the test split.
    Evaluate {
        #[arg(long, value_enum, default_value_t = ProtocolArg::Random)]
        protocol: ProtocolArg,
        #[arg(long, value_enum, default_value_t = ControlArg::None)]
        control: ControlArg,
        #[arg(short, long)]
        k: Option<usize>,
    },
    /// Write the resolved config and JSON dumps of trained checkpoints.
    Export,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Random,
    Diversity,
}

#[derive(Clone, Copy, ValueEnum)]
enum ControlArg {
    None,
    #[value(name = "fix_zb")]
    FixZb,
    #[value(name = "fix_zt")]
    FixZt,
    #[value(name = "end_pose")]
    EndPose,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Argument(_) => 2,
        Error::Numerical(_) => 3,
        Error::Io { .. } | Error::Json { .. } | Error::Structural(_) => 4,
        Error::Contract(_) => 1,
    }
}

fn run(cli: Cli) -> dualpath::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.output_dir = o;
    }
    match cli.command {
        Command::MakeData => {
            let m = cmd_make_data(&cfg)?;
            println!("wrote {} train and {} test windows", m.train.len(), m.test.len());
        }
        Command::Train { resume } => {
            cmd_train(&cfg, resume)?;
        }
        Command::TrainPosePrior { resume } => {
            cmd_train_pose_prior(&cfg, resume)?;
        }
        Command::TrainSampler { resume } => {
            cmd_train_sampler(&cfg, resume)?;
        }
        Command::Generate {
            past,
            fix_zb,
            fix_zt,
            end_pose,
            diverse,
            k,
            plot,
        } => {
            let req = GenerateRequest {
                past_file: past,
                flags: GenerateFlags {
                    fix_zb,
                    fix_zt,
                    end_pose,
                    diverse,
                },
                k,
                plot,
            };
            let files = cmd_generate(&cfg, &req)?;
            println!("wrote {} samples", files.len());
        }
        Command::Evaluate { protocol, control, k } => {
            let req = EvaluateRequest {
                protocol: match protocol {
                    ProtocolArg::Random => Protocol::RandomSampling,
                    ProtocolArg::Diversity => Protocol::DiversitySampling,
                },
                control: match control {
                    ControlArg::None => Control::None,
                    ControlArg::FixZb => Control::FixZb,
                    ControlArg::FixZt => Control::FixZt,
                    ControlArg::EndPose => Control::EndPose,
                },
                k,
            };
            print!("{}", cmd_evaluate(&cfg, &req)?.to_text());
        }
        Command::Export => {
            let files = cmd_export(&cfg)?;
            println!("wrote {} files", files.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
