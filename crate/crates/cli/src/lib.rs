//! Command-line front end: argument parsing, configuration resolution and
//! exit-code mapping around the [`commands`].

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use alignrec::autograd::OpKind;
use alignrec::error::Category;
use alignrec::{Error, Result};

use config::{load_config, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err.category() {
        Category::Usage => EXIT_USAGE,
        Category::Data => EXIT_DATA,
        Category::Numerical => EXIT_NUMERICAL,
    }
}

#[derive(Parser, Debug)]
#[command(name = "alignrec", version, about = "Multimodal recommender with modality alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and save its best checkpoint.
    Train(Common),
    /// Test-split metrics of a checkpoint.
    Evaluate(Common),
    /// Train one ablation variant; records carry the variant name.
    Ablate {
        /// full, no-la, no-ga, text-only or visual-only.
        #[arg(id = "ablation", value_name = "VARIANT")]
        variant: String,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every gradient on a small seeded instance.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// MMD and cosine agreement between the two modality encodings.
    AlignStats(Common),
    /// Write a planted-factor synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        latent_dim: Option<usize>,
        #[arg(long)]
        per_user: Option<usize>,
        #[arg(long)]
        d_visual: Option<usize>,
        #[arg(long)]
        d_text: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
}

#[derive(Args, Debug, Default)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `user<TAB>item` interaction file.
    #[arg(long)]
    interactions: Option<PathBuf>,
    /// Visual feature matrix (FMAT).
    #[arg(long)]
    visual: Option<PathBuf>,
    /// Text feature matrix (FMAT).
    #[arg(long)]
    text: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Reduction factor of the modality projections.
    #[arg(long)]
    reduction: Option<usize>,
    /// k-core threshold; 0 disables filtering.
    #[arg(long)]
    kcore: Option<usize>,
    /// Cutoffs, comma separated.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Omit wall-clock times from records.
    #[arg(long)]
    no_timing: bool,
    /// Any configuration key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn flag_pairs(&self) -> Result<Vec<(String, String)>> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        push("seed", self.seed.map(|v| v.to_string()));
        push("out", path(&self.out));
        push("interactions", path(&self.interactions));
        push("visual", path(&self.visual));
        push("text", path(&self.text));
        push("checkpoint", path(&self.checkpoint));
        push("variant", self.variant.clone());
        push("max_epochs", self.max_epochs.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| v.to_string()));
        push("reduction", self.reduction.map(|v| v.to_string()));
        push("kcore", self.kcore.map(|v| v.to_string()));
        push(
            "ks",
            self.ks.as_ref().map(|ks| {
                let s: Vec<String> = ks.iter().map(ToString::to_string).collect();
                format!("[{}]", s.join(", "))
            }),
        );
        push("timing", self.no_timing.then(|| "false".to_string()));
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        for (k, _) in &out {
            if !config::KEYS.contains(&k.as_str()) {
                return Err(Error::Usage(format!("unknown configuration key `{k}`")));
            }
        }
        Ok(out)
    }

    fn resolve(&self, extra: Vec<(String, String)>) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => load_config(p)?,
            None => Vec::new(),
        };
        let mut flags = self.flag_pairs()?;
        flags.extend(extra);
        RunConfig::resolve(&file, &flags)
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, log: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Train(common) => {
            let cfg = common.resolve(Vec::new())?;
            commands::echo_config(&cfg, log, true)?;
            commands::cmd_train(&cfg, false, out, log)?;
        }
        Command::Ablate { variant, common } => {
            let cfg = common.resolve(vec![("variant".into(), variant)])?;
            commands::echo_config(&cfg, log, true)?;
            commands::cmd_train(&cfg, true, out, log)?;
        }
        Command::Evaluate(common) => {
            let cfg = common.resolve(Vec::new())?;
            commands::echo_config(&cfg, log, false)?;
            commands::cmd_evaluate(&cfg, out)?;
        }
        Command::Gradcheck { common, inject_fault } => {
            let cfg = common.resolve(Vec::new())?;
            commands::echo_config(&cfg, log, false)?;
            let fault = inject_fault
                .map(|name| OpKind::from_name(&name).ok_or_else(|| Error::Usage(format!("unknown primitive `{name}`"))))
                .transpose()?;
            commands::cmd_gradcheck(&cfg, fault, out)?;
        }
        Command::AlignStats(common) => {
            let cfg = common.resolve(Vec::new())?;
            commands::echo_config(&cfg, log, true)?;
            commands::cmd_align_stats(&cfg, out)?;
        }
        Command::Synth {
            common,
            users,
            items,
            latent_dim,
            per_user,
            d_visual,
            d_text,
            noise,
        } => {
            let extra: Vec<(String, String)> = [
                ("synth_users", users.map(|v| v.to_string())),
                ("synth_items", items.map(|v| v.to_string())),
                ("synth_latent_dim", latent_dim.map(|v| v.to_string())),
                ("synth_per_user", per_user.map(|v| v.to_string())),
                ("synth_d_visual", d_visual.map(|v| v.to_string())),
                ("synth_d_text", d_text.map(|v| v.to_string())),
                ("synth_noise", noise.map(|v| v.to_string())),
            ]
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
            .collect();
            let cfg = common.resolve(extra)?;
            commands::echo_config(&cfg, log, false)?;
            commands::cmd_synth(&cfg, out)?;
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Metrics go to `out`, logs and errors to `log`.
pub fn run<I, T>(args: I, out: &mut dyn Write, log: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = write!(log, "{}", e.render());
            return code;
        }
    };
    match dispatch(cli.command, out, log) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(log, "error: {e}");
            exit_code(&e)
        }
    }
}
