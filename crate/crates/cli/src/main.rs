use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use sdgan_cli::commands::{self, EditArgs, EvalArgs, GenData, Suite, TrainFusion, MODEL_DIR_ENV};
use sdgan_core::pipeline::{ModelLayout, PipelineOptions};
use sdgan_core::prior::GridSpec;

#[derive(Parser)]
#[command(name = "sdgan", version, about = "Discrete attribute editing for sprite faces")]
struct Cli {
    /// TOML config with `dims`, `paths`, `training` and `service` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a sprite dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Draw accessories from the planted latent distribution.
        #[arg(long)]
        planted: bool,
        /// Accessory fractions, e.g. `face_mask=0.25,sun_glasses=0.25`.
        #[arg(long, default_value = "face_mask=0.25,sun_glasses=0.25,frame_glasses=0.25")]
        mix: String,
    },
    /// Train the generator on a planted dataset.
    TrainGenerator {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train an attribute predictor or detector.
    TrainPredictor {
        #[arg(long)]
        attr: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Save as a detector checkpoint.
        #[arg(long)]
        detector: bool,
    },
    /// Fit the attribute boundary in W.
    LearnBasis {
        #[arg(long)]
        attr: String,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        predictor: PathBuf,
        #[arg(long, default_value_t = 20_000)]
        samples: usize,
        #[arg(long, default_value_t = 500)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid search of the edit length for one latent.
    SearchEta {
        #[arg(long)]
        w: PathBuf,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        /// Defaults to `generator/` under the model root.
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        grid: Option<GridSpec>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train the fusion net for one attribute.
    TrainFusion {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train with `n_b = 0`.
        #[arg(long)]
        no_basis: bool,
    },
    /// Edit one latent and write the result.
    Edit {
        #[arg(long)]
        w: PathBuf,
        #[arg(long)]
        attr: String,
        #[arg(long)]
        fusion: PathBuf,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Defaults to the length stored with the basis.
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_latents: Option<PathBuf>,
    },
    /// Write `w` for a seeded latent.
    Sample {
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Evaluate trained models.
    Eval {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        attr: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Directory for PNG strips of the interpolation frames.
        #[arg(long)]
        strips: Option<PathBuf>,
    },
    /// Run the HTTP editing service.
    Serve {
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, env = MODEL_DIR_ENV)]
        models: Option<PathBuf>,
        /// Session archive to import at startup.
        #[arg(long)]
        session: Option<PathBuf>,
    },
    /// Train and evaluate everything end to end.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_ablation: bool,
        #[arg(long)]
        no_eval: bool,
    },
    /// Print the default config as TOML.
    Config,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut config = commands::load_config(cli.config.as_deref())?;
    let layout = || ModelLayout::new(commands::model_root(None, &config));
    match cli.command {
        Command::GenData { out, n, seed, planted, mix } => commands::gen_data(&GenData {
            n,
            seed,
            planted,
            mix: commands::parse_mix(&mix)?,
            resolution: config.dims.resolution,
            latent_dim: config.dims.latent_dim,
            out,
        }),
        Command::TrainGenerator { data, out, steps, seed } => {
            commands::train_generator_cmd(&config, &data, &out, steps, seed)
        }
        Command::TrainPredictor { attr, data, out, seed, detector } => {
            commands::train_predictor_cmd(&config, &attr, &data, &out, seed, detector)
        }
        Command::LearnBasis { attr, generator, predictor, samples, k, seed, out } => {
            let (p, _) = sdgan_core::attributes::AttributePredictor::load(&predictor)?;
            if p.attribute_id() != attr {
                anyhow::bail!("predictor is for `{}`, not `{attr}`", p.attribute_id());
            }
            commands::learn_basis_cmd(&generator, &predictor, samples, seed, k, &out, &config.training.search)
        }
        Command::SearchEta { w, basis, detector, generator, grid, lambda, report } => {
            let mut search = config.training.search.clone();
            search.grid = grid.unwrap_or(search.grid);
            search.score.lambda = lambda.unwrap_or(search.score.lambda);
            let generator = generator.unwrap_or_else(|| layout().generator());
            commands::search_eta_cmd(&generator, &w, &basis, &detector, &search, &report).map(|_| ())
        }
        Command::TrainFusion { data, generator, detector, basis, out, no_basis } => commands::train_fusion_cmd(
            &config,
            &TrainFusion { data, generator, detector, basis, out, ablation: no_basis },
        ),
        Command::Edit { w, attr, fusion, basis, generator, eta, out, dump_latents } => commands::edit_cmd(
            &config.training.search,
            &EditArgs {
                generator: generator.unwrap_or_else(|| layout().generator()),
                w,
                attr,
                fusion,
                basis,
                eta,
                out,
                dump_latents,
            },
        ),
        Command::Sample { generator, seed, index, out, png } => {
            commands::sample_cmd(&generator.unwrap_or_else(|| layout().generator()), seed, index, &out, png.as_deref())
        }
        Command::Eval { suite, out, models, attr, samples, steps, strips } => {
            let root = commands::model_root(models, &config);
            let report = commands::eval_cmd(
                &config,
                &root,
                &EvalArgs { suite, attr, samples, steps, strips, out: out.clone() },
            )?;
            println!("{}", serde_json::to_string_pretty(&report.metrics)?);
            Ok(())
        }
        Command::Serve { host, port, models, session } => {
            if let Some(h) = host {
                config.service.host = h;
            }
            if let Some(p) = port {
                config.service.port = p;
            }
            let root = commands::model_root(models, &config);
            commands::serve_cmd(&config, &root, &config.service.host, config.service.port, session.as_deref())
        }
        Command::Pipeline { out, no_ablation, no_eval } => {
            commands::pipeline_cmd(&config, &out, PipelineOptions { evaluate: !no_eval, ablation: !no_ablation })
        }
        Command::Config => {
            print!("{}", config.to_toml()?);
            Ok(())
        }
    }
}
