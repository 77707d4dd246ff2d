use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use asma::files;
use asma::harness::{self, AttackSettings, ExperimentConfig, MultiplierGrid};
use asma::render;
use asma::report::{self, AttackRecord};
use asma_core::attack::{run_attack, AttackConfig, GradientSource, Variant};
use asma_core::segnet::{self, ModelParams, SegNet, TrainConfig};
use asma_core::synthdata::{self, GenConfig};
use asma_core::Sample;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "asma", version, about = "Targeted adversarial masks against a small segmentation network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and export it as PNG files plus an index.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train the segmentation network and write a checkpoint.
    Train {
        /// Dataset directory written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = harness::DEFAULT_EPOCHS)]
        epochs: usize,
        #[arg(long, default_value_t = harness::DEFAULT_LR)]
        lr: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Attack one source image toward the mask of another sample.
    Attack {
        #[command(flatten)]
        pair: PairArgs,
        #[command(flatten)]
        attack: AttackArgs,
        /// Output directory for the adversarial tensor, record and trace.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full comparison over every variant and multiplier grid point.
    Experiment(ExperimentArgs),
    /// Attack one pair and write the qualitative panel PNGs.
    Render {
        #[command(flatten)]
        pair: PairArgs,
        #[command(flatten)]
        attack: AttackArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, default_value_t = GenConfig::default().count)]
    count: usize,
    /// Image height and width.
    #[arg(long, default_value_t = GenConfig::default().height)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl DataArgs {
    fn config(&self) -> GenConfig {
        GenConfig { count: self.count, height: self.size, width: self.size, seed: self.seed, ..GenConfig::default() }
    }
}

#[derive(Args)]
struct PairArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    source: u32,
    /// Sample whose mask becomes the target; drawn with `--seed` when omitted.
    #[arg(long)]
    target: Option<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long, default_value_t = Variant::Asma)]
    variant: Variant,
    /// Fixed step multiplier (SSM, ASM).
    #[arg(long, default_value_t = 1e-4)]
    alpha: f64,
    /// Slope of the IoU-dependent multiplier (ASMA).
    #[arg(long, default_value_t = 1e-3)]
    beta: f64,
    /// Offset of the IoU-dependent multiplier (ASMA).
    #[arg(long, default_value_t = 1e-5)]
    tau: f64,
    #[arg(long, default_value_t = asma_core::attack::DEFAULT_MAX_ITERS)]
    max_iters: usize,
    #[arg(long, default_value_t = asma_core::attack::DEFAULT_EARLY_STOP_IOU)]
    early_stop: f64,
    #[arg(long, default_value_t = GradientSource::default())]
    gradient: GradientSource,
}

impl AttackArgs {
    fn config(&self) -> AttackConfig {
        let base = match self.variant {
            Variant::Ssm => AttackConfig::ssm(self.alpha),
            Variant::Asm => AttackConfig::asm(self.alpha),
            Variant::Asma => AttackConfig::asma(self.beta, self.tau),
        };
        base.with_max_iters(self.max_iters).with_early_stop(self.early_stop).with_gradient_source(self.gradient)
    }
}

#[derive(Args)]
struct ExperimentArgs {
    /// Master seed for data, initialization, training order and targets.
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "experiment")]
    out: PathBuf,
    /// Source images attacked per grid point.
    #[arg(long, default_value_t = harness::DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = GenConfig::default().count)]
    count: usize,
    #[arg(long, default_value_t = GenConfig::default().height)]
    size: usize,
    #[arg(long, default_value_t = harness::DEFAULT_EPOCHS)]
    epochs: usize,
    #[arg(long, default_value_t = harness::DEFAULT_LR)]
    lr: f32,
    /// Skip training and attack this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated subset of SSM, ASM, ASMA.
    #[arg(long, value_delimiter = ',', default_values_t = Variant::ALL.to_vec())]
    variants: Vec<Variant>,
    #[arg(long, value_delimiter = ',', default_values_t = MultiplierGrid::default().alphas)]
    alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = MultiplierGrid::default().betas)]
    betas: Vec<f64>,
    #[arg(long, default_value_t = MultiplierGrid::default().tau)]
    tau: f64,
    /// Factor applied to every alpha, beta and tau.
    #[arg(long, default_value_t = harness::DEFAULT_MULTIPLIER_SCALE)]
    scale: f64,
    #[arg(long, default_value_t = asma_core::attack::DEFAULT_MAX_ITERS)]
    max_iters: usize,
    #[arg(long, default_value_t = asma_core::attack::DEFAULT_EARLY_STOP_IOU)]
    early_stop: f64,
    #[arg(long, default_value_t = GradientSource::default())]
    gradient: GradientSource,
    /// Write one trace file per attack.
    #[arg(long)]
    traces: bool,
    /// Write panels for the first pair at each variant's best grid point.
    #[arg(long)]
    panels: bool,
}

impl ExperimentArgs {
    fn config(&self) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(self.seed);
        c.data.count = self.count;
        c.data.height = self.size;
        c.data.width = self.size;
        c.train.epochs = self.epochs;
        c.train.lr = self.lr;
        c.checkpoint = self.checkpoint.clone();
        c.variants = self.variants.clone();
        c.grid = MultiplierGrid { alphas: self.alphas.clone(), betas: self.betas.clone(), tau: self.tau, scale: self.scale };
        c.attack = AttackSettings { max_iters: self.max_iters, early_stop_iou: self.early_stop, gradient_source: self.gradient };
        c.samples_per_variant = self.samples;
        c.out_dir = Some(self.out.clone());
        c.write_traces = self.traces;
        c.write_panels = self.panels;
        c
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { out, data } => {
            let samples = synthdata::generate(&data.config())?;
            let index = files::export_dataset(&out, &samples)?;
            println!("wrote {} samples, index {}", samples.len(), index.display());
        }
        Command::Train { data, out, epochs, lr, seed } => {
            let dataset = files::import_dataset(&data)?;
            let classes = dataset.iter().map(|s| s.mask.max_label() as usize + 1).max().unwrap_or(2).max(2);
            let init = ModelParams::init(classes, seed)?;
            let (params, log) = segnet::train(&init, &dataset, &TrainConfig { epochs, lr, seed })?;
            for e in &log {
                println!("epoch {:3}  loss {:.5}  iou {:.4}", e.epoch, e.loss, e.iou);
            }
            let clean = segnet::mean_iou(&SegNet::new(params.clone()), &dataset)?;
            files::save_params(&out, &params)?;
            println!("clean IoU {clean:.4}; wrote {}", out.display());
        }
        Command::Attack { pair, attack, out } => {
            let (net, source, target) = load_pair(&pair)?;
            let config = attack.config();
            let rep = run_attack(&net, &source, &target.mask, &config)?;
            let record = AttackRecord::from_report(&rep, target.id);
            files::save_tensor(&out.join("adversarial.tnsr"), &rep.adversarial)?;
            files::save_tensor(&out.join("perturbation.tnsr"), &rep.perturbation(&source.image)?)?;
            report::write_text(&out.join(harness::RECORDS_FILE), &report::format_records(std::slice::from_ref(&record)))?;
            report::write_text(&out.join("trace.tsv"), &report::format_trace(&rep.trace))?;
            println!("{}", report::RECORD_HEADER);
            println!("{}", record.to_line());
        }
        Command::Experiment(args) => {
            let config = args.config();
            let outcome = harness::run_experiment(&config)?;
            print!("{}", harness::format_summary_table(&config, &outcome));
            println!("wrote {}", args.out.display());
        }
        Command::Render { pair, attack, out } => {
            let (net, source, target) = load_pair(&pair)?;
            let (rep, masks) = harness::attack_with_masks(&net, &source, &target.mask, &attack.config())?;
            let panel = render::render_panel(&source, &target.mask, &rep, &out)?;
            render::render_optimization_masks(&target.mask, &masks, &out)?;
            for p in panel.all() {
                println!("{}", p.display());
            }
            println!("IoU {:.4}  L2 {:.4}  Linf {:.4}", rep.accuracy.iou, rep.distance.l2, rep.distance.linf);
        }
    }
    Ok(())
}

fn load_pair(pair: &PairArgs) -> Result<(SegNet, Sample, Sample)> {
    let net = SegNet::new(files::load_params(&pair.model)?);
    let dataset = files::import_dataset(&pair.data)?;
    let find = |id: u32| -> Result<Sample> {
        dataset.iter().find(|s| s.id == id).cloned().with_context(|| format!("no sample {id} in {}", pair.data.display()))
    };
    let source = find(pair.source)?;
    let target = match pair.target {
        Some(id) if id == pair.source => bail!("target sample must differ from the source"),
        Some(id) => find(id)?,
        None => synthdata::pick_target(&dataset, pair.source, pair.seed)?.clone(),
    };
    Ok((net, source, target))
}

