//! Experiment runner: train (or load) the network, attack a batch of
//! source images with every variant over its multiplier grid, aggregate
//! mean ± standard deviation of L2, L∞, IoU and PA per grid point, and pick
//! the grid point with the highest mean IoU per variant.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use asma_core::attack::{run_attack, run_attack_observed, AttackConfig, GradientSource, Variant};
use asma_core::segnet::{self, EpochLog, ModelParams, SegNet, TrainConfig};
use asma_core::synthdata::{self, GenConfig};
use asma_core::{AttackReport, LabelMask, Sample};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::files;
use crate::render;
use crate::report::{self, AttackRecord};

/// Multiplier grids in raw units. Every value is multiplied by `scale`
/// before use; the effective values are what records and tables report.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiplierGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub tau: f64,
    pub scale: f64,
}

impl Default for MultiplierGrid {
    fn default() -> Self {
        Self {
            alphas: vec![1e-8, 1e-7, 1e-6, 1e-5],
            betas: vec![1e-6, 5e-6, 1e-5],
            tau: 1e-7,
            scale: DEFAULT_MULTIPLIER_SCALE,
        }
    }
}

/// Rescales the raw grid to the gradient magnitudes of the small network.
pub const DEFAULT_MULTIPLIER_SCALE: f64 = 100.0;

impl MultiplierGrid {
    /// Attack configurations for one variant, in grid order.
    pub fn configs(&self, variant: Variant, base: &AttackSettings) -> Vec<AttackConfig> {
        let finish = |c: AttackConfig| {
            c.with_max_iters(base.max_iters)
                .with_early_stop(base.early_stop_iou)
                .with_gradient_source(base.gradient_source)
        };
        match variant {
            Variant::Ssm => self.alphas.iter().map(|&a| finish(AttackConfig::ssm(a * self.scale))).collect(),
            Variant::Asm => self.alphas.iter().map(|&a| finish(AttackConfig::asm(a * self.scale))).collect(),
            Variant::Asma => self
                .betas
                .iter()
                .map(|&b| finish(AttackConfig::asma(b * self.scale, self.tau * self.scale)))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackSettings {
    pub max_iters: usize,
    pub early_stop_iou: f64,
    pub gradient_source: GradientSource,
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self {
            max_iters: asma_core::attack::DEFAULT_MAX_ITERS,
            early_stop_iou: asma_core::attack::DEFAULT_EARLY_STOP_IOU,
            gradient_source: GradientSource::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: GenConfig,
    pub train: TrainConfig,
    /// Parameter initialization seed.
    pub init_seed: u64,
    /// Load this checkpoint instead of training.
    pub checkpoint: Option<PathBuf>,
    pub variants: Vec<Variant>,
    pub grid: MultiplierGrid,
    pub attack: AttackSettings,
    pub samples_per_variant: usize,
    /// Seed for target-mask selection.
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub write_traces: bool,
    pub write_panels: bool,
}

pub const DEFAULT_SAMPLES: usize = 50;
pub const DEFAULT_EPOCHS: usize = 40;
pub const DEFAULT_LR: f32 = 0.1;

impl ExperimentConfig {
    /// Desk-scale defaults with every seed derived from `seed`.
    pub fn new(seed: u64) -> Self {
        Self {
            data: GenConfig { seed, ..GenConfig::default() },
            train: TrainConfig { epochs: DEFAULT_EPOCHS, lr: DEFAULT_LR, seed },
            init_seed: seed,
            checkpoint: None,
            variants: Variant::ALL.to_vec(),
            grid: MultiplierGrid::default(),
            attack: AttackSettings::default(),
            samples_per_variant: DEFAULT_SAMPLES,
            seed,
            out_dir: None,
            write_traces: false,
            write_panels: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.samples_per_variant < 2 {
            return Err(Error::Config("samples_per_variant must be at least 2".into()));
        }
        if self.samples_per_variant > self.data.count {
            return Err(Error::Config(format!(
                "samples_per_variant ({}) exceeds the dataset size ({})",
                self.samples_per_variant, self.data.count
            )));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("no attack variants selected".into()));
        }
        for &v in &self.variants {
            let configs = self.grid.configs(v, &self.attack);
            if configs.is_empty() {
                return Err(Error::Config(format!("empty multiplier grid for {v}")));
            }
            for c in configs {
                c.validate()?;
            }
        }
        Ok(())
    }
}

/// Mean and standard deviation (denominator `n - 1`; 0 when `n < 2`).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

/// Aggregate over the successful attacks of one grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSummary {
    pub variant: Variant,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub attacks: usize,
    pub failed: usize,
    pub converged: usize,
    pub l2: Stat,
    pub linf: Stat,
    pub iou: Stat,
    pub pa: Stat,
}

impl GridSummary {
    pub fn from_records(config: &AttackConfig, records: &[AttackRecord], failed: usize) -> Self {
        let col = |f: fn(&AttackRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
        Self {
            variant: config.variant,
            alpha: config.alpha,
            beta: config.beta,
            tau: config.tau,
            attacks: records.len(),
            failed,
            converged: records.iter().filter(|r| r.converged).count(),
            l2: Stat::of(&col(|r| r.l2)),
            linf: Stat::of(&col(|r| r.linf)),
            iou: Stat::of(&col(|r| r.iou)),
            pa: Stat::of(&col(|r| r.pa)),
        }
    }

    fn multiplier_label(&self) -> String {
        match self.variant {
            Variant::Asma => format!("beta={:.0e} tau={:.0e}", self.beta, self.tau),
            _ => format!("alpha={:.0e}", self.alpha),
        }
    }

    fn matches(&self, r: &AttackRecord) -> bool {
        r.variant == self.variant && r.alpha == self.alpha && r.beta == self.beta && r.tau == self.tau
    }
}

/// Highest mean IoU; ties go to the lower mean L2.
pub fn select_headline<'a>(rows: impl IntoIterator<Item = &'a GridSummary>) -> Option<&'a GridSummary> {
    rows.into_iter().filter(|r| r.attacks > 0).fold(None, |best: Option<&GridSummary>, r| match best {
        Some(b) if r.iou.mean < b.iou.mean || (r.iou.mean == b.iou.mean && r.l2.mean >= b.l2.mean) => Some(b),
        _ => Some(r),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackFailure {
    pub variant: Variant,
    pub source: u32,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub params: ModelParams,
    pub train_log: Vec<EpochLog>,
    /// Mean clean IoU of the network on the whole dataset.
    pub clean_iou: f64,
    /// `(source id, target donor id)` for every attacked pair.
    pub pairs: Vec<(u32, u32)>,
    pub records: Vec<AttackRecord>,
    pub failures: Vec<AttackFailure>,
    pub grid: Vec<GridSummary>,
    /// One row per variant, chosen by [`select_headline`].
    pub headline: Vec<GridSummary>,
}

impl ExperimentOutcome {
    pub fn headline_for(&self, variant: Variant) -> Option<&GridSummary> {
        self.headline.iter().find(|h| h.variant == variant)
    }

    /// Records of the grid point summarized by `row`.
    pub fn records_for<'a>(&'a self, row: &'a GridSummary) -> impl Iterator<Item = &'a AttackRecord> + 'a {
        self.records.iter().filter(move |r| row.matches(r))
    }
}

pub const SUMMARY_FILE: &str = "summary.txt";
pub const SUMMARY_RECORDS_FILE: &str = "summary.tsv";
pub const RECORDS_FILE: &str = "records.tsv";
pub const CHECKPOINT_FILE: &str = "model.segn";
pub const TRAIN_LOG_FILE: &str = "train_log.tsv";

pub const SUMMARY_HEADER: &str = "variant\talpha\tbeta\ttau\tattacks\tfailed\tconverged\tl2_mean\tl2_std\tlinf_mean\tlinf_std\tiou_mean\tiou_std\tpa_mean\tpa_std\theadline";

pub fn obtain_model(config: &ExperimentConfig, dataset: &[Sample]) -> Result<(ModelParams, Vec<EpochLog>)> {
    match &config.checkpoint {
        Some(path) => Ok((files::load_params(path)?, Vec::new())),
        None => {
            let init = ModelParams::init(2, config.init_seed)?;
            Ok(segnet::train(&init, dataset, &config.train)?)
        }
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let dataset = synthdata::generate(&config.data)?;
    let (params, train_log) = obtain_model(config, &dataset)?;
    let net = SegNet::new(params.clone());
    let clean_iou = segnet::mean_iou(&net, &dataset)?;

    let sources = &dataset[..config.samples_per_variant];
    let targets: Vec<&Sample> = sources
        .iter()
        .map(|s| synthdata::pick_target(&dataset, s.id, config.seed))
        .collect::<asma_core::Result<_>>()?;
    let pairs: Vec<(u32, u32)> = sources.iter().zip(&targets).map(|(s, t)| (s.id, t.id)).collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut grid = Vec::new();
    let mut headline = Vec::new();
    let mut traces = Vec::new();
    for &variant in &config.variants {
        let start = grid.len();
        for attack in config.grid.configs(variant, &config.attack) {
            let results: Vec<_> = sources
                .par_iter()
                .zip(&targets)
                .map(|(s, t)| run_attack(&net, s, &t.mask, &attack))
                .collect();
            let mut ok = Vec::new();
            let mut failed = 0;
            for ((s, t), result) in sources.iter().zip(&targets).zip(results) {
                match result {
                    Ok(rep) => {
                        if config.write_traces {
                            traces.push((trace_name(&rep, t.id), report::format_trace(&rep.trace)));
                        }
                        ok.push(AttackRecord::from_report(&rep, t.id));
                    }
                    Err(e) => {
                        failed += 1;
                        failures.push(AttackFailure { variant, source: s.id, message: e.to_string() });
                    }
                }
            }
            grid.push(GridSummary::from_records(&attack, &ok, failed));
            records.extend(ok);
        }
        if let Some(best) = select_headline(&grid[start..]) {
            headline.push(best.clone());
        }
    }

    let outcome = ExperimentOutcome { params, train_log, clean_iou, pairs, records, failures, grid, headline };
    if let Some(dir) = &config.out_dir {
        write_outputs(config, &outcome, dir)?;
        for (name, text) in traces {
            report::write_text(&dir.join("traces").join(name), &text)?;
        }
        if config.write_panels {
            write_headline_panels(config, &outcome, &net, &dataset, dir)?;
        }
    }
    Ok(outcome)
}

fn trace_name(rep: &AttackReport, target: u32) -> String {
    let c = &rep.config;
    format!(
        "{}_a{:e}_b{:e}_t{:e}_{:04}_to_{:04}.tsv",
        c.variant, c.alpha, c.beta, c.tau, rep.source_id, target
    )
}

fn write_headline_panels(
    config: &ExperimentConfig,
    outcome: &ExperimentOutcome,
    net: &SegNet,
    dataset: &[Sample],
    dir: &Path,
) -> Result<()> {
    let (source_id, target_id) = outcome.pairs[0];
    let source = &dataset[source_id as usize];
    let target = &dataset[target_id as usize].mask;
    for row in &outcome.headline {
        let attack = config
            .grid
            .configs(row.variant, &config.attack)
            .into_iter()
            .find(|c| c.alpha == row.alpha && c.beta == row.beta && c.tau == row.tau)
            .expect("headline row comes from the grid");
        let (report, masks) = attack_with_masks(net, source, target, &attack)?;
        let panel_dir = dir.join("panels").join(row.variant.to_string());
        render::render_panel(source, target, &report, &panel_dir)?;
        render::render_optimization_masks(target, &masks, &panel_dir)?;
    }
    Ok(())
}

/// Runs an attack and keeps up to five evenly spaced predictions, for the
/// adaptive-mask illustration.
pub fn attack_with_masks(
    net: &SegNet,
    source: &Sample,
    target: &LabelMask,
    attack: &AttackConfig,
) -> Result<(AttackReport, Vec<LabelMask>)> {
    let mut all = Vec::new();
    let report = run_attack_observed(net, source, target, attack, |st| all.push(st.prediction.clone()))?;
    let keep = 5.min(all.len());
    let picks: Vec<LabelMask> = (0..keep)
        .map(|k| all[if keep > 1 { k * (all.len() - 1) / (keep - 1) } else { 0 }].clone())
        .collect();
    Ok((report, picks))
}

pub fn write_outputs(config: &ExperimentConfig, outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    report::write_text(&dir.join(RECORDS_FILE), &report::format_records(&outcome.records))?;
    report::write_text(&dir.join(SUMMARY_RECORDS_FILE), &format_summary_records(outcome))?;
    report::write_text(&dir.join(SUMMARY_FILE), &format_summary_table(config, outcome))?;
    if !outcome.train_log.is_empty() {
        let mut log = String::from("epoch\tloss\tiou\n");
        for e in &outcome.train_log {
            writeln!(log, "{}\t{:?}\t{:?}", e.epoch, e.loss, e.iou).unwrap();
        }
        report::write_text(&dir.join(TRAIN_LOG_FILE), &log)?;
        files::save_params(&dir.join(CHECKPOINT_FILE), &outcome.params)?;
    }
    Ok(())
}

pub fn format_summary_records(outcome: &ExperimentOutcome) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for row in &outcome.grid {
        let is_headline = outcome.headline.iter().any(|h| h == row);
        writeln!(
            out,
            "{}\t{:?}\t{:?}\t{:?}\t{}\t{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{}",
            row.variant,
            row.alpha,
            row.beta,
            row.tau,
            row.attacks,
            row.failed,
            row.converged,
            row.l2.mean,
            row.l2.std,
            row.linf.mean,
            row.linf.std,
            row.iou.mean,
            row.iou.std,
            row.pa.mean,
            row.pa.std,
            is_headline as u8
        )
        .unwrap();
    }
    out
}

pub fn format_summary_table(config: &ExperimentConfig, outcome: &ExperimentOutcome) -> String {
    let mut out = String::new();
    let g = &config.grid;
    writeln!(out, "seed {}  samples {}  max_iters {}  early_stop_iou {}  gradient {}", config.seed, config.samples_per_variant, config.attack.max_iters, config.attack.early_stop_iou, config.attack.gradient_source).unwrap();
    writeln!(out, "multiplier scale {:e}: alpha {:?}  beta {:?}  tau {:e} (raw, before scaling)", g.scale, g.alphas, g.betas, g.tau).unwrap();
    writeln!(out, "clean IoU {:.4} on {} samples", outcome.clean_iou, config.data.count).unwrap();
    let failed: usize = outcome.grid.iter().map(|r| r.failed).sum();
    writeln!(out, "failed attacks (excluded from means): {failed}").unwrap();
    out.push('\n');

    let header = ["optimization", "multiplier", "n", "conv", "L2", "Linf", "IoU", "PA"];
    let row_cells = |r: &GridSummary, name: String| {
        vec![
            name,
            r.multiplier_label(),
            r.attacks.to_string(),
            r.converged.to_string(),
            format!("{:.2} ± {:.2}", r.l2.mean, r.l2.std),
            format!("{:.3} ± {:.3}", r.linf.mean, r.linf.std),
            format!("{:.1}% ± {:.1}%", 100.0 * r.iou.mean, 100.0 * r.iou.std),
            format!("{:.1}% ± {:.1}%", 100.0 * r.pa.mean, 100.0 * r.pa.std),
        ]
    };
    let headline_rows: Vec<Vec<String>> = outcome
        .headline
        .iter()
        .map(|r| row_cells(r, if r.variant == Variant::Asma { "ASM + DPM (ASMA)".into() } else { r.variant.to_string() }))
        .collect();
    out.push_str("best grid point per variant (highest mean IoU)\n");
    out.push_str(&align(&header, &headline_rows));
    out.push('\n');
    let grid_rows: Vec<Vec<String>> = outcome.grid.iter().map(|r| row_cells(r, r.variant.to_string())).collect();
    out.push_str("all grid points\n");
    out.push_str(&align(&header, &grid_rows));
    if !outcome.failures.is_empty() {
        out.push_str("\nfailures\n");
        for f in &outcome.failures {
            writeln!(out, "{} source {}: {}", f.variant, f.source, f.message).unwrap();
        }
    }
    out
}

fn align(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let mut l = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                l.push_str("  ");
            }
            l.push_str(cell);
            l.extend(std::iter::repeat_n(' ', w - cell.chars().count()));
        }
        out.push_str(l.trim_end());
        out.push('\n');
    };
    line(header.to_vec());
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(rule.iter().map(String::as_str).collect());
    for row in rows {
        line(row.iter().map(String::as_str).collect());
    }
    out
}

/// Parses a `summary.tsv` row back into numbers, for consistency checks.
pub fn parse_summary_records(text: &str) -> Result<Vec<(GridSummary, bool)>> {
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(Error::Config("summary records: missing header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Config(format!("bad summary record: {line}"));
            if f.len() != 16 {
                return Err(bad());
            }
            let x = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            let n = |i: usize| f[i].parse::<usize>().map_err(|_| bad());
            Ok((
                GridSummary {
                    variant: f[0].parse().map_err(|_| bad())?,
                    alpha: x(1)?,
                    beta: x(2)?,
                    tau: x(3)?,
                    attacks: n(4)?,
                    failed: n(5)?,
                    converged: n(6)?,
                    l2: Stat { mean: x(7)?, std: x(8)? },
                    linf: Stat { mean: x(9)?, std: x(10)? },
                    iou: Stat { mean: x(11)?, std: x(12)? },
                    pa: Stat { mean: x(13)?, std: x(14)? },
                },
                f[15] == "1",
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(iou: f64, l2: f64) -> GridSummary {
        GridSummary {
            variant: Variant::Asm,
            alpha: l2,
            beta: 0.0,
            tau: 0.0,
            attacks: 3,
            failed: 0,
            converged: 0,
            l2: Stat { mean: l2, std: 0.0 },
            linf: Stat::default(),
            iou: Stat { mean: iou, std: 0.0 },
            pa: Stat::default(),
        }
    }

    #[test]
    fn stats() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[7.0]).std, 0.0);
    }

    #[test]
    fn headline_prefers_iou_then_lower_l2() {
        let rows = [row(0.5, 1.0), row(0.9, 3.0), row(0.9, 2.0), row(0.8, 0.1)];
        assert_eq!(select_headline(&rows).unwrap(), &rows[2]);
        let mut empty = row(1.0, 0.0);
        empty.attacks = 0;
        assert_eq!(select_headline(&[empty.clone(), rows[0].clone()]).unwrap(), &rows[0]);
        assert!(select_headline(&[empty]).is_none());
    }

    #[test]
    fn grid_scaling() {
        let g = MultiplierGrid::default();
        let configs = g.configs(Variant::Asma, &AttackSettings::default());
        assert_eq!(configs.len(), 3);
        assert_eq!(configs[0].beta, 1e-6 * g.scale);
        assert_eq!(configs[0].tau, 1e-7 * g.scale);
        assert_eq!(g.configs(Variant::Ssm, &AttackSettings::default()).len(), 4);
    }

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig::new(1);
        assert!(c.validate().is_ok());
        c.samples_per_variant = 1;
        assert!(c.validate().is_err());
        c.samples_per_variant = 65;
        assert!(c.validate().is_err());
        c.samples_per_variant = 4;
        c.grid.betas.clear();
        assert!(c.validate().is_err());
        c.variants = vec![Variant::Ssm];
        assert!(c.validate().is_ok());
    }
}
