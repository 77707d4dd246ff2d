//! PNG panels for a single attack: source, target mask, adversarial image,
//! its predicted mask and the enhanced perturbation.

use std::fs;
use std::path::{Path, PathBuf};

use asma_core::{AttackReport, LabelMask, Sample};

use crate::error::{Error, Result};
use crate::files::{unit_to_byte, write_gray_png, write_image_png, write_mask_png};

/// Perturbations are displayed as `clip(0.5 + 100·(X_adv − X), 0, 1)`.
pub const PERTURBATION_GAIN: f32 = 100.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanelPaths {
    pub source: PathBuf,
    pub target: PathBuf,
    pub adversarial: PathBuf,
    pub prediction: PathBuf,
    pub perturbation: PathBuf,
}

impl PanelPaths {
    pub fn all(&self) -> [&Path; 5] {
        [&self.source, &self.target, &self.adversarial, &self.prediction, &self.perturbation]
    }
}

pub fn perturbation_bytes(source: &Sample, report: &AttackReport) -> Result<Vec<u8>> {
    let (_, h, w) = source.image.dims3("render")?;
    let delta = report.perturbation(&source.image)?;
    Ok(delta.as_slice()[..h * w]
        .iter()
        .map(|&d| unit_to_byte(0.5 + PERTURBATION_GAIN * d))
        .collect())
}

pub fn render_panel(source: &Sample, target: &LabelMask, report: &AttackReport, dir: &Path) -> Result<PanelPaths> {
    if report.source_id != source.id {
        return Err(Error::Config(format!(
            "report belongs to sample {}, not {}",
            report.source_id, source.id
        )));
    }
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let (_, h, w) = source.image.dims3("render")?;
    let paths = PanelPaths {
        source: dir.join("source.png"),
        target: dir.join("target_mask.png"),
        adversarial: dir.join("adversarial.png"),
        prediction: dir.join("adversarial_prediction.png"),
        perturbation: dir.join("perturbation_x100.png"),
    };
    write_image_png(&paths.source, &source.image)?;
    write_mask_png(&paths.target, target)?;
    write_image_png(&paths.adversarial, &report.adversarial)?;
    write_mask_png(&paths.prediction, &report.prediction)?;
    write_gray_png(&paths.perturbation, w, h, perturbation_bytes(source, report)?)?;
    Ok(paths)
}

/// Writes the adaptive optimization mask (pixels whose prediction differs
/// from the target) for each given prediction, as `adaptive_mask_KK.png`.
pub fn render_optimization_masks(target: &LabelMask, predictions: &[LabelMask], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    predictions
        .iter()
        .enumerate()
        .map(|(k, pred)| {
            target.check_same(pred, "render_optimization_masks")?;
            let pixels = target
                .as_slice()
                .iter()
                .zip(pred.as_slice())
                .map(|(t, p)| if t != p { 255 } else { 0 })
                .collect();
            let path = dir.join(format!("adaptive_mask_{k:02}.png"));
            write_gray_png(&path, target.width(), target.height(), pixels)?;
            Ok(path)
        })
        .collect()
}
