//! The full processing chain: crop, filter, threshold, smooth, track.
//!
//! Every stage boundary is an integer-valued stack or a binary mask, so
//! running the stages one at a time through files gives exactly what
//! [`run`] computes in memory.

use std::fmt::Write as _;

use crate::config::{EdgeSource, PipelineConfig};
use crate::error::Result;
use crate::grid::{BinaryStack, ImageStack};
use crate::local_otsu::binarize_stack;
use crate::stack_io::{histogram_crop, rescale, RescaleTarget};
use crate::stfilter::filter_stack;
use crate::subsurf::subsurf_evolve_with_stats;
use crate::tracker::{track, TrackReport, Trajectory};

/// Removes the bright noise peak when `crop.p_noise > 0`.
pub fn crop_stage(raw: &ImageStack, cfg: &PipelineConfig) -> Result<ImageStack> {
    if cfg.crop.p_noise > 0.0 {
        histogram_crop(raw, cfg.crop)
    } else {
        Ok(raw.clone())
    }
}

/// Rescales to `[0, 1]`, filters, and rescales the result to integer
/// `[0, 255]`. Returns the filtered stack and the filter report.
pub fn filter_stage(cropped: &ImageStack, cfg: &PipelineConfig) -> Result<(ImageStack, String)> {
    let unit = rescale(cropped, RescaleTarget::Unit);
    let run = filter_stack(&unit, &cfg.filter)?;
    Ok((rescale(&run.stack, RescaleTarget::Byte), run.report()))
}

/// Local Otsu thresholding of the filtered stack followed by SUBSURF
/// smoothing. Edge weights come from the cropped input (or the filtered
/// stack, per `subsurf.edge_source`), rescaled to `[0, 1]`.
pub fn segment_stage(filtered: &ImageStack, cropped: &ImageStack, cfg: &PipelineConfig) -> Result<(BinaryStack, String)> {
    let raw_masks = binarize_stack(filtered, &cfg.otsu)?;
    let edge_image = match cfg.edge_source {
        EdgeSource::Original => rescale(cropped, RescaleTarget::Unit),
        EdgeSource::Filtered => rescale(filtered, RescaleTarget::Unit),
    };
    let (masks, stats) = subsurf_evolve_with_stats(&raw_masks, &edge_image, &cfg.subsurf)?;
    let mut s = String::new();
    writeln!(s, "stage=segment").unwrap();
    writeln!(s, "otsu_window={}", cfg.otsu.window.map_or("whole".to_string(), |w| w.to_string())).unwrap();
    writeln!(s, "otsu_delta={}", cfg.otsu.delta).unwrap();
    writeln!(s, "edge_source={}", cfg.edge_source.as_str()).unwrap();
    let join = |v: Vec<String>| v.join(",");
    writeln!(s, "otsu_area={}", join(raw_masks.iter().map(|m| m.count().to_string()).collect())).unwrap();
    writeln!(s, "subsurf_area={}", join(masks.iter().map(|m| m.count().to_string()).collect())).unwrap();
    writeln!(s, "subsurf_steps={}", join(stats.iter().map(|e| e.steps.to_string()).collect())).unwrap();
    writeln!(s, "subsurf_converged={}", stats.iter().all(|e| e.converged)).unwrap();
    Ok((masks, s))
}

/// Centres, partial trajectories and linking.
pub fn track_stage(masks: &[crate::grid::Mask], cfg: &PipelineConfig) -> Result<(Vec<Trajectory>, TrackReport)> {
    track(masks, &cfg.track)
}

/// All intermediate and final results of one run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub cropped: ImageStack,
    pub filtered: ImageStack,
    pub masks: BinaryStack,
    pub trajectories: Vec<Trajectory>,
    pub filter_report: String,
    pub segment_report: String,
    pub track_report: TrackReport,
}

impl PipelineRun {
    /// All stage reports, concatenated.
    pub fn report(&self) -> String {
        format!("{}\n{}\n{}", self.filter_report, self.segment_report, self.track_report.to_text())
    }
}

/// Runs every stage on an integer-valued input stack.
pub fn run(raw: &ImageStack, cfg: &PipelineConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let cropped = crop_stage(raw, cfg)?;
    let (filtered, filter_report) = filter_stage(&cropped, cfg)?;
    let (masks, segment_report) = segment_stage(&filtered, &cropped, cfg)?;
    let (trajectories, track_report) = track_stage(&masks, cfg)?;
    Ok(PipelineRun {
        cropped,
        filtered,
        masks,
        trajectories,
        filter_report,
        segment_report,
        track_report,
    })
}
