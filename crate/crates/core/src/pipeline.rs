//! The sender/receiver protocol: embed a message behind a trained field,
//! ship (field + extractor + manifest) with no viewpoint inside, recover the
//! message by re-rendering the keyed view, and measure how fast recovery
//! collapses as an attacker's viewpoint drifts off the key.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codec::{decoding_accuracy, rs_bpp, BitPlanes, CodecError};
use crate::extractor::{
    extract_bits, train_extractor, ExtractorConfig, ExtractorError, ExtractorParams,
    ExtractorTrainOptions,
};
use crate::field::{FieldError, FieldParams};
use crate::img::Image;
use crate::render::{render_image, JitterPolicy, RenderError, RenderOptions, ViewKey};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Extractor(#[from] ExtractorError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("extractor never reached exact recovery in {epochs} epochs (best accuracy {best_acc:.4}); raise the epoch budget or lower depth_planes")]
    NoConvergence { epochs: usize, best_acc: f64 },
    #[error("key does not fit this bundle: {0}")]
    KeyMismatch(String),
}

/// Everything the receiver needs besides the key. Render settings are pinned
/// here so both sides rasterize the secret view bit-identically. The
/// viewpoint itself never appears in this struct, and therefore never in
/// anything serialized from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub depth_planes: usize,
    pub height: usize,
    pub width: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub background: [f64; 3],
    pub jitter: JitterPolicy,
}

impl Manifest {
    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            n_coarse: self.n_coarse,
            n_fine: self.n_fine,
            background: self.background,
            jitter: self.jitter,
        }
    }
}

/// The published artifact: scene weights, backdoored extractor, manifest.
#[derive(Clone, Debug)]
pub struct StegoBundle {
    pub field: FieldParams,
    pub extractor: ExtractorParams,
    pub manifest: Manifest,
}

impl StegoBundle {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let m = &self.manifest;
        let e = &self.extractor.config;
        if m.depth_planes != e.depth_planes || m.height != e.height || m.width != e.width {
            return Err(PipelineError::KeyMismatch(format!(
                "manifest planes {}x{}x{} disagree with extractor {}x{}x{}",
                m.depth_planes, m.height, m.width, e.depth_planes, e.height, e.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EmbedOptions {
    /// Epoch budget for the overfit; embedding fails if exact recovery is
    /// not reached within it.
    pub max_epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub jitter_seed: u64,
    pub background: [f64; 3],
    /// Pool size override; by default 9 for inputs 96px and up, else 3.
    pub pool: Option<usize>,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            max_epochs: 5000,
            lr: 1e-5,
            seed: 0,
            n_coarse: 64,
            n_fine: 64,
            jitter_seed: 0,
            background: [1.0, 1.0, 1.0],
            pool: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EmbedReport {
    pub epochs_to_100: usize,
    pub wall_time_s: f64,
}

pub fn default_extractor_config(
    depth_planes: usize,
    height: usize,
    width: usize,
    pool: Option<usize>,
) -> ExtractorConfig {
    let mut config = ExtractorConfig::desk(depth_planes);
    config.height = height;
    config.width = width;
    config.pool = pool.unwrap_or(if height.min(width) >= 96 { 9 } else { 3 });
    config
}

fn render_view(
    field: &FieldParams,
    key: &ViewKey,
    opts: &RenderOptions,
) -> Result<Image, RenderError> {
    render_image(&field.coarse_eval(), &field.fine_eval(), key, opts)
}

/// Trains the backdoor: renders the keyed view, spreads the framed message
/// over D bit planes, and overfits the extractor until it reproduces every
/// bit of that one image. The returned report's wall time covers the
/// extractor training loop.
pub fn embed(
    field: &FieldParams,
    key: &ViewKey,
    message: &[u8],
    depth_planes: usize,
    opts: &EmbedOptions,
) -> Result<(StegoBundle, EmbedReport), PipelineError> {
    key.validate()?;
    let planes = BitPlanes::from_message(message, depth_planes, key.height, key.width)?;
    let manifest = Manifest {
        depth_planes,
        height: key.height,
        width: key.width,
        n_coarse: opts.n_coarse,
        n_fine: opts.n_fine,
        background: opts.background,
        jitter: JitterPolicy::Seeded(opts.jitter_seed),
    };
    let secret_image = render_view(field, key, &manifest.render_options())?;
    let config = default_extractor_config(depth_planes, key.height, key.width, opts.pool);
    let train_opts = ExtractorTrainOptions {
        epochs: opts.max_epochs,
        lr: opts.lr,
        seed: opts.seed,
        stop_when_exact: true,
    };
    let started = Instant::now();
    let run = train_extractor(&secret_image, &planes, &config, &train_opts)?;
    let wall_time_s = started.elapsed().as_secs_f64();
    let Some(epochs_to_100) = run.first_exact_epoch else {
        let best_acc = run.trace.iter().map(|e| e.acc).fold(0.0, f64::max);
        return Err(PipelineError::NoConvergence {
            epochs: opts.max_epochs,
            best_acc,
        });
    };
    let bundle = StegoBundle {
        field: field.clone(),
        extractor: run.params,
        manifest,
    };
    bundle.validate()?;
    Ok((
        bundle,
        EmbedReport {
            epochs_to_100,
            wall_time_s,
        },
    ))
}

fn check_key(bundle: &StegoBundle, key: &ViewKey) -> Result<(), PipelineError> {
    if key.width != bundle.manifest.width || key.height != bundle.manifest.height {
        return Err(PipelineError::KeyMismatch(format!(
            "key view {}x{} vs bundle {}x{}",
            key.width, key.height, bundle.manifest.width, bundle.manifest.height
        )));
    }
    Ok(())
}

/// Raw bit planes recovered at a viewpoint, before any message framing.
pub fn extract_planes(bundle: &StegoBundle, key: &ViewKey) -> Result<BitPlanes, PipelineError> {
    check_key(bundle, key)?;
    let image = render_view(&bundle.field, key, &bundle.manifest.render_options())?;
    Ok(extract_bits(&bundle.extractor, &image)?)
}

/// Receiver path: render the keyed view, run the extractor, unframe the
/// message. A wrong key typically surfaces as a corruption error from the
/// frame header rather than a clean failure.
pub fn extract_message(bundle: &StegoBundle, key: &ViewKey) -> Result<Vec<u8>, PipelineError> {
    let planes = extract_planes(bundle, key)?;
    Ok(planes.to_message()?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Theta,
    Phi,
    Both,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Theta => "theta",
            SweepAxis::Phi => "phi",
            SweepAxis::Both => "both",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "theta" => Ok(SweepAxis::Theta),
            "phi" => Ok(SweepAxis::Phi),
            "both" => Ok(SweepAxis::Both),
            other => Err(format!("unknown sweep axis '{other}' (theta|phi|both)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SweepRow {
    pub theta_deg: f64,
    pub phi_deg: f64,
    pub offset_deg: f64,
    pub acc: f64,
    pub rs_bpp: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("theta_deg,phi_deg,offset_deg,acc,rs_bpp\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.theta_deg, r.phi_deg, r.offset_deg, r.acc, r.rs_bpp
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// The offsets exercised by the reference viewpoint-sensitivity experiment.
pub fn default_sweep_offsets() -> Vec<f64> {
    vec![0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 30.0, 60.0, 90.0]
}

/// Attacker's-eye evaluation: nudge the key along an axis by each offset,
/// re-extract, and score the raw planes against the embedded truth. Rows
/// come back sorted by offset.
pub fn attacker_sweep(
    bundle: &StegoBundle,
    true_key: &ViewKey,
    true_planes: &BitPlanes,
    axis: SweepAxis,
    offsets: &[f64],
) -> Result<SweepReport, PipelineError> {
    check_key(bundle, true_key)?;
    if true_planes.depth() != bundle.manifest.depth_planes {
        return Err(PipelineError::KeyMismatch(format!(
            "reference planes depth {} vs bundle {}",
            true_planes.depth(),
            bundle.manifest.depth_planes
        )));
    }
    let mut sorted: Vec<f64> = offsets.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite offsets"));
    let d = bundle.manifest.depth_planes;
    let mut rows = Vec::with_capacity(sorted.len());
    for off in sorted {
        let key = match axis {
            SweepAxis::Theta => true_key.offset(off, 0.0),
            SweepAxis::Phi => true_key.offset(0.0, off),
            SweepAxis::Both => true_key.offset(off, off),
        };
        let planes = extract_planes(bundle, &key)?;
        let acc = decoding_accuracy(planes.bits(), true_planes.bits())?;
        rows.push(SweepRow {
            theta_deg: key.theta_deg,
            phi_deg: key.phi_deg,
            offset_deg: off,
            acc,
            rs_bpp: rs_bpp(d, 1.0 - acc),
        });
    }
    Ok(SweepReport { axis, rows })
}

/// Angle offsets of the standing off-key evaluation set: every combination
/// of a nonzero azimuth step and a small elevation step.
pub fn off_key_offsets() -> Vec<(f64, f64)> {
    let thetas = [-90.0, -45.0, -20.0, -10.0, -5.0, 5.0, 10.0, 20.0, 45.0, 90.0];
    let phis = [0.0, -10.0, 10.0];
    let mut out = Vec::with_capacity(thetas.len() * phis.len());
    for &t in &thetas {
        for &p in &phis {
            out.push((t, p));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CapacityRow {
    pub depth_planes: usize,
    pub epochs_to_100: usize,
    pub wall_time_s: f64,
    pub secret_acc: f64,
    pub offkey_mean_acc: f64,
    pub offkey_mean_rsbpp: f64,
}

pub fn capacity_csv(rows: &[CapacityRow]) -> String {
    let mut out =
        String::from("depth_planes,epochs_to_100,wall_time_s,secret_acc,offkey_mean_acc,offkey_mean_rsbpp\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.depth_planes,
            r.epochs_to_100,
            r.wall_time_s,
            r.secret_acc,
            r.offkey_mean_acc,
            r.offkey_mean_rsbpp
        ));
    }
    out
}

/// One embed per plane depth, scored on the secret view and on the standing
/// off-key set. Off-key views depend only on the field, so they are rendered
/// once and reused across depths.
pub fn capacity_evaluation(
    field: &FieldParams,
    key: &ViewKey,
    message: &[u8],
    depth_list: &[usize],
    opts: &EmbedOptions,
) -> Result<Vec<CapacityRow>, PipelineError> {
    if depth_list.is_empty() {
        return Err(PipelineError::KeyMismatch("depth_list is empty".into()));
    }
    key.validate()?;
    let render_opts = RenderOptions {
        n_coarse: opts.n_coarse,
        n_fine: opts.n_fine,
        background: opts.background,
        jitter: JitterPolicy::Seeded(opts.jitter_seed),
    };
    let off_views: Vec<Image> = off_key_offsets()
        .into_iter()
        .map(|(dt, dp)| render_view(field, &key.offset(dt, dp), &render_opts))
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::with_capacity(depth_list.len());
    for &d in depth_list {
        let (bundle, report) = embed(field, key, message, d, opts)?;
        let true_planes = BitPlanes::from_message(message, d, key.height, key.width)?;
        let secret_planes = extract_planes(&bundle, key)?;
        let secret_acc = decoding_accuracy(secret_planes.bits(), true_planes.bits())?;
        let mut acc_sum = 0.0;
        for view in &off_views {
            let planes = extract_bits(&bundle.extractor, view)?;
            acc_sum += decoding_accuracy(planes.bits(), true_planes.bits())?;
        }
        let offkey_mean_acc = acc_sum / off_views.len() as f64;
        rows.push(CapacityRow {
            depth_planes: d,
            epochs_to_100: report.epochs_to_100,
            wall_time_s: report.wall_time_s,
            secret_acc,
            offkey_mean_acc,
            offkey_mean_rsbpp: rs_bpp(d, 1.0 - offkey_mean_acc),
        });
    }
    Ok(rows)
}
