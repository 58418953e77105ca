use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use saferoad::apcam::{CamMethod, CamRequest};
use saferoad::classifier::Backbone;
use saferoad::hotspot::ClusterParams;
use saferoad::imagery::Label;
use saferoad::inpaint::{Design, Prompt};

use crate::error::{GatewayError, Result};
use crate::pipeline;
use crate::workspace::Workspace;

#[derive(Debug, Parser)]
#[command(name = "saferoad", version, about = "Accident hotspot analysis and road redesign pipeline")]
pub struct Cli {
    /// Workspace directory.
    #[arg(short, long, global = true, env = "SAFEROAD_WORKSPACE", default_value = ".")]
    pub workspace: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create the workspace layout and a default config.toml.
    Init,
    /// Parse an accident CSV into the workspace.
    Ingest {
        csv: PathBuf,
        /// Column mapping (TOML or JSON); defaults to the NYC export columns.
        #[arg(long)]
        schema: Option<PathBuf>,
    },
    /// Cluster ingested events into hotspots.
    Cluster {
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        min_samples: Option<usize>,
    },
    /// Capture street imagery around hotspots and sampled non-hotspots.
    Fetch {
        #[arg(long)]
        fov: Option<f64>,
        #[arg(long)]
        per_image_fov: Option<f64>,
        /// Read captures from this directory instead of the imagery API.
        #[arg(long)]
        fixture_dir: Option<PathBuf>,
    },
    /// Train the hotspot classifier on the manifest's train split.
    Train {
        #[arg(long)]
        backbone: Option<Backbone>,
        #[arg(long)]
        abm: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute CAM heatmaps and AP masks.
    Cam {
        #[arg(long)]
        method: Option<CamMethod>,
        #[arg(long)]
        threshold: Option<f64>,
        /// One image; all hotspot images when omitted.
        #[arg(long)]
        image: Option<String>,
    },
    /// Inpaint a masked image and open a redesign session.
    Inpaint {
        #[arg(long)]
        image: String,
        #[arg(long)]
        mask: String,
        #[arg(long, conflicts_with = "prompt")]
        design: Option<Design>,
        /// Free-text prompt instead of a catalog design.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        denoise: Option<f64>,
        #[arg(long)]
        candidates: Option<u32>,
    },
    /// Choose a candidate for a session and score it.
    Select {
        #[arg(long)]
        session: String,
        #[arg(long)]
        candidate: String,
    },
    /// AP saliency ratios for every hotspot image.
    Saliency,
    /// Aggregate scored sessions into reports/latest.{json,csv}.
    Report,
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
    /// Fill the workspace with a synthetic labelled dataset.
    ToyWorkspace {
        #[arg(long, default_value_t = 240)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Runs one command and returns its JSON summary.
pub fn run(cli: Cli) -> Result<Value> {
    let ws = match cli.command {
        Command::Init => Workspace::init(&cli.workspace)?,
        _ => Workspace::open(&cli.workspace)?,
    };
    match cli.command {
        Command::Init => Ok(json!({"workspace": ws.root().display().to_string()})),
        Command::Ingest { csv, schema } => pipeline::ingest(&ws, &csv, schema.as_deref()),
        Command::Cluster { eps, min_samples } => {
            let params = ClusterParams {
                eps_meters: eps.unwrap_or(ws.config.cluster.eps_meters),
                min_samples: min_samples.unwrap_or(ws.config.cluster.min_samples),
            };
            pipeline::cluster(&ws, &params)
        }
        Command::Fetch {
            fov,
            per_image_fov,
            fixture_dir,
        } => pipeline::fetch(
            &ws,
            fov.unwrap_or(ws.config.capture.total_fov),
            per_image_fov.unwrap_or(ws.config.capture.per_image_fov),
            fixture_dir.as_deref(),
        ),
        Command::Train {
            backbone,
            abm,
            epochs,
            seed,
        } => {
            let mut spec = ws.config.model_spec();
            if let Some(b) = backbone {
                spec.backbone = b;
            }
            spec.abm_enabled |= abm;
            let mut cfg = ws.config.train.clone();
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            pipeline::train_model(&ws, &spec, &cfg)
        }
        Command::Cam {
            method,
            threshold,
            image,
        } => {
            let model = ws.load_model()?;
            let request = CamRequest::new(method.unwrap_or(ws.config.cam.method));
            let threshold = threshold.unwrap_or(ws.config.cam.threshold);
            let ids: Vec<String> = match image {
                Some(id) => vec![id],
                None => ws
                    .manifest()?
                    .records
                    .iter()
                    .filter(|r| r.label == Label::Hotspot)
                    .map(|r| r.image_id.clone())
                    .collect(),
            };
            let mut masks = Vec::new();
            for id in ids {
                let out = pipeline::cam(&ws, &model, &id, &request, threshold)?;
                masks.push(json!({"image_id": id, "mask_id": out.mask_id, "mask_area": out.mask_area}));
            }
            Ok(json!({"masks": masks}))
        }
        Command::Inpaint {
            image,
            mask,
            design,
            prompt,
            seed,
            cfg_scale,
            denoise,
            candidates,
        } => {
            let mut params = ws.config.inpaint.defaults.clone();
            if let Some(d) = design {
                params.prompt = Prompt::Design(d);
            }
            if let Some(p) = prompt {
                params.prompt = Prompt::Text(p);
            }
            if let Some(s) = seed {
                params.seed = s;
            }
            if let Some(c) = cfg_scale {
                params.cfg_scale = c;
            }
            if let Some(d) = denoise {
                params.denoise_strength = d;
            }
            if let Some(n) = candidates {
                params.n_candidates = n;
            }
            params.validate()?;
            let payload = pipeline::InpaintJobPayload {
                image_id: image,
                mask_id: mask,
                params,
            };
            let (job, warnings) = pipeline::submit_inpaint(&ws, payload)?;
            let backend = ws.inpaint_backend()?;
            let job = pipeline::run_inpaint_job(&ws, backend.as_ref(), &job.job_id)?;
            if let Some(err) = &job.error {
                return Err(GatewayError::unavailable("BACKEND_UNAVAILABLE", err.clone()));
            }
            Ok(json!({
                "job_id": job.job_id,
                "session_id": job.job_id,
                "state": job.state,
                "result": job.result,
                "warnings": warnings,
            }))
        }
        Command::Select { session, candidate } => {
            let model = ws.load_model()?;
            let s = pipeline::select_candidate(&ws, &model, &session, &candidate)?;
            Ok(json!(s))
        }
        Command::Saliency => {
            let model = ws.load_model()?;
            let backend = ws.saliency_backend()?;
            let report = pipeline::saliency_batch(&ws, &model, backend.as_ref())?;
            Ok(json!({
                "average_percent": report.average,
                "images": report.per_image.len(),
                "excluded": report.excluded_count(),
                "csv": "reports/saliency.csv",
            }))
        }
        Command::Report => {
            let r = pipeline::report(&ws)?;
            Ok(json!({
                "model": r.model,
                "sessions": r.scored_sessions,
                "mean_p_before": r.mean_p_before,
                "mean_p_after": r.mean_p_after,
                "mean_relative_drop_percent": r.mean_relative_drop_percent,
                "drop_of_means_percent": r.drop_of_means_percent,
                "json": "reports/latest.json",
                "csv": "reports/latest.csv",
            }))
        }
        Command::Serve { port, host } => {
            let addr = SocketAddr::new(host, port.unwrap_or(ws.config.server.port));
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| GatewayError::internal(e.to_string()))?;
            rt.block_on(crate::api::serve(ws, addr))?;
            Ok(json!({"stopped": true}))
        }
        Command::ToyWorkspace { n, seed } => {
            let ws = Workspace::init(ws.root())?;
            pipeline::toy_workspace(&ws, n, seed)
        }
    }
}
