//! `scribsup`: scribble-supervised segmentation toolkit.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use scribsup::losses::{total_loss, AbParams, BoundaryLossKind, LossConfig, LossInputs, TotalLossWeights};
use scribsup::metrics::evaluate;
use scribsup::nifti::{read_binary, read_labels, read_nifti, read_prob, read_volume, write_nifti};
use scribsup::pipeline::{run_pipeline, PipelineConfig};
use scribsup::propagation::{propagate, EdgeDetector, GradientEdges, PrecomputedEdges, PseudoLabels};
use scribsup::refnet::{build, NetConfig};
use scribsup::scribble::{simulate_scribbles, ScribbleSet};
use scribsup::supervoxel::{slic3d, SlicParams, SupervoxelMap};
use scribsup::Result;

#[derive(Parser)]
#[command(name = "scribsup", version, about = "Scribble-supervised volumetric segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition an image into 3D SLIC supervoxels.
    Slic(SlicArgs),
    /// Derive scribbles from a ground-truth label volume.
    SimulateScribbles(SimulateArgs),
    /// Propagate scribbles to supervoxels (pseudo mask + confidence mask).
    Propagate(PropagateArgs),
    /// Compute the static edge boundary of an image.
    Edges(EdgesArgs),
    /// Run the reference network on a patch.
    Forward(ForwardArgs),
    /// Evaluate the total training loss on network outputs.
    Loss(LossArgs),
    /// Compute Dice, HD95 and precision per class.
    Eval(EvalArgs),
    /// Run the full pipeline from a JSON config.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct SlicArgs {
    /// Input intensity image (.nii).
    #[arg(long)]
    input: PathBuf,
    /// Output supervoxel ID volume (.nii, int16).
    #[arg(long, alias = "out")]
    output: PathBuf,
    /// Number of supervoxels; defaults to one per 1000 voxels.
    #[arg(long)]
    k: Option<usize>,
    /// Spatial weight m of the SLIC distance.
    #[arg(long, default_value_t = 10.0)]
    compactness: f64,
    /// Number of assignment rounds.
    #[arg(long, alias = "iterations", default_value_t = 10)]
    iters: usize,
}

#[derive(Args)]
struct SimulateArgs {
    /// Ground-truth label volume (.nii).
    #[arg(long)]
    gt: PathBuf,
    /// Output scribble volume; 255 marks unannotated voxels.
    #[arg(long, alias = "out")]
    output: PathBuf,
    /// In-plane dilation radius (voxels) of the background ring.
    #[arg(long, default_value_t = 10)]
    margin: usize,
    /// Number of classes including background; inferred when omitted.
    #[arg(long)]
    classes: Option<u16>,
}

#[derive(Args)]
struct PropagateArgs {
    /// Scribble volume (.nii, 255 = unannotated).
    #[arg(long)]
    scribbles: PathBuf,
    /// Supervoxel ID volume (.nii).
    #[arg(long)]
    supervoxels: PathBuf,
    /// Number of classes including background; inferred from the
    /// scribbles when omitted.
    #[arg(long)]
    classes: Option<u16>,
    /// Output pseudo mask (.nii).
    #[arg(long)]
    output_mask: PathBuf,
    /// Output confidence mask (.nii).
    #[arg(long)]
    output_conf: PathBuf,
}

#[derive(Args)]
struct EdgesArgs {
    /// Input intensity image (.nii).
    #[arg(long)]
    input: PathBuf,
    /// Output binary edge volume (.nii).
    #[arg(long, alias = "out")]
    output: PathBuf,
    /// Threshold on the per-slice normalised gradient magnitude, in (0, 1).
    #[arg(long, default_value_t = 0.2)]
    threshold: f64,
    /// Use this precomputed binary edge volume instead of the gradient
    /// detector (shape-checked against the input).
    #[arg(long)]
    edges: Option<PathBuf>,
}

#[derive(Args)]
struct ForwardArgs {
    /// Input patch (.nii); x and y must be multiples of 16, z of 4 with the
    /// default depth.
    #[arg(long)]
    input: PathBuf,
    /// Number of classes including background.
    #[arg(long)]
    classes: usize,
    /// Weight initialisation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Channels at the finest level.
    #[arg(long, default_value_t = 8)]
    base_filters: usize,
    /// Prefix for `<prefix>_boundary.nii`, `_mask_init.nii`, `_mask_final.nii`
    /// and `_summary.json`.
    #[arg(long)]
    out_prefix: PathBuf,
    /// Also write `<prefix>_weights.bin` and `<prefix>_weights.json`.
    #[arg(long)]
    save_weights: bool,
}

#[derive(Args)]
struct LossArgs {
    /// Intensity image matching the outputs (.nii).
    #[arg(long)]
    image: PathBuf,
    /// Predicted boundary map b (.nii).
    #[arg(long)]
    boundary_pred: PathBuf,
    /// Static edge volume (.nii).
    #[arg(long)]
    edges: PathBuf,
    /// Initial mask probabilities (.nii, channels stacked along z).
    #[arg(long)]
    pred_init: PathBuf,
    /// Final mask probabilities (.nii, channels stacked along z).
    #[arg(long)]
    pred_final: PathBuf,
    /// Pseudo mask (.nii).
    #[arg(long)]
    pseudo: PathBuf,
    /// Confidence mask (.nii).
    #[arg(long)]
    conf: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    lambda1: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda2: f64,
    /// Smoothing inside the surface term's square root.
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,
    /// Weight of the boundary loss.
    #[arg(long, default_value_t = 0.3)]
    beta1: f64,
    /// Weight of the active boundary loss.
    #[arg(long, default_value_t = 0.3)]
    beta2: f64,
    /// Use the positive-term-only boundary cross-entropy.
    #[arg(long)]
    literal_bry: bool,
    /// Output JSON report; printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also write gradients as `<prefix>_grad_boundary.nii`,
    /// `_grad_init.nii` and `_grad_final.nii`.
    #[arg(long)]
    grad_prefix: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted label volume (.nii).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth label volume (.nii).
    #[arg(long)]
    gt: PathBuf,
    /// Number of classes including background; inferred from both when omitted.
    #[arg(long)]
    classes: Option<u16>,
    /// Output JSON report; printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// JSON pipeline config; relative paths resolve against its directory.
    #[arg(long)]
    config: PathBuf,
}

fn write_json(value: &serde_json::Value, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| scribsup::Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Slic(a) => {
            let vol = read_volume(&a.input)?;
            let mut params = a.k.map(SlicParams::new).unwrap_or_else(|| SlicParams::for_geometry(vol.geometry()));
            params.compactness = a.compactness;
            params.iterations = a.iters;
            let map = slic3d(&vol, &params)?;
            write_nifti(&map, &a.output)?;
            eprintln!("{} supervoxels", map.count());
        }
        Command::SimulateScribbles(a) => {
            let gt = read_labels(&a.gt, a.classes)?;
            let s = simulate_scribbles(&gt, a.margin)?;
            write_nifti(&s, &a.output)?;
            eprintln!("{} scribbled voxels", s.len());
        }
        Command::Propagate(a) => {
            let scribbles = ScribbleSet::from_nifti(&read_nifti(&a.scribbles)?, a.classes)?;
            let sv = SupervoxelMap::from_nifti(&read_nifti(&a.supervoxels)?)?;
            let pl = propagate(&scribbles, &sv)?;
            write_nifti(&pl.mask, &a.output_mask)?;
            write_nifti(&pl.confident, &a.output_conf)?;
            eprintln!("{} confident voxels", pl.confident_count());
        }
        Command::Edges(a) => {
            let image = read_volume(&a.input)?;
            let edges = match &a.edges {
                Some(p) => PrecomputedEdges(read_binary(p)?).detect(&image)?,
                None => GradientEdges { threshold: a.threshold }.detect(&image)?,
            };
            write_nifti(&edges, &a.output)?;
            eprintln!("{} edge voxels", edges.count());
        }
        Command::Forward(a) => {
            let patch = read_volume(&a.input)?;
            let net = build(&NetConfig::new(a.classes, a.seed).with_base_filters(a.base_filters))?;
            let out = net.forward(&patch)?;
            write_nifti(&out.boundary, with_suffix(&a.out_prefix, "_boundary.nii"))?;
            write_nifti(&out.mask_init, with_suffix(&a.out_prefix, "_mask_init.nii"))?;
            write_nifti(&out.mask_final, with_suffix(&a.out_prefix, "_mask_final.nii"))?;
            if a.save_weights {
                net.save_weights(&with_suffix(&a.out_prefix, "_weights"))?;
            }
            let [x, y, z] = patch.shape();
            let summary = json!({
                "config": net.config(),
                "params": net.count_params(),
                "input_shape": [x, y, z],
                "boundary_shape": [x, y, z, 1],
                "mask_shape": [x, y, z, out.mask_final.channels()],
                "attention_shapes": out.attention_maps.iter().map(|m| m.shape()).collect::<Vec<_>>(),
            });
            write_json(&summary, Some(&with_suffix(&a.out_prefix, "_summary.json")))?;
        }
        Command::Loss(a) => {
            let image = read_volume(&a.image)?;
            let boundary = read_prob(&a.boundary_pred)?;
            let edges = read_binary(&a.edges)?;
            let mask_init = read_prob(&a.pred_init)?;
            let mask_final = read_prob(&a.pred_final)?;
            let n = mask_final.channels() as u16;
            let pseudo = PseudoLabels {
                mask: read_labels(&a.pseudo, Some(n))?,
                confident: read_binary(&a.conf)?,
            };
            let config = LossConfig {
                ab: AbParams {
                    lambda1: a.lambda1,
                    lambda2: a.lambda2,
                    epsilon: a.epsilon,
                },
                weights: TotalLossWeights {
                    beta1: a.beta1,
                    beta2: a.beta2,
                },
                boundary_kind: if a.literal_bry {
                    BoundaryLossKind::Literal
                } else {
                    BoundaryLossKind::TwoSided
                },
            };
            let inputs = LossInputs {
                boundary: &boundary,
                edges: &edges,
                mask_init: &mask_init,
                mask_final: &mask_final,
                pseudo: &pseudo,
                image: &image,
            };
            let t = total_loss(&inputs, &config)?;
            if let Some(prefix) = &a.grad_prefix {
                write_nifti(&t.grad_boundary, with_suffix(prefix, "_grad_boundary.nii"))?;
                write_nifti(&t.grad_init, with_suffix(prefix, "_grad_init.nii"))?;
                write_nifti(&t.grad_final, with_suffix(prefix, "_grad_final.nii"))?;
            }
            write_json(&serde_json::to_value(&t.breakdown)?, a.report.as_deref())?;
        }
        Command::Eval(a) => {
            let (pred, gt) = match a.classes {
                Some(n) => (read_labels(&a.pred, Some(n))?, read_labels(&a.gt, Some(n))?),
                None => {
                    let (p, g) = (read_labels(&a.pred, None)?, read_labels(&a.gt, None)?);
                    let n = p.num_classes().max(g.num_classes());
                    (read_labels(&a.pred, Some(n))?, read_labels(&a.gt, Some(n))?)
                }
            };
            let report = evaluate(&pred, &gt)?;
            write_json(&serde_json::to_value(&report)?, a.report.as_deref())?;
        }
        Command::Pipeline(a) => {
            let cfg = PipelineConfig::load(&a.config)?;
            let manifest = run_pipeline(&cfg)?;
            eprintln!(
                "{} artifacts written to {}",
                manifest.artifacts.len(),
                cfg.output_dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
