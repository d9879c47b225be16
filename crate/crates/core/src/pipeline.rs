//! End-to-end pipeline: scribbles -> supervoxels -> pseudo labels + edges ->
//! optional reference forward pass and losses -> evaluation.
//!
//! Every intermediate is written to the output directory and listed, with
//! its SHA-256, in `manifest.json`. Errors carry the name of the stage that
//! failed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{total_loss, AbParams, BoundaryLossKind, LossBreakdown, LossConfig, LossInputs, TotalLossWeights};
use crate::metrics::{evaluate, MetricsReport};
use crate::nifti::{read_binary, read_labels, read_nifti, read_volume, ToNifti};
use crate::propagation::{propagate, EdgeDetector, GradientEdges, PrecomputedEdges, PseudoLabels};
use crate::refnet::{build, NetConfig};
use crate::scribble::{simulate_scribbles, ScribbleSet};
use crate::supervoxel::{slic3d, SlicParams};
use crate::volume::{LabelVolume, Origin};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub image: PathBuf,
    /// Scribble volume (255 = unannotated); simulated from `gt` when absent.
    pub scribbles: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    /// Precomputed binary edge volume replacing the gradient detector.
    pub edges: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub num_classes: Option<u16>,
    /// `None` picks one supervoxel per thousand voxels.
    pub slic: Option<SlicParams>,
    pub scribble_margin: usize,
    pub edge_threshold: f64,
    pub ab: AbParams,
    pub loss_weights: TotalLossWeights,
    pub boundary_loss: BoundaryLossKind,
    pub patch_shape: [usize; 3],
    pub run_forward: bool,
    pub base_filters: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            image: PathBuf::new(),
            scribbles: None,
            gt: None,
            edges: None,
            output_dir: PathBuf::from("out"),
            num_classes: None,
            slic: None,
            scribble_margin: 10,
            edge_threshold: GradientEdges::default().threshold,
            ab: AbParams::default(),
            loss_weights: TotalLossWeights::default(),
            boundary_loss: BoundaryLossKind::default(),
            patch_shape: [224, 224, 32],
            run_forward: false,
            base_filters: 8,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Parses a JSON config; relative paths are resolved against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.image);
        resolve(&mut cfg.output_dir);
        for p in [&mut cfg.scribbles, &mut cfg.gt, &mut cfg.edges].into_iter().flatten() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.as_os_str().is_empty() {
            return Err(Error::InvalidConfig("`image` is required".into()));
        }
        let inputs = [Some(&self.image), self.scribbles.as_ref(), self.gt.as_ref(), self.edges.as_ref()];
        for p in inputs.into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "input does not exist"),
                ));
            }
        }
        if self.scribbles.is_none() && self.gt.is_none() {
            return Err(Error::InvalidConfig("need `scribbles` or `gt` to simulate them from".into()));
        }
        if self.scribble_margin == 0 {
            return Err(Error::InvalidConfig("scribble_margin must be >= 1".into()));
        }
        if self.patch_shape.contains(&0) {
            return Err(Error::InvalidConfig("patch_shape entries must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub config: PipelineConfig,
    pub stages: Vec<String>,
    pub supervoxels: usize,
    pub confident_voxels: usize,
    pub edge_voxels: usize,
    pub loss: Option<LossBreakdown>,
    pub eval: Option<MetricsReport>,
    pub artifacts: Vec<Artifact>,
}

struct Writer {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
}

impl Writer {
    fn put_bytes(&mut self, name: &str, file: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.artifacts.push(Artifact {
            name: name.into(),
            file: file.into(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(())
    }

    fn put_nifti(&mut self, name: &str, img: &impl ToNifti) -> Result<()> {
        let bytes = img.to_nifti()?.to_bytes()?;
        self.put_bytes(name, &format!("{name}.nii"), &bytes)
    }

    fn put_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(value)?;
        self.put_bytes(name, &format!("{name}.json"), &bytes)
    }
}

/// Runs every stage and writes `manifest.json` next to the artifacts.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineManifest> {
    let mut stages = Vec::new();
    macro_rules! stage {
        ($name:literal, $body:expr) => {{
            stages.push($name.to_string());
            (|| -> Result<_> { $body })().map_err(|e| e.at_stage($name))?
        }};
    }

    let (image, gt) = stage!("load", {
        cfg.validate()?;
        let image = read_volume(&cfg.image)?;
        let gt = match &cfg.gt {
            Some(p) => Some(read_labels(p, cfg.num_classes)?),
            None => None,
        };
        if let Some(g) = &gt {
            g.geometry().check_same_shape(image.geometry(), "ground truth vs image")?;
        }
        fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
        Ok((image, gt))
    });
    let mut out = Writer {
        dir: cfg.output_dir.clone(),
        artifacts: Vec::new(),
    };

    let scribbles = stage!("scribbles", {
        let s = match (&cfg.scribbles, &gt) {
            (Some(p), _) => {
                let n = cfg.num_classes.or(gt.as_ref().map(LabelVolume::num_classes));
                ScribbleSet::from_nifti(&read_nifti(p)?, n)?
            }
            (None, Some(g)) => simulate_scribbles(g, cfg.scribble_margin)?,
            (None, None) => unreachable!("validated"),
        };
        s.geometry().check_same_shape(image.geometry(), "scribbles vs image")?;
        out.put_nifti("scribbles", &s)?;
        Ok(s)
    });

    let supervoxels = stage!("slic", {
        let params = cfg.slic.clone().unwrap_or_else(|| SlicParams::for_geometry(image.geometry()));
        let sv = slic3d(&image, &params)?;
        out.put_nifti("supervoxels", &sv)?;
        Ok(sv)
    });

    let pseudo = stage!("propagate", {
        let pl = propagate(&scribbles, &supervoxels)?;
        out.put_nifti("pseudo_mask", &pl.mask)?;
        out.put_nifti("confidence", &pl.confident)?;
        Ok(pl)
    });

    let edges = stage!("edges", {
        let e = match &cfg.edges {
            Some(p) => PrecomputedEdges(read_binary(p)?).detect(&image)?,
            None => GradientEdges {
                threshold: cfg.edge_threshold,
            }
            .detect(&image)?,
        };
        out.put_nifti("edges", &e)?;
        Ok(e)
    });

    let mut loss = None;
    let mut prediction = pseudo.mask.clone();
    if cfg.run_forward {
        let shape = image.shape();
        let patch_shape = cfg.patch_shape;
        let (outputs, patch, pl_patch, edge_patch) = stage!("forward", {
            let net_cfg = NetConfig::new(pseudo.mask.num_classes() as usize, cfg.seed).with_base_filters(cfg.base_filters);
            let net = build(&net_cfg)?;
            let patch = image.crop_or_pad(patch_shape, Origin::Center)?;
            let outputs = net.forward(&patch)?;
            out.put_nifti("boundary", &outputs.boundary)?;
            out.put_nifti("mask_init", &outputs.mask_init)?;
            out.put_nifti("mask_final", &outputs.mask_final)?;
            let pl_patch = PseudoLabels {
                mask: pseudo.mask.crop_or_pad(patch_shape, Origin::Center)?,
                confident: pseudo.confident.crop_or_pad(patch_shape, Origin::Center)?,
            };
            let edge_patch = edges.crop_or_pad(patch_shape, Origin::Center)?;
            Ok((outputs, patch, pl_patch, edge_patch))
        });
        loss = Some(stage!("loss", {
            let inputs = LossInputs {
                boundary: &outputs.boundary,
                edges: &edge_patch,
                mask_init: &outputs.mask_init,
                mask_final: &outputs.mask_final,
                pseudo: &pl_patch,
                image: &patch,
            };
            let config = LossConfig {
                ab: cfg.ab,
                weights: cfg.loss_weights,
                boundary_kind: cfg.boundary_loss,
            };
            let t = total_loss(&inputs, &config)?;
            out.put_json("loss", &t.breakdown)?;
            Ok(t.breakdown)
        }));
        // Map the patch prediction back onto the image grid.
        let mut back = [0i64; 3];
        for a in 0..3 {
            back[a] = -(patch_shape[a] as i64 - shape[a] as i64).div_euclid(2);
        }
        prediction = outputs.mask_final.argmax()?.crop_or_pad(shape, Origin::Corner(back))?;
    }

    let mut eval = None;
    if let Some(gt) = &gt {
        eval = Some(stage!("eval", {
            let report = evaluate(&prediction, gt)?;
            out.put_json("eval", &report)?;
            Ok(report)
        }));
    }

    let manifest = PipelineManifest {
        config: cfg.clone(),
        stages,
        supervoxels: supervoxels.count(),
        confident_voxels: pseudo.confident_count(),
        edge_voxels: edges.count(),
        loss,
        eval,
        artifacts: out.artifacts,
    };
    let path = cfg.output_dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_json() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"image": "a.nii"}"#).unwrap();
        assert_eq!(cfg.patch_shape, [224, 224, 32]);
        assert_eq!(cfg.ab.lambda2, 0.1);
        assert_eq!(cfg.loss_weights.beta1, 0.3);
        let again: PipelineConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(again, cfg);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"imgae": "a.nii"}"#).is_err());
    }

    #[test]
    fn missing_input_is_tagged_with_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            image: dir.path().join("missing.nii"),
            gt: Some(dir.path().join("gt.nii")),
            output_dir: dir.path().join("out"),
            ..Default::default()
        };
        match run_pipeline(&cfg) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "load"),
            other => panic!("expected stage error, got {other:?}"),
        }
    }
}
