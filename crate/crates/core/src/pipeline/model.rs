//! Full model assembly: encoder, fusion modules and the five task heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{Ctlf, Cvgf};
use crate::grid::{
    build_grid, build_spatial_mask, build_temporal_mask, AttentionMask, CameraSetting, Encoder,
    GridLayout, MaskKind,
};
use crate::heads::{CameraHead, DenseDecoder, DenseHeads, Queries, TrackHead, TrackOutputs};
use crate::numerics::nn::Init;
use crate::numerics::{Graph, ParamStore, Tensor, Var};

use super::config::ModelConfig;

/// Parameter groups, in the order they are created.
pub const GROUPS: [&str; 9] = [
    "encoder",
    "cvgf",
    "ctlf",
    "head_cam",
    "head_dense",
    "head_depth",
    "head_mask",
    "head_point",
    "head_track",
];
pub const BACKBONE_GROUPS: [&str; 3] = ["encoder", "cvgf", "ctlf"];
/// `head_dense` is the decoder shared by the depth, mask and point projections.
pub const HEAD_GROUPS: [&str; 6] = [
    "head_cam",
    "head_dense",
    "head_depth",
    "head_mask",
    "head_point",
    "head_track",
];

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    encoder: Encoder,
    cvgf: Cvgf,
    ctlf: Ctlf,
    camera: CameraHead,
    decoder: DenseDecoder,
    dense: DenseHeads,
    track: TrackHead,
}

/// Spatial and temporal features of one token grid.
#[derive(Debug, Clone, Copy)]
pub struct Features {
    pub layout: GridLayout,
    pub spatial: Var,
    pub temporal: Var,
}

/// Which heads to evaluate. Tracking pulls in the camera and dense heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Need {
    pub camera: bool,
    pub depth: bool,
    pub mask: bool,
    pub point: bool,
    pub track: bool,
}

impl Need {
    pub fn all() -> Self {
        Self {
            camera: true,
            depth: true,
            mask: true,
            point: true,
            track: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Outputs {
    /// `[F × 9]`.
    pub cameras: Option<Var>,
    /// `[F·H·W]`.
    pub depth: Option<Var>,
    /// `[F·H·W]` probabilities.
    pub mask: Option<Var>,
    /// `[F·H·W × 3]`.
    pub points: Option<Var>,
    pub tracks: Option<TrackOutputs>,
}

impl Model {
    /// Creates the model with freshly initialized parameters.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let f = &config.fusion;
        let [_, _, c3] = config.decoder_channels;
        let model = Self {
            config: config.clone(),
            encoder: Encoder::init(&mut init, config.patch, config.channels, f.dim, config.max_views, config.max_times),
            cvgf: Cvgf::init(&mut init, f),
            ctlf: Ctlf::init(&mut init, f),
            camera: CameraHead::init(&mut init, f.dim, f.heads),
            decoder: DenseDecoder::init(&mut init, f.dim, config.decoder_channels),
            dense: DenseHeads::init(&mut init, c3),
            track: TrackHead::init(&mut init, f.dim, c3, config.track_dim, config.temperature),
        };
        Ok((model, store))
    }

    /// Rebuilds the model structure and loads `loaded` into it by name.
    pub fn from_store(config: &ModelConfig, loaded: &ParamStore) -> Result<(Self, ParamStore)> {
        let (model, mut store) = Self::init(config, 0)?;
        store.load_from(loaded)?;
        Ok((model, store))
    }

    pub fn masks(&self, layout: GridLayout) -> Result<(AttentionMask, AttentionMask)> {
        let ab = &self.config.ablation;
        let spatial = if ab.no_spatial_mask {
            AttentionMask::all_true(layout, MaskKind::Spatial, None)
        } else {
            build_spatial_mask(layout)
        };
        // The widest odd window covers every time step from any center.
        let window = if ab.no_temporal_mask {
            2 * layout.times - 1
        } else {
            self.config.fusion.window
        };
        Ok((spatial, build_temporal_mask(layout, window)?))
    }

    /// Encodes `[V, T, H, W, C]` frames with values in `[0, 1]`.
    pub fn features(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frames: &Tensor,
        setting: CameraSetting,
    ) -> Result<Features> {
        let centered = Tensor::new(frames.shape().to_vec(), frames.data().iter().map(|v| v - 0.5).collect())?;
        let grid = build_grid(g, store, &self.encoder, &centered, setting)?;
        let layout = grid.layout;
        let (spatial_mask, temporal_mask) = self.masks(layout)?;
        let ab = &self.config.ablation;

        let view_ids = self.encoder.view_ids(g, store, &layout);
        let xs = g.add(grid.tokens, view_ids);
        let spatial = if ab.no_cvgf {
            xs
        } else {
            self.cvgf.forward(g, store, xs, &spatial_mask)?
        };
        let time_ids = self.encoder.time_ids(g, store, &layout);
        let xt = g.add(grid.tokens, time_ids);
        let temporal = if ab.no_ctlf {
            xt
        } else {
            self.ctlf.forward(g, store, xt, &temporal_mask)?
        };
        Ok(Features {
            layout,
            spatial,
            temporal,
        })
    }

    pub fn heads(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feats: &Features,
        image: (usize, usize),
        queries: Option<&Queries>,
        need: Need,
    ) -> Result<Outputs> {
        let layout = &feats.layout;
        let patch = self.config.patch;
        if image.0 != layout.patch_rows * patch || image.1 != layout.patch_cols * patch {
            return Err(Error::Layout(format!(
                "image {}x{} does not match the {}x{} token map",
                image.0, image.1, layout.patch_rows, layout.patch_cols
            )));
        }
        let mut out = Outputs::default();
        let dense_needed = need.depth || need.mask || need.point || need.track;
        if need.camera || need.track {
            out.cameras = Some(self.camera.forward(g, store, feats.spatial, layout)?);
        }
        let fd = if dense_needed {
            Some(self.decoder.forward(g, store, feats.spatial, feats.temporal, layout, patch)?)
        } else {
            None
        };
        if let Some(fd) = fd {
            if need.depth || need.track {
                out.depth = Some(self.dense.depth(g, store, fd));
            }
            if need.mask {
                out.mask = Some(self.dense.mask(g, store, fd));
            }
            if need.point {
                out.points = Some(self.dense.points(g, store, fd));
            }
            if need.track {
                let q = queries.ok_or_else(|| Error::Invalid("tracking needs queries".into()))?;
                let (depth, cams) = (out.depth.expect("depth"), out.cameras.expect("cameras"));
                out.tracks = Some(self.track.forward(
                    g,
                    store,
                    feats.temporal,
                    fd,
                    depth,
                    cams,
                    layout,
                    image,
                    patch,
                    q,
                )?);
            }
        }
        Ok(out)
    }
}
