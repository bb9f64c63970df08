//! Supervision targets for a sampled subgrid of one scene.

use crate::error::Result;
use crate::geometry::{CameraParams, Vec3};
use crate::grid::{select_frames, CameraSetting, GridLayout, Selection};
use crate::heads::Queries;
use crate::numerics::Tensor;
use crate::scenes::SceneSequence;

/// Frames and targets of a subgrid, with geometry re-expressed in the camera
/// frame of the first selected frame.
#[derive(Debug, Clone)]
pub struct Batch {
    pub selection: Selection,
    pub setting: CameraSetting,
    pub image: (usize, usize),
    /// `[V, T, H, W, 3]`.
    pub frames: Tensor,
    /// `[F × 9]`.
    pub cameras: Tensor,
    /// `[F·H·W]`.
    pub depth: Tensor,
    pub mask: Tensor,
    pub validity: Tensor,
    /// `[F·H·W × 3]`.
    pub points: Tensor,
    /// Queries live in the first selected time step.
    pub queries: Queries,
    /// `[T·N × 2]` rows ordered (t, query).
    pub tracks_2d: Vec<f64>,
    /// `[T·N × 3]`.
    pub tracks_3d: Vec<f64>,
}

impl Batch {
    pub fn frame_count(&self) -> usize {
        self.selection.views.len() * self.selection.len
    }

    pub fn has_tracks(&self) -> bool {
        !self.queries.is_empty()
    }
}

pub fn scene_layout(seq: &SceneSequence, patch: usize) -> Result<GridLayout> {
    let c = &seq.config;
    GridLayout::new(c.views, c.times, c.height / patch, c.width / patch, c.setting)
}

pub fn make_batch(seq: &SceneSequence, sel: &Selection, patch: usize) -> Result<Batch> {
    let src = scene_layout(seq, patch)?;
    let layout = sel.layout(&src)?;
    let (h, w) = (seq.config.height, seq.config.width);
    let hw = h * w;
    let frames = select_frames(&seq.frames, sel)?;
    let list = sel.frames();
    let n = list.len();

    let reference = seq.camera(sel.views[0], sel.t0).pose();
    let identity = sel.views[0] == 0 && sel.t0 == 0;
    let reref = |p: [f64; 3]| -> [f64; 3] {
        if identity {
            return p;
        }
        let q = reference.from_ref(&Vec3::new(p[0], p[1], p[2]));
        [q.x, q.y, q.z]
    };

    let mut cameras = Vec::with_capacity(n * 9);
    let mut depth = Vec::with_capacity(n * hw);
    let mut mask = Vec::with_capacity(n * hw);
    let mut validity = Vec::with_capacity(n * hw);
    let mut points = Vec::with_capacity(n * hw * 3);
    for &(v, t) in &list {
        let cam = seq.camera(v, t);
        let cam = if identity {
            cam
        } else {
            CameraParams::from_pose(&cam.pose().relative_to(&reference), cam.focal)
        };
        cameras.extend_from_slice(&cam.to_array());
        let f = v * seq.times() + t;
        depth.extend_from_slice(&seq.depth.data()[f * hw..(f + 1) * hw]);
        mask.extend_from_slice(&seq.mask.data()[f * hw..(f + 1) * hw]);
        validity.extend_from_slice(&seq.validity.data()[f * hw..(f + 1) * hw]);
        for px in seq.points.data()[f * hw * 3..(f + 1) * hw * 3].chunks(3) {
            points.extend_from_slice(&reref([px[0], px[1], px[2]]));
        }
    }

    let tracks = &seq.tracks;
    let picked: Vec<usize> = (0..tracks.len())
        .filter(|&i| sel.views.contains(&tracks.query_view[i]))
        .collect();
    let queries = Queries {
        views: picked
            .iter()
            .map(|&i| sel.views.iter().position(|&v| v == tracks.query_view[i]).expect("selected view"))
            .collect(),
        source_time: 0,
        pixels: picked.iter().map(|&i| tracks.point_2d(sel.t0, i)).collect(),
    };
    let mut tracks_2d = Vec::with_capacity(sel.len * picked.len() * 2);
    let mut tracks_3d = Vec::with_capacity(sel.len * picked.len() * 3);
    for t in sel.t0..sel.t0 + sel.len {
        for &i in &picked {
            tracks_2d.extend_from_slice(&tracks.point_2d(t, i));
            tracks_3d.extend_from_slice(&reref(tracks.point_3d(t, i)));
        }
    }

    Ok(Batch {
        selection: sel.clone(),
        setting: layout.setting,
        image: (h, w),
        frames,
        cameras: Tensor::new(vec![n, 9], cameras)?,
        depth: Tensor::new(vec![n * hw], depth)?,
        mask: Tensor::new(vec![n * hw], mask)?,
        validity: Tensor::new(vec![n * hw], validity)?,
        points: Tensor::new(vec![n * hw, 3], points)?,
        queries,
        tracks_2d,
        tracks_3d,
    })
}

/// The whole scene as one batch.
pub fn full_batch(seq: &SceneSequence, patch: usize) -> Result<Batch> {
    let layout = scene_layout(seq, patch)?;
    make_batch(seq, &Selection::full(&layout), patch)
}
