//! Model input assembly: the `X_obj` identity-token sequence with `FRAME`
//! separators, the box matrix `X_bb`, the stacked segment features `X_cnn`,
//! and the embedded video/context representations.

use std::sync::Arc;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{embedding_forward, sinusoidal_pe, ModelParams};
use crate::scene::PerceivedVideo;
use crate::state::{frame_sep_token, obj_token, StateVocabulary, PAD_ID};

/// Which video feature summands feed the transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoFeatureMode {
    /// Identity tokens + box features.
    Bb,
    /// Identity tokens + box features + segment features.
    BbCnn,
    /// Segment features only (no object representations).
    CnnOnly,
}

impl VideoFeatureMode {
    pub fn uses_objects(self) -> bool {
        !matches!(self, VideoFeatureMode::CnnOnly)
    }

    pub fn uses_cnn(self) -> bool {
        !matches!(self, VideoFeatureMode::Bb)
    }
}

impl std::str::FromStr for VideoFeatureMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x_bb" => Ok(VideoFeatureMode::Bb),
            "x_bb+x_cnn" => Ok(VideoFeatureMode::BbCnn),
            "x_cnn" => Ok(VideoFeatureMode::CnnOnly),
            other => Err(Error::config(format!("unknown feature mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for VideoFeatureMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VideoFeatureMode::Bb => "x_bb",
            VideoFeatureMode::BbCnn => "x_bb+x_cnn",
            VideoFeatureMode::CnnOnly => "x_cnn",
        })
    }
}

/// What a row of the visual block holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowKind {
    Frame,
    Object { class: u32, source: usize },
    Pad,
}

/// Bookkeeping for one visual row: which sampled frame it belongs to and
/// what it carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowInfo {
    pub segment: usize,
    pub frame: u32,
    pub row_in_frame: usize,
    pub kind: RowKind,
}

/// The assembled visual half of the model input. Row layout per sampled
/// frame m: one `FRAME<m+1>` row, then up to `n_obj` detections ordered by
/// class, then `PAD` rows to exactly `n_obj`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualInputs {
    pub x_obj: Vec<u32>,
    pub x_bb: Array2<f64>,
    pub x_cnn: Array2<f64>,
    pub rows: Vec<RowInfo>,
    pub n_obj: usize,
    pub n_segments: usize,
}

impl VisualInputs {
    pub fn l_obj(&self) -> usize {
        self.x_obj.len()
    }

    pub fn row_index(&self, segment: usize, row_in_frame: usize) -> usize {
        segment * (self.n_obj + 1) + row_in_frame
    }
}

/// One training/evaluation example's model input.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub visual: Arc<VisualInputs>,
    pub x_ctx: Vec<u32>,
}

impl FeatureBundle {
    pub fn l_obj(&self) -> usize {
        self.visual.l_obj()
    }

    pub fn l_ctx(&self) -> usize {
        self.x_ctx.len()
    }
}

/// Builds `X_obj`, `X_bb`, `X_cnn` and the row bookkeeping from perception
/// output and segment features sharing the same sampling grid.
pub fn build_visual_inputs(
    perceived: &PerceivedVideo,
    seg_feats: &Array2<f64>,
    vocab: &StateVocabulary,
) -> Result<VisualInputs> {
    let n_segments = perceived.frames.len();
    if seg_feats.nrows() != n_segments {
        return Err(Error::shape(format!(
            "{} perceived frames vs {} segment vectors",
            n_segments,
            seg_feats.nrows()
        )));
    }
    let n_obj = perceived.n_obj;
    let d_cnn = seg_feats.ncols();
    let l_obj = (n_obj + 1) * n_segments;

    let mut x_obj = Vec::with_capacity(l_obj);
    let mut x_bb = Array2::zeros((l_obj, 4));
    let mut x_cnn = Array2::zeros((l_obj, d_cnn));
    let mut rows = Vec::with_capacity(l_obj);

    for (m, frame) in perceived.frames.iter().enumerate() {
        let seg_vec = seg_feats.row(m);
        let base = m * (n_obj + 1);
        x_obj.push(vocab.id(&frame_sep_token(m + 1)));
        rows.push(RowInfo {
            segment: m,
            frame: frame.frame,
            row_in_frame: 0,
            kind: RowKind::Frame,
        });
        for (j, det) in frame.detections.iter().take(n_obj).enumerate() {
            x_obj.push(vocab.id(&obj_token(det.class_index)));
            let coords = det.bbox.coords();
            for (c, v) in coords.iter().enumerate() {
                x_bb[[base + 1 + j, c]] = *v;
            }
            rows.push(RowInfo {
                segment: m,
                frame: frame.frame,
                row_in_frame: 1 + j,
                kind: RowKind::Object {
                    class: det.class_index,
                    source: det.source,
                },
            });
        }
        for j in frame.detections.len().min(n_obj)..n_obj {
            x_obj.push(PAD_ID);
            rows.push(RowInfo {
                segment: m,
                frame: frame.frame,
                row_in_frame: 1 + j,
                kind: RowKind::Pad,
            });
        }
        // Every row of the segment carries the segment vector, stacked
        // (n_obj + 1) times.
        for j in 0..=n_obj {
            x_cnn.row_mut(base + j).assign(&seg_vec);
        }
    }

    Ok(VisualInputs {
        x_obj,
        x_bb,
        x_cnn,
        rows,
        n_obj,
        n_segments,
    })
}

/// Caches from the embedding step needed by the backward pass.
pub struct EmbedCache {
    pub bb_pre: Option<Array2<f64>>,
    pub cnn_pre: Option<Array2<f64>>,
}

/// Embeds the visual rows and the context tokens:
/// `Z_V = Z_obj + ReLU(X_bb W) + ReLU(X_cnn W)` (summands per feature
/// mode), `Z_ctx = embedding + sinusoidal positions`.
pub fn embed_inputs(
    visual: &VisualInputs,
    x_ctx: &[u32],
    params: &ModelParams,
    mode: VideoFeatureMode,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (z_v, z_ctx, _) = embed_inputs_cached(visual, x_ctx, params, mode)?;
    Ok((z_v, z_ctx))
}

pub fn embed_inputs_cached(
    visual: &VisualInputs,
    x_ctx: &[u32],
    params: &ModelParams,
    mode: VideoFeatureMode,
) -> Result<(Array2<f64>, Array2<f64>, EmbedCache)> {
    let d = params.embedding.ncols();
    if params.bb_proj.w.ncols() != d || params.cnn_proj.w.nrows() != visual.x_cnn.ncols() {
        return Err(Error::shape(format!(
            "projection shapes do not match d={d}, d_cnn={}",
            visual.x_cnn.ncols()
        )));
    }

    let mut z_v = if mode.uses_objects() {
        embedding_forward(&params.embedding, &visual.x_obj)
    } else {
        Array2::zeros((visual.l_obj(), d))
    };
    let mut cache = EmbedCache {
        bb_pre: None,
        cnn_pre: None,
    };
    if mode.uses_objects() {
        let pre = params.bb_proj.forward(&visual.x_bb);
        z_v += &pre.mapv(|v| v.max(0.0));
        cache.bb_pre = Some(pre);
    }
    if mode.uses_cnn() {
        let pre = params.cnn_proj.forward(&visual.x_cnn);
        z_v += &pre.mapv(|v| v.max(0.0));
        cache.cnn_pre = Some(pre);
    }

    let positions: Vec<usize> = (0..x_ctx.len()).collect();
    let mut z_ctx = embedding_forward(&params.embedding, x_ctx);
    z_ctx += &sinusoidal_pe(&positions, d);
    Ok((z_v, z_ctx, cache))
}

/// Backward of the visual embedding sum: routes `dz_v` into the embedding
/// table and the two projections (masked inputs supplied by the caller).
pub fn embed_backward_visual(
    visual: &VisualInputs,
    cache: &EmbedCache,
    dz_v: &Array2<f64>,
    params: &ModelParams,
    mode: VideoFeatureMode,
    grads: &mut ModelParams,
) {
    if mode.uses_objects() {
        crate::nn::embedding_backward(&mut grads.embedding, &visual.x_obj, dz_v);
        let pre = cache.bb_pre.as_ref().expect("bb cache present");
        let mut dpre = dz_v.clone();
        dpre.zip_mut_with(pre, |g, p| {
            if *p <= 0.0 {
                *g = 0.0;
            }
        });
        params.bb_proj.backward(&visual.x_bb, &dpre, &mut grads.bb_proj);
    }
    if mode.uses_cnn() {
        let pre = cache.cnn_pre.as_ref().expect("cnn cache present");
        let mut dpre = dz_v.clone();
        dpre.zip_mut_with(pre, |g, p| {
            if *p <= 0.0 {
                *g = 0.0;
            }
        });
        params
            .cnn_proj
            .backward(&visual.x_cnn, &dpre, &mut grads.cnn_proj);
    }
}

/// Stacks `[z_v; z_ctx; z_state]` into the transformer input.
pub fn concat_rows(parts: &[&Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("consistent widths")
}
