//! Geometry-refined encoder.
//!
//! Boxes are embedded once (`X_G = relu(X_g W_geo + b_geo)`) and every layer
//! mixes them into its attention queries and keys; values stay
//! appearance-only. An optional gate computed from `[X ; X_G]` modulates a
//! linear map of the attention output before the residual connection.

use crate::config::GeometryMode;
use crate::error::{GatError, Result};
use crate::layers::{
    attend, feed_forward, gated_linear, layer_norm, linear, Dropout, FeedForwardVars, GluVars,
    LayerNormVars,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Width of a raw geometry row: `(x_min, y_min, x_max, y_max, S)`.
pub const GEOMETRY_DIM: usize = 5;

/// Appearance features and raw box geometry for the regions of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSet {
    appearance: Tensor,
    geometry: Tensor,
}

impl RegionSet {
    pub fn new(appearance: Tensor, geometry: Tensor) -> Result<Self> {
        let (n, _) = appearance
            .matrix_dims()
            .filter(|_| appearance.rank() == 2)
            .ok_or_else(|| GatError::InvalidRegion(format!("appearance shape {:?}", appearance.shape())))?;
        if geometry.shape() != [n, GEOMETRY_DIM] {
            return Err(GatError::InvalidRegion(format!(
                "geometry shape {:?} does not match {n} regions",
                geometry.shape()
            )));
        }
        validate_geometry(&geometry)?;
        if !appearance.is_finite() {
            return Err(GatError::InvalidRegion("non-finite appearance feature".into()));
        }
        Ok(RegionSet { appearance, geometry })
    }

    /// Builds the geometry rows from boxes, with `S` the box area in a unit image.
    pub fn from_boxes(appearance: Tensor, boxes: &[[f64; 4]]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = boxes.iter().map(|b| geometry_row(*b).to_vec()).collect();
        let geometry = Tensor::from_rows(&rows)?;
        RegionSet::new(appearance, geometry)
    }

    pub fn len(&self) -> usize {
        self.appearance.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.appearance.cols()
    }

    pub fn appearance(&self) -> &Tensor {
        &self.appearance
    }

    pub fn geometry(&self) -> &Tensor {
        &self.geometry
    }

    /// Row `i` of the result is region `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        Ok(RegionSet {
            appearance: self.appearance.permute_rows(order)?,
            geometry: self.geometry.permute_rows(order)?,
        })
    }
}

pub fn geometry_row(b: [f64; 4]) -> [f64; GEOMETRY_DIM] {
    [b[0], b[1], b[2], b[3], (b[2] - b[0]) * (b[3] - b[1])]
}

fn validate_geometry(geometry: &Tensor) -> Result<()> {
    if geometry.rank() != 2 || geometry.cols() != GEOMETRY_DIM {
        return Err(GatError::InvalidRegion(format!(
            "geometry must be N×5, got {:?}",
            geometry.shape()
        )));
    }
    for r in 0..geometry.rows() {
        let g = geometry.row_slice(r);
        let [x0, y0, x1, y1, s] = [g[0], g[1], g[2], g[3], g[4]];
        if !(x0 < x1 && y0 < y1) {
            return Err(GatError::InvalidRegion(format!(
                "region {r}: box ({x0}, {y0}, {x1}, {y1}) is degenerate"
            )));
        }
        if [x0, y0, x1, y1].iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(GatError::InvalidRegion(format!(
                "region {r}: box outside the unit square"
            )));
        }
        if !(s > 0.0 && s <= 1.0) {
            return Err(GatError::InvalidRegion(format!("region {r}: relative size {s}")));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct GeometryEmbedderVars {
    pub w_geo: Var,
    pub b_geo: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderHeadVars {
    pub w_qa: Var,
    pub w_ka: Var,
    pub w_va: Var,
    /// `(W_QG, W_KG)`; absent when geometry is off.
    pub geometry: Option<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct EncoderLayerVars {
    pub heads: Vec<EncoderHeadVars>,
    pub w_o: Var,
    pub glu: Option<GluVars>,
    pub ff: FeedForwardVars,
    pub norm1: LayerNormVars,
    pub norm2: LayerNormVars,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub w_in: Var,
    pub b_in: Var,
    pub geometry: Option<GeometryEmbedderVars>,
    pub layers: Vec<EncoderLayerVars>,
}

/// `relu(X_g W_geo + b_geo)`
pub fn embed_geometry(tape: &mut Tape, geometry_raw: Var, p: &GeometryEmbedderVars) -> Result<Var> {
    validate_geometry(tape.value(geometry_raw))?;
    let projected = linear(tape, geometry_raw, p.w_geo, p.b_geo)?;
    Ok(tape.relu(projected)?)
}

/// Multi-head attention output plus each head's attention matrix.
pub struct GsrOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

pub fn gsr_attention(
    tape: &mut Tape,
    x: Var,
    x_geo: Option<Var>,
    layer: &EncoderLayerVars,
    mode: GeometryMode,
) -> Result<GsrOutput> {
    let mut outputs = Vec::with_capacity(layer.heads.len());
    let mut weights = Vec::with_capacity(layer.heads.len());
    for (k, head) in layer.heads.iter().enumerate() {
        let d_k = tape.shape(head.w_qa)[1] as f64;
        let qa = tape.matmul(x, head.w_qa)?;
        let ka = tape.matmul(x, head.w_ka)?;
        let va = tape.matmul(x, head.w_va)?;
        let (q, key, temperature) = match (mode, x_geo, head.geometry) {
            (GeometryMode::Off, _, _) => (qa, ka, d_k.sqrt()),
            (GeometryMode::Concat, Some(g), Some((w_qg, w_kg))) => {
                let qg = tape.matmul(g, w_qg)?;
                let kg = tape.matmul(g, w_kg)?;
                let q = tape.concat_last_dim(qa, qg)?;
                let key = tape.concat_last_dim(ka, kg)?;
                (q, key, (2.0 * d_k).sqrt())
            }
            (GeometryMode::Add, Some(g), Some((w_qg, w_kg))) => {
                let qg = tape.matmul(g, w_qg)?;
                let kg = tape.matmul(g, w_kg)?;
                let q = tape.add(qa, qg)?;
                let key = tape.add(ka, kg)?;
                (q, key, d_k.sqrt())
            }
            _ => {
                return Err(GatError::Config(format!(
                    "head {k}: geometry mode {mode} needs geometry features and W_QG/W_KG"
                )))
            }
        };
        let att = attend(tape, q, key, va, temperature, None)?;
        outputs.push(att.output);
        weights.push(att.weights);
    }
    let mut joined = outputs[0];
    for &h in &outputs[1..] {
        joined = tape.concat_last_dim(joined, h)?;
    }
    let output = tape.matmul(joined, layer.w_o)?;
    Ok(GsrOutput { output, weights })
}

/// `sigmoid([X ; X_G] W_g + b_g) ⊙ (attn W_i + b_i)`; a zero `X_G` stands in
/// when geometry is off.
pub fn glu_refine(tape: &mut Tape, attn_out: Var, x: Var, x_geo: Option<Var>, glu: &GluVars) -> Result<Var> {
    let geo = match x_geo {
        Some(g) => g,
        None => {
            let shape = tape.shape(x).to_vec();
            tape.constant(Tensor::zeros(&shape))
        }
    };
    let context = tape.concat_last_dim(x, geo)?;
    Ok(gated_linear(tape, context, attn_out, glu)?)
}

pub fn encoder_layer(
    tape: &mut Tape,
    x: Var,
    x_geo: Option<Var>,
    layer: &EncoderLayerVars,
    mode: GeometryMode,
    dropout: &mut Dropout,
) -> Result<Var> {
    let attn = gsr_attention(tape, x, x_geo, layer, mode)?.output;
    let refined = match &layer.glu {
        Some(glu) => glu_refine(tape, attn, x, x_geo, glu)?,
        None => attn,
    };
    let refined = dropout.attn(tape, refined)?;
    let z = tape.add(x, refined)?;
    let z = layer_norm(tape, z, &layer.norm1)?;
    let ff = feed_forward(tape, z, &layer.ff)?;
    let ff = dropout.attn(tape, ff)?;
    let out = tape.add(z, ff)?;
    Ok(layer_norm(tape, out, &layer.norm2)?)
}

/// Projects appearance to `d_model`, embeds geometry once and runs every layer.
pub fn encode(
    tape: &mut Tape,
    regions: &RegionSet,
    enc: &EncoderVars,
    mode: GeometryMode,
    dropout: &mut Dropout,
) -> Result<Var> {
    let appearance = tape.constant(regions.appearance().clone());
    let mut x = linear(tape, appearance, enc.w_in, enc.b_in)?;
    let x_geo = match (mode, &enc.geometry) {
        (GeometryMode::Off, _) => None,
        (_, Some(geo)) => {
            let raw = tape.constant(regions.geometry().clone());
            Some(embed_geometry(tape, raw, geo)?)
        }
        (_, None) => {
            return Err(GatError::Config(format!(
                "geometry mode {mode} needs a geometry embedder"
            )))
        }
    };
    for layer in &enc.layers {
        x = encoder_layer(tape, x, x_geo, layer, mode, dropout)?;
    }
    Ok(x)
}
