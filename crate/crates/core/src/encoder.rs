//! Point-wise position and color encoders: `f = F_b(b) + F_c(c)`.

use crate::diff::{NormMode, Tape, Tensor, Var, DEFAULT_LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::geometry::{BearingVector, Color};
use crate::nn::{Bound, Init, Linear, ParamStore, NORM_EPS};

pub const DEFAULT_BLOCKS: usize = 3;

/// `x + W₂·leaky(norm(W₁·x))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub inner: Linear,
    pub outer: Linear,
}

impl ResidualBlock {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, width: usize) -> Self {
        Self {
            inner: Linear::new(store, init, &format!("{name}.inner"), width, width),
            outer: Linear::new(store, init, &format!("{name}.outer"), width, width),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, p, x)?;
        let h = crate::diff::normalize(tape, h, NormMode::Instance, NORM_EPS)?;
        let h = tape.leaky_relu(h, DEFAULT_LEAKY_SLOPE);
        let h = self.outer.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Input lift followed by residual blocks.
#[derive(Clone, Debug)]
pub struct EncoderBranch {
    pub lift: Linear,
    pub blocks: Vec<ResidualBlock>,
}

impl EncoderBranch {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, input: usize, width: usize, blocks: usize) -> Self {
        Self {
            lift: Linear::new(store, init, &format!("{name}.lift"), input, width),
            blocks: (0..blocks)
                .map(|i| ResidualBlock::new(store, init, &format!("{name}.block{i}"), width))
                .collect(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = self.lift.forward(tape, p, x)?;
        for b in &self.blocks {
            h = b.forward(tape, p, h)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct PointEncoderParams {
    pub position: EncoderBranch,
    pub color: EncoderBranch,
    pub width: usize,
}

impl PointEncoderParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, width: usize, blocks: usize) -> Self {
        Self {
            position: EncoderBranch::new(store, init, "encoder.position", 2, width, blocks),
            color: EncoderBranch::new(store, init, "encoder.color", 3, width, blocks),
            width,
        }
    }
}

pub fn bearings_leaf(tape: &mut Tape, bearings: &[BearingVector]) -> Var {
    let data = bearings.iter().flat_map(|b| [b.x(), b.y()]).collect();
    tape.leaf(Tensor::matrix(bearings.len(), 2, data))
}

pub fn colors_leaf(tape: &mut Tape, colors: &[Color]) -> Var {
    let data = colors.iter().flat_map(|c| c.iter().copied()).collect();
    tape.leaf(Tensor::matrix(colors.len(), 3, data))
}

/// Encodes each point independently into a `d`-wide feature row.
/// With `use_color == false` the color branch is skipped entirely.
pub fn encode_points(
    tape: &mut Tape,
    p: &Bound,
    params: &PointEncoderParams,
    bearings: &[BearingVector],
    colors: &[Color],
    use_color: bool,
) -> Result<Var> {
    if bearings.len() != colors.len() {
        return Err(Error::Input(format!(
            "{} bearing vectors but {} colors",
            bearings.len(),
            colors.len()
        )));
    }
    if bearings.is_empty() {
        return Err(Error::Input("cannot encode an empty point set".into()));
    }
    let b = bearings_leaf(tape, bearings);
    let fb = params.position.forward(tape, p, b)?;
    if !use_color {
        return Ok(fb);
    }
    let c = colors_leaf(tape, colors);
    let fc = params.color.forward(tape, p, c)?;
    tape.add(fb, fc)
}
