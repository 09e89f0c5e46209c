//! Procedural test sequences: a voxelized sphere shell with smooth colors.

use std::f64::consts::TAU;

use crate::error::Result;
use crate::pointcloud::{Coord, FrameSequence, Rgb, VoxelizedFrame};

/// Shape and color parameters of a synthetic sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// Grid is `2^depth` voxels per side.
    pub depth: u32,
    pub frames: usize,
    /// Shell radius in voxels.
    pub radius: f64,
    /// Shell half thickness in voxels.
    pub half_thickness: f64,
    /// Color phase advance per frame, in turns.
    pub drift: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            depth: 5,
            frames: 100,
            radius: 13.0,
            half_thickness: 0.75,
            drift: 0.037,
        }
    }
}

/// Occupied voxels of the shell, canonical order.
pub fn shell_coords(spec: &SyntheticSpec) -> Vec<Coord> {
    let side = 1i32 << spec.depth;
    let c = f64::from(side - 1) / 2.0;
    let mut out = Vec::new();
    for x in 0..side {
        for y in 0..side {
            for z in 0..side {
                let d = [x, y, z].map(|v| f64::from(v) - c);
                let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                if (r - spec.radius).abs() <= spec.half_thickness {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Low-frequency color field at time `t` (in frames).
pub fn smooth_color(p: Coord, side: i32, t: f64, drift: f64) -> Rgb {
    let u = p.map(|v| f64::from(v) / f64::from(side));
    let phase = TAU * drift * t;
    let ch = [
        0.5 + 0.35 * (TAU * u[0] + phase).sin() * (0.5 * TAU * u[2]).cos(),
        0.5 + 0.35 * (TAU * (u[1] + 0.5 * u[2]) - phase).sin(),
        0.5 + 0.3 * (TAU * (u[0] - u[1]) + 0.5 * phase).cos(),
    ];
    ch.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

pub fn frame_at(spec: &SyntheticSpec, coords: &[Coord], t: usize) -> Result<VoxelizedFrame> {
    let side = 1i32 << spec.depth;
    let colors = coords
        .iter()
        .map(|&p| smooth_color(p, side, t as f64, spec.drift))
        .collect();
    VoxelizedFrame::new(coords.to_vec(), colors, spec.depth)
}

/// Fixed shell with colors drifting slowly over time.
pub fn smooth_sequence(spec: &SyntheticSpec) -> Result<FrameSequence> {
    let coords = shell_coords(spec);
    let frames = (0..spec.frames)
        .map(|t| frame_at(spec, &coords, t))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new("synthetic_shell", frames)
}

/// `frames` copies of frame `t` of the smooth sequence.
pub fn static_sequence(spec: &SyntheticSpec, t: usize, frames: usize) -> Result<FrameSequence> {
    let coords = shell_coords(spec);
    let f = frame_at(spec, &coords, t)?;
    FrameSequence::new("synthetic_static", vec![f; frames])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shell_is_canonical_and_inside_grid() {
        let spec = SyntheticSpec::default();
        let c = shell_coords(&spec);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert!(c.iter().flatten().all(|&v| (0..32).contains(&v)));
        assert!(c.len() > 1500 && c.len() < 4000, "{}", c.len());
    }

    #[test]
    fn colors_change_slowly() {
        let spec = SyntheticSpec::default();
        let s = smooth_sequence(&SyntheticSpec { frames: 2, ..spec }).unwrap();
        let (a, b) = (&s.frames()[0], &s.frames()[1]);
        assert_eq!(a.coords(), b.coords());
        let max = a
            .colors()
            .iter()
            .zip(b.colors())
            .flat_map(|(x, y)| (0..3).map(move |k| x[k].abs_diff(y[k])))
            .max()
            .unwrap();
        // largest amplitude times the per-frame phase step, plus rounding
        let bound = (0.35 * 255.0 * TAU * spec.drift).ceil() as u8 + 1;
        assert!(max > 0 && max <= bound, "{max} > {bound}");
    }

    #[test]
    fn static_frames_are_identical() {
        let s = static_sequence(&SyntheticSpec::default(), 3, 8).unwrap();
        assert_eq!(s.len(), 8);
        assert!(s.frames().windows(2).all(|w| w[0] == w[1]));
    }
}
