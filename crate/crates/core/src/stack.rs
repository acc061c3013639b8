//! Multi-repetition diffusion-weighted image stacks.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::AcquisitionProtocol;

pub type Image = Array2<f64>;

/// Index of one magnitude frame: weighting, encoding direction, repetition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameKey {
    pub b_idx: usize,
    pub dir_idx: usize,
    pub rep_idx: usize,
}

impl FrameKey {
    pub fn new(b_idx: usize, dir_idx: usize, rep_idx: usize) -> Self {
        FrameKey {
            b_idx,
            dir_idx,
            rep_idx,
        }
    }
}

/// A full acquisition: one magnitude image per (weighting, direction,
/// repetition), plus the left-ventricle mask they share.
#[derive(Debug, Clone, PartialEq)]
pub struct DwiStack {
    pub protocol: AcquisitionProtocol,
    pub frames: BTreeMap<FrameKey, Image>,
    pub mask: Array2<bool>,
}

impl DwiStack {
    pub fn new(
        protocol: AcquisitionProtocol,
        frames: BTreeMap<FrameKey, Image>,
        mask: Array2<bool>,
    ) -> Result<Self> {
        let stack = DwiStack {
            protocol,
            frames,
            mask,
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        let size = self.protocol.image_size;
        if self.mask.dim() != size {
            return Err(Error::ShapeMismatch(format!(
                "mask {:?} vs protocol image size {:?}",
                self.mask.dim(),
                size
            )));
        }
        if self.frames.is_empty() {
            return Err(Error::validation("stack has no frames"));
        }
        for (key, frame) in &self.frames {
            if frame.dim() != size {
                return Err(Error::ShapeMismatch(format!(
                    "frame {key:?} is {:?}, expected {size:?}",
                    frame.dim()
                )));
            }
            if key.b_idx >= self.protocol.b_values.len()
                || key.dir_idx >= self.protocol.directions_for(key.b_idx)
                || key.rep_idx >= self.protocol.reps_per_weighting[key.b_idx]
            {
                return Err(Error::validation(format!(
                    "frame key {key:?} outside protocol bounds"
                )));
            }
            if frame.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::validation(format!(
                    "frame {key:?} has negative or non-finite values (magnitude images)"
                )));
            }
        }
        Ok(())
    }

    /// Keys the protocol implies, in deterministic order.
    pub fn expected_keys(protocol: &AcquisitionProtocol) -> Vec<FrameKey> {
        let mut keys = Vec::with_capacity(protocol.frame_count());
        for b_idx in 0..protocol.b_values.len() {
            for dir_idx in 0..protocol.directions_for(b_idx) {
                for rep_idx in 0..protocol.reps_per_weighting[b_idx] {
                    keys.push(FrameKey::new(b_idx, dir_idx, rep_idx));
                }
            }
        }
        keys
    }

    /// Repetition indices present for a weighting.
    pub fn reps_present(&self, b_idx: usize) -> Vec<usize> {
        let mut reps: Vec<usize> = self
            .frames
            .keys()
            .filter(|k| k.b_idx == b_idx && k.dir_idx == 0)
            .map(|k| k.rep_idx)
            .collect();
        reps.dedup();
        reps
    }

    /// The frame used as registration reference: first repetition, first
    /// direction of the reference (lowest-b) weighting.
    pub fn reference_key(&self) -> FrameKey {
        FrameKey::new(self.protocol.reference_b_index(), 0, 0)
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.protocol.image_size
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_stack() -> DwiStack {
        let mut protocol = AcquisitionProtocol::default();
        protocol.image_size = (4, 4);
        protocol.reps_per_weighting = vec![1, 1, 1];
        let mut frames = BTreeMap::new();
        for key in DwiStack::expected_keys(&protocol) {
            frames.insert(key, Image::from_elem((4, 4), 1.0));
        }
        DwiStack::new(protocol, frames, Array2::from_elem((4, 4), true)).unwrap()
    }

    #[test]
    fn expected_keys_match_frame_count() {
        let p = AcquisitionProtocol::default();
        assert_eq!(DwiStack::expected_keys(&p).len(), p.frame_count());
    }

    #[test]
    fn negative_pixels_are_rejected() {
        let mut stack = tiny_stack();
        let key = *stack.frames.keys().next().unwrap();
        stack.frames.get_mut(&key).unwrap()[(0, 0)] = -1.0;
        assert!(stack.validate().is_err());
    }

    #[test]
    fn reference_is_first_b0_frame() {
        let stack = tiny_stack();
        assert_eq!(stack.reference_key(), FrameKey::new(0, 0, 0));
    }
}
