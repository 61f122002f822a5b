//! Binary network checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "TAME"  version:u32  layer_count:u32
//! per layer: tag:u8, dims:u32*      dense=0 (in,out) conv2d=1 (in_ch,out_ch,k) relu=2
//!                                   maxpool2d=3 (k) flatten=4 sigmoid=5
//! input_rank:u32  input_dims:u32*
//! per parametric layer: weights:f32*, biases:f32*
//! has_masks:u8
//! if has_masks, per parametric layer: masked:u8, then ceil(weights/8) bytes of LSB-first
//! keep-bits when masked == 1
//! ```

use std::io::{Read, Write};

use crate::error::{Result, TameError};
use crate::wire::*;

use super::{LayerSpec, Network};

const MAGIC: &[u8; 4] = b"TAME";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_spec<W: Write>(w: &mut W, spec: &LayerSpec) -> Result<()> {
    match *spec {
        LayerSpec::Dense { inputs, outputs } => {
            write_u8(w, 0)?;
            write_len(w, inputs)?;
            write_len(w, outputs)
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
        } => {
            write_u8(w, 1)?;
            write_len(w, in_channels)?;
            write_len(w, out_channels)?;
            write_len(w, kernel)
        }
        LayerSpec::Relu => write_u8(w, 2),
        LayerSpec::MaxPool2d { kernel } => {
            write_u8(w, 3)?;
            write_len(w, kernel)
        }
        LayerSpec::Flatten => write_u8(w, 4),
        LayerSpec::Sigmoid => write_u8(w, 5),
    }
}

fn read_spec<R: Read>(r: &mut R) -> Result<LayerSpec> {
    Ok(match read_u8(r)? {
        0 => LayerSpec::Dense {
            inputs: read_len(r)?,
            outputs: read_len(r)?,
        },
        1 => LayerSpec::Conv2d {
            in_channels: read_len(r)?,
            out_channels: read_len(r)?,
            kernel: read_len(r)?,
        },
        2 => LayerSpec::Relu,
        3 => LayerSpec::MaxPool2d {
            kernel: read_len(r)?,
        },
        4 => LayerSpec::Flatten,
        5 => LayerSpec::Sigmoid,
        tag => return Err(TameError::format(format!("unknown layer tag {tag}"))),
    })
}

impl Network {
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        write_u32(w, CHECKPOINT_VERSION)?;
        write_len(w, self.layers.len())?;
        for layer in &self.layers {
            write_spec(w, &layer.spec)?;
        }
        write_len(w, self.input_shape.len())?;
        for &d in &self.input_shape {
            write_len(w, d)?;
        }
        for layer in self.layers.iter().filter(|l| l.spec.has_params()) {
            write_f32s(w, &layer.weight)?;
            write_f32s(w, &layer.bias)?;
        }
        write_u8(w, self.is_pruned() as u8)?;
        if self.is_pruned() {
            for layer in self.layers.iter().filter(|l| l.spec.has_params()) {
                match &layer.mask {
                    Some(mask) => {
                        write_u8(w, 1)?;
                        let mut bytes = vec![0u8; mask.len().div_ceil(8)];
                        for (i, _) in mask.iter().enumerate().filter(|(_, &keep)| keep) {
                            bytes[i / 8] |= 1 << (i % 8);
                        }
                        w.write_all(&bytes)?;
                    }
                    None => write_u8(w, 0)?,
                }
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Network> {
        read_magic(r, MAGIC)?;
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(TameError::format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = read_len(r)?;
        let specs = (0..count)
            .map(|_| read_spec(r))
            .collect::<Result<Vec<_>>>()?;
        let rank = read_len(r)?;
        let input_shape = (0..rank).map(|_| read_len(r)).collect::<Result<Vec<_>>>()?;
        let mut net = Network::zeroed(input_shape, &specs)?;
        for layer in net.layers.iter_mut().filter(|l| l.spec.has_params()) {
            layer.weight = read_f32s(r, layer.weight.len())?;
            layer.bias = read_f32s(r, layer.bias.len())?;
        }
        if read_u8(r)? == 1 {
            for layer in net.layers.iter_mut().filter(|l| l.spec.has_params()) {
                if read_u8(r)? == 1 {
                    let n = layer.weight.len();
                    let mut bytes = vec![0u8; n.div_ceil(8)];
                    r.read_exact(&mut bytes)
                        .map_err(|_| TameError::format("truncated mask section"))?;
                    layer.mask = Some((0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect());
                }
            }
        }
        Ok(net)
    }
}
