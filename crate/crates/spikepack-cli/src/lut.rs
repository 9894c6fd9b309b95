//! Lookup-table export: the deployable form of a codebook model. Each
//! layer stores its quantized levels once and every weight as a packed
//! index into them, so loading reproduces the effective weights exactly.

use std::path::Path;

use spikepack_core::metrics::{index_bits, validate_profile, HardwareProfile};
use spikepack_core::tensor::Tensor;
use spikepack_core::train::{LayerPayload, SnnModel};

use crate::CliError;

const MAGIC: &[u8; 4] = b"SPKL";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LutLayer {
    pub shape: Vec<usize>,
    /// Bit width of the integer levels.
    pub bits: u32,
    pub scale: f64,
    pub q_levels: Vec<i32>,
    /// Bits per packed weight index: ceil(log2 of the level count).
    pub index_bits: u32,
    pub indices: Vec<usize>,
}

impl LutLayer {
    pub fn effective_weights(&self) -> Result<Tensor, CliError> {
        let m = self.q_levels.len();
        let data: Vec<f64> = self
            .indices
            .iter()
            .map(|&i| {
                if i >= m {
                    return Err(CliError::Run(format!(
                        "lut layer: index {i} outside the {m}-level codebook"
                    )));
                }
                Ok(self.scale * self.q_levels[i] as f64)
            })
            .collect::<Result<_, _>>()?;
        Ok(Tensor::new(self.shape.clone(), data)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LutFile {
    pub layers: Vec<LutLayer>,
}

impl LutFile {
    /// Every layer must carry a quantized codebook; the first one that
    /// does not names itself in the error.
    pub fn from_model(model: &SnnModel) -> Result<LutFile, CliError> {
        let mut layers = Vec::with_capacity(model.payloads.len());
        for (l, p) in model.payloads.iter().enumerate() {
            let LayerPayload::Cat { latent, codebook } = p else {
                return Err(CliError::Run(format!(
                    "export refused: layer {l} holds {} weights, not a codebook",
                    match p {
                        LayerPayload::Fp { .. } => "dense",
                        LayerPayload::Ternary { .. } => "ternary",
                        LayerPayload::Cat { .. } => unreachable!(),
                    }
                )));
            };
            let Some(q) = &codebook.quant else {
                return Err(CliError::Run(format!(
                    "export refused: layer {l} codebook has no quantized grid; quantize first"
                )));
            };
            let (indices, _) = codebook.reconstruct(latent.data())?;
            layers.push(LutLayer {
                shape: latent.shape().to_vec(),
                bits: q.bits,
                scale: q.scale,
                q_levels: q.q_levels.clone(),
                index_bits: index_bits(q.q_levels.len()),
                indices,
            });
        }
        Ok(LutFile { layers })
    }

    pub fn effective_weights(&self) -> Result<Vec<Tensor>, CliError> {
        self.layers.iter().map(|l| l.effective_weights()).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.shape.len() as u32).to_le_bytes());
            for &d in &l.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&l.bits.to_le_bytes());
            out.extend_from_slice(&l.scale.to_le_bytes());
            out.extend_from_slice(&(l.q_levels.len() as u32).to_le_bytes());
            for &q in &l.q_levels {
                out.extend_from_slice(&(q as u32).to_le_bytes());
            }
            out.extend_from_slice(&l.index_bits.to_le_bytes());
            out.extend_from_slice(&pack_indices(&l.indices, l.index_bits));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<LutFile, CliError> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], CliError> {
            if *pos + n > bytes.len() {
                return Err(CliError::Run(format!("lut file: truncated at offset {pos}")));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let u32_at = |pos: &mut usize| -> Result<u32, CliError> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };

        if take(&mut pos, 4)? != MAGIC {
            return Err(CliError::Run("lut file: bad magic at offset 0".into()));
        }
        let version = u32_at(&mut pos)?;
        if version != VERSION {
            return Err(CliError::Run(format!("lut file: unsupported version {version}")));
        }
        let n_layers = u32_at(&mut pos)? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let rank = u32_at(&mut pos)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32_at(&mut pos)? as usize);
            }
            let bits = u32_at(&mut pos)?;
            let scale = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            let m = u32_at(&mut pos)? as usize;
            let mut q_levels = Vec::with_capacity(m);
            for _ in 0..m {
                q_levels.push(u32_at(&mut pos)? as i32);
            }
            let index_bits = u32_at(&mut pos)?;
            let count: usize = shape.iter().product();
            let packed = take(&mut pos, packed_len(count, index_bits))?;
            let indices = unpack_indices(packed, count, index_bits);
            layers.push(LutLayer { shape, bits, scale, q_levels, index_bits, indices });
        }
        if pos != bytes.len() {
            return Err(CliError::Run(format!(
                "lut file: {} trailing bytes at offset {pos}",
                bytes.len() - pos
            )));
        }
        Ok(LutFile { layers })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| CliError::Run(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<LutFile, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Run(format!("cannot read {}: {e}", path.display())))?;
        LutFile::from_bytes(&bytes).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
    }
}

pub fn packed_len(count: usize, index_bits: u32) -> usize {
    (count * index_bits as usize).div_ceil(8)
}

/// Indices at `index_bits` each, bit 0 of the stream in bit 0 of byte 0.
pub fn pack_indices(indices: &[usize], index_bits: u32) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(indices.len(), index_bits)];
    let w = index_bits as usize;
    for (i, &v) in indices.iter().enumerate() {
        for b in 0..w {
            if v >> b & 1 == 1 {
                let bit = i * w + b;
                out[bit / 8] |= 1 << (bit % 8);
            }
        }
    }
    out
}

pub fn unpack_indices(packed: &[u8], count: usize, index_bits: u32) -> Vec<usize> {
    let w = index_bits as usize;
    (0..count)
        .map(|i| {
            let mut v = 0usize;
            for b in 0..w {
                let bit = i * w + b;
                if packed[bit / 8] >> (bit % 8) & 1 == 1 {
                    v |= 1 << b;
                }
            }
            v
        })
        .collect()
}

/// The manifest written next to a LUT: one row per profile check over the
/// whole catalog, with an overall verdict row per profile.
pub fn manifest_csv(model: &SnnModel, catalog: &[HardwareProfile]) -> Result<String, CliError> {
    let facts = model.layer_facts()?;
    let mut out = String::from("profile,check,bound,measured,passed\n");
    for profile in catalog {
        let report = validate_profile(&facts, profile);
        for c in &report.checks {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                profile.name, c.name, c.bound, c.measured, c.passed
            ));
        }
        out.push_str(&format!("{},overall,,,{}\n", profile.name, report.passed()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use spikepack_core::codebook::QuantMode;
    use spikepack_core::lif::LifConfig;
    use spikepack_core::model::{Layer, NetSpec, Readout};

    fn quantized_model() -> SnnModel {
        let net = NetSpec {
            input: (1, 4, 4),
            layers: vec![
                Layer::Conv { out_c: 3, kernel: 3, stride: 1, pad: 1 },
                Layer::Pool,
                Layer::Dense { out_f: 2 },
            ],
            lif: LifConfig { t_steps: 2, ..LifConfig::default() },
            readout: Readout::Mean,
        };
        let mut m = SnnModel::fresh(net, 3).unwrap().to_cat(4, 20, 3).unwrap();
        m.quantize_codebooks(8, QuantMode::ResolutionPreserving).unwrap();
        m
    }

    #[test]
    fn packing_round_trips_across_byte_boundaries() {
        for bits in [1u32, 2, 3, 5] {
            let max = (1usize << bits) - 1;
            let indices: Vec<usize> = (0..23).map(|i| i * 7 % (max + 1)).collect();
            let packed = pack_indices(&indices, bits);
            assert_eq!(packed.len(), packed_len(indices.len(), bits));
            assert_eq!(unpack_indices(&packed, indices.len(), bits), indices);
        }
        // Four 2-bit indices fill exactly one byte, LSB first.
        assert_eq!(pack_indices(&[1, 2, 3, 0], 2), vec![0b0011_1001]);
    }

    #[test]
    fn export_load_reproduces_effective_weights_exactly() {
        let model = quantized_model();
        let lut = LutFile::from_model(&model).unwrap();
        assert_eq!(lut.layers[0].index_bits, 2);

        let back = LutFile::from_bytes(&lut.to_bytes()).unwrap();
        assert_eq!(back, lut);
        let direct = model.effective_weights().unwrap();
        let via_lut = back.effective_weights().unwrap();
        for (a, b) in direct.iter().zip(&via_lut) {
            assert_eq!(a.shape(), b.shape());
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn packed_size_matches_the_index_budget() {
        let model = quantized_model();
        let lut = LutFile::from_model(&model).unwrap();
        let bytes = lut.to_bytes();
        let params: usize = lut.layers.iter().map(|l| l.indices.len()).sum();
        // 2 bits per weight plus per-layer headers and levels.
        let header_budget = 200;
        assert!(bytes.len() >= params * 2 / 8);
        assert!(bytes.len() < params * 2 / 8 + header_budget, "{}", bytes.len());
    }

    #[test]
    fn export_refuses_layers_without_a_quantized_grid() {
        let dense = {
            let mut m = quantized_model();
            m.payloads[0] = LayerPayload::Fp {
                weight: Tensor::zeros(m.payloads[0].shape().to_vec()),
                qat_bits: None,
            };
            m
        };
        let msg = format!("{}", LutFile::from_model(&dense).unwrap_err());
        assert!(msg.contains("layer 0"), "{msg}");
        assert!(msg.contains("dense"), "{msg}");

        let unquantized = {
            let net = quantized_model().net;
            SnnModel::fresh(net, 3).unwrap().to_cat(4, 20, 3).unwrap()
        };
        let msg = format!("{}", LutFile::from_model(&unquantized).unwrap_err());
        assert!(msg.contains("no quantized grid"), "{msg}");
    }

    #[test]
    fn manifest_covers_every_profile() {
        let model = quantized_model();
        let catalog = crate::profiles::load_catalog(None).unwrap();
        let csv = manifest_csv(&model, &catalog).unwrap();
        for p in &catalog {
            assert!(csv.contains(&format!("{},overall", p.name)), "{csv}");
        }
        assert!(csv.contains("truenorth-like,layer0-unique-states,4,4,true"), "{csv}");
    }
}
