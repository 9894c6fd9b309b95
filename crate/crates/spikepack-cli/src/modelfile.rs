//! Binary model container. Everything little-endian; loading a file and
//! saving it again reproduces the bytes exactly, which is what makes
//! checkpoint comparisons and determinism checks meaningful.
//!
//! Layout: magic "SPKM", format version, config hash, stage provenance
//! strings, network description, then one tagged payload per weighted
//! layer.

use std::path::Path;

use spikepack_core::codebook::{Codebook, QuantMode, QuantizedLevels};
use spikepack_core::lif::LifConfig;
use spikepack_core::model::{Layer, NetSpec, Readout};
use spikepack_core::tensor::Tensor;
use spikepack_core::ternary::TernaryLayer;
use spikepack_core::train::{LayerPayload, SnnModel};

use crate::CliError;

const MAGIC: &[u8; 4] = b"SPKM";
const VERSION: u32 = 1;

/// A model plus the bookkeeping that ties it to the run that made it.
#[derive(Debug, Clone)]
pub struct ModelFile {
    pub model: SnnModel,
    pub config_hash: u64,
    /// Stage names in the order they were applied.
    pub provenance: Vec<String>,
}

impl ModelFile {
    pub fn new(model: SnnModel, config_hash: u64, stage: &str) -> ModelFile {
        ModelFile { model, config_hash, provenance: vec![stage.to_string()] }
    }

    /// The same model after one more stage, provenance extended.
    pub fn derive(&self, model: SnnModel, stage: &str) -> ModelFile {
        let mut provenance = self.provenance.clone();
        provenance.push(stage.to_string());
        ModelFile { model, config_hash: self.config_hash, provenance }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u64(self.config_hash);
        w.u32(self.provenance.len() as u32);
        for s in &self.provenance {
            w.string(s);
        }
        write_net(&mut w, &self.model.net);
        w.u32(self.model.payloads.len() as u32);
        for p in &self.model.payloads {
            write_payload(&mut w, p);
        }
        w.out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelFile, CliError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(CliError::Run(format!(
                "model file: bad magic {magic:02x?} at offset 0, expected {MAGIC:02x?}"
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CliError::Run(format!(
                "model file: unsupported version {version}, this build reads {VERSION}"
            )));
        }
        let config_hash = r.u64()?;
        let n_prov = r.u32()? as usize;
        let mut provenance = Vec::with_capacity(n_prov);
        for _ in 0..n_prov {
            provenance.push(r.string()?);
        }
        let net = read_net(&mut r)?;
        let n_payloads = r.u32()? as usize;
        let mut payloads = Vec::with_capacity(n_payloads);
        for _ in 0..n_payloads {
            payloads.push(read_payload(&mut r)?);
        }
        if r.pos != bytes.len() {
            return Err(CliError::Run(format!(
                "model file: {} trailing bytes at offset {}",
                bytes.len() - r.pos,
                r.pos
            )));
        }
        let model = SnnModel { net, payloads };
        model.validate()?;
        Ok(ModelFile { model, config_hash, provenance })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| CliError::Run(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<ModelFile, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Run(format!("cannot read {}: {e}", path.display())))?;
        ModelFile::from_bytes(&bytes)
            .map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
    }
}

fn write_net(w: &mut Writer, net: &NetSpec) {
    w.u32(net.input.0 as u32);
    w.u32(net.input.1 as u32);
    w.u32(net.input.2 as u32);
    w.f64(net.lif.beta);
    w.f64(net.lif.u_thr);
    w.u32(net.lif.t_steps as u32);
    w.f64(net.lif.surrogate_alpha);
    w.u8(match net.readout {
        Readout::Mean => 0,
        Readout::Sum => 1,
    });
    w.u32(net.layers.len() as u32);
    for layer in &net.layers {
        match *layer {
            Layer::Conv { out_c, kernel, stride, pad } => {
                w.u8(0);
                w.u32(out_c as u32);
                w.u32(kernel as u32);
                w.u32(stride as u32);
                w.u32(pad as u32);
            }
            Layer::Pool => w.u8(1),
            Layer::Dense { out_f } => {
                w.u8(2);
                w.u32(out_f as u32);
            }
        }
    }
}

fn read_net(r: &mut Reader) -> Result<NetSpec, CliError> {
    let input = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let lif = LifConfig {
        beta: r.f64()?,
        u_thr: r.f64()?,
        t_steps: r.u32()? as usize,
        surrogate_alpha: r.f64()?,
    };
    let readout = match r.u8()? {
        0 => Readout::Mean,
        1 => Readout::Sum,
        t => return Err(r.bad(format!("unknown readout tag {t}"))),
    };
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        layers.push(match r.u8()? {
            0 => Layer::Conv {
                out_c: r.u32()? as usize,
                kernel: r.u32()? as usize,
                stride: r.u32()? as usize,
                pad: r.u32()? as usize,
            },
            1 => Layer::Pool,
            2 => Layer::Dense { out_f: r.u32()? as usize },
            t => return Err(r.bad(format!("unknown layer tag {t}"))),
        });
    }
    Ok(NetSpec { input, layers, lif, readout })
}

fn write_payload(w: &mut Writer, p: &LayerPayload) {
    match p {
        LayerPayload::Fp { weight, qat_bits } => {
            w.u8(0);
            w.u8(qat_bits.unwrap_or(0) as u8);
            w.tensor(weight);
        }
        LayerPayload::Cat { latent, codebook } => {
            w.u8(1);
            w.tensor(latent);
            w.u32(codebook.levels.len() as u32);
            for &c in &codebook.levels {
                w.f64(c);
            }
            match &codebook.quant {
                None => w.u8(0),
                Some(q) => {
                    w.u8(1);
                    w.u32(q.bits);
                    w.f64(q.scale);
                    for &l in &q.q_levels {
                        w.u32(l as u32);
                    }
                    w.u8(match q.mode {
                        QuantMode::UnitFloor => 0,
                        QuantMode::ResolutionPreserving => 1,
                    });
                }
            }
        }
        LayerPayload::Ternary { layer } => {
            w.u8(2);
            w.tensor(&layer.latent);
            w.f64(layer.w_pos);
            w.f64(layer.w_neg);
            w.f64(layer.threshold_frac);
        }
    }
}

fn read_payload(r: &mut Reader) -> Result<LayerPayload, CliError> {
    Ok(match r.u8()? {
        0 => {
            let qat = r.u8()?;
            let weight = r.tensor()?;
            LayerPayload::Fp { weight, qat_bits: if qat == 0 { None } else { Some(qat as u32) } }
        }
        1 => {
            let latent = r.tensor()?;
            let m = r.u32()? as usize;
            let mut levels = Vec::with_capacity(m);
            for _ in 0..m {
                levels.push(r.f64()?);
            }
            let quant = match r.u8()? {
                0 => None,
                1 => {
                    let bits = r.u32()?;
                    let scale = r.f64()?;
                    let mut q_levels = Vec::with_capacity(m);
                    for _ in 0..m {
                        q_levels.push(r.u32()? as i32);
                    }
                    let mode = match r.u8()? {
                        0 => QuantMode::UnitFloor,
                        1 => QuantMode::ResolutionPreserving,
                        t => return Err(r.bad(format!("unknown quantization mode tag {t}"))),
                    };
                    Some(QuantizedLevels { bits, scale, q_levels, mode })
                }
                t => return Err(r.bad(format!("unknown quantization presence tag {t}"))),
            };
            LayerPayload::Cat { latent, codebook: Codebook { levels, quant } }
        }
        2 => {
            let latent = r.tensor()?;
            LayerPayload::Ternary {
                layer: TernaryLayer {
                    latent,
                    w_pos: r.f64()?,
                    w_neg: r.f64()?,
                    threshold_frac: r.f64()?,
                },
            }
        }
        t => return Err(r.bad(format!("unknown payload tag {t}"))),
    })
}

#[derive(Default)]
struct Writer {
    out: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.out.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.out.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bad(&self, msg: String) -> CliError {
        CliError::Run(format!("model file: {msg} at offset {}", self.pos - 1))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        if self.pos + n > self.bytes.len() {
            return Err(CliError::Run(format!(
                "model file: truncated at offset {} (wanted {n} more bytes, have {})",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CliError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CliError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CliError> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CliError::Run(format!("model file: invalid utf-8 at offset {at}")))
    }

    fn tensor(&mut self) -> Result<Tensor, CliError> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(self.bad(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f64()?);
        }
        Ok(Tensor::new(shape, data)?)
    }
}
