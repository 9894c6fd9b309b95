//! Reader for the big-endian IDX image/label format. Only the two record
//! types the pipeline consumes are supported: unsigned-byte images
//! (magic 0x00000803, dimensions N x H x W) and unsigned-byte labels
//! (magic 0x00000801). Parse errors carry the byte offset.

use std::path::Path;

use spikepack_core::data::Dataset;
use spikepack_core::tensor::Tensor;

use crate::CliError;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Pixels scaled to [0, 1], shaped [N, 1, H, W].
pub fn parse_images(bytes: &[u8]) -> Result<Tensor, CliError> {
    let magic = be_u32(bytes, 0, "image file")?;
    if magic != IMAGE_MAGIC {
        return Err(CliError::Run(format!(
            "image file: offset 0: bad magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "image file")? as usize;
    let h = be_u32(bytes, 8, "image file")? as usize;
    let w = be_u32(bytes, 12, "image file")? as usize;
    let need = 16 + n * h * w;
    if bytes.len() != need {
        return Err(CliError::Run(format!(
            "image file: offset 16: {n}x{h}x{w} images need {need} bytes total, file has {}",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(vec![n, 1, h, w], data)?)
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>, CliError> {
    let magic = be_u32(bytes, 0, "label file")?;
    if magic != LABEL_MAGIC {
        return Err(CliError::Run(format!(
            "label file: offset 0: bad magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "label file")? as usize;
    let need = 8 + n;
    if bytes.len() != need {
        return Err(CliError::Run(format!(
            "label file: offset 8: {n} labels need {need} bytes total, file has {}",
            bytes.len()
        )));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Pair one image file with one label file. `classes` comes from the
/// configuration; every label must fall below it.
pub fn load_dataset(
    images_path: &Path,
    labels_path: &Path,
    classes: usize,
) -> Result<Dataset, CliError> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|e| CliError::Run(format!("cannot read {}: {e}", p.display())))
    };
    let x = parse_images(&read(images_path)?)
        .map_err(|e| CliError::Run(format!("{}: {e}", images_path.display())))?;
    let y = parse_labels(&read(labels_path)?)
        .map_err(|e| CliError::Run(format!("{}: {e}", labels_path.display())))?;
    if x.shape()[0] != y.len() {
        return Err(CliError::Run(format!(
            "{} holds {} images but {} holds {} labels",
            images_path.display(),
            x.shape()[0],
            labels_path.display(),
            y.len()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
        return Err(CliError::Run(format!(
            "{}: label {bad} outside the configured {classes} classes",
            labels_path.display()
        )));
    }
    Ok(Dataset { x, y, classes })
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32, CliError> {
    match bytes.get(offset..offset + 4) {
        Some(s) => Ok(u32::from_be_bytes(s.try_into().unwrap())),
        None => Err(CliError::Run(format!(
            "{what}: offset {offset}: truncated header ({} bytes total)",
            bytes.len()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Two 2x2 images built by hand: one all-black with a single full-white
    // pixel, one mid-gray.
    fn image_bytes() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3];
        b.extend_from_slice(&2u32.to_be_bytes());
        b.extend_from_slice(&2u32.to_be_bytes());
        b.extend_from_slice(&2u32.to_be_bytes());
        b.extend_from_slice(&[0, 255, 0, 0]);
        b.extend_from_slice(&[51, 51, 51, 51]);
        b
    }

    fn label_bytes() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 1];
        b.extend_from_slice(&2u32.to_be_bytes());
        b.extend_from_slice(&[1, 0]);
        b
    }

    #[test]
    fn hand_built_pair_parses_exactly() {
        let x = parse_images(&image_bytes()).unwrap();
        assert_eq!(x.shape(), &[2, 1, 2, 2]);
        assert_eq!(x.data()[..4], [0.0, 1.0, 0.0, 0.0]);
        assert_eq!(x.data()[4], 51.0 / 255.0);
        assert_eq!(parse_labels(&label_bytes()).unwrap(), vec![1, 0]);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut b = image_bytes();
        b[3] = 1;
        let msg = format!("{}", parse_images(&b).unwrap_err());
        assert!(msg.contains("offset 0"), "{msg}");
        assert!(msg.contains("0x00000801"), "{msg}");

        let msg = format!("{}", parse_labels(&image_bytes()).unwrap_err());
        assert!(msg.contains("bad magic 0x00000803"), "{msg}");
    }

    #[test]
    fn truncation_reports_offset() {
        let msg = format!("{}", parse_images(&image_bytes()[..10]).unwrap_err());
        assert!(msg.contains("offset 8"), "{msg}");

        let mut short = image_bytes();
        short.pop();
        let msg = format!("{}", parse_images(&short).unwrap_err());
        assert!(msg.contains("need 24 bytes"), "{msg}");
    }

    #[test]
    fn dataset_pairing_checks_counts_and_classes() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        std::fs::write(&ip, image_bytes()).unwrap();
        std::fs::write(&lp, label_bytes()).unwrap();

        let ds = load_dataset(&ip, &lp, 2).unwrap();
        assert_eq!(ds.x.shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.y, vec![1, 0]);

        let msg = format!("{}", load_dataset(&ip, &lp, 1).unwrap_err());
        assert!(msg.contains("label 1 outside"), "{msg}");

        let mut one_label = vec![0, 0, 8, 1];
        one_label.extend_from_slice(&1u32.to_be_bytes());
        one_label.push(0);
        std::fs::write(&lp, one_label).unwrap();
        let msg = format!("{}", load_dataset(&ip, &lp, 2).unwrap_err());
        assert!(msg.contains("2 images but"), "{msg}");
    }
}
