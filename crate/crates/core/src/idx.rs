//! Reader for the big-endian IDX format used by the MNIST distribution.
//!
//! Header: 4-byte magic (`0x00000803` images, `0x00000801` labels), then one
//! 4-byte count per dimension, then unsigned-byte payload.

use std::path::Path;

use crate::dataset::LabeledSet;
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    /// Pixels scaled to `[0, 1]`, each image flattened row-major.
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        pixels: Vec<f64>,
    },
    Labels(Vec<u8>),
}

impl IdxData {
    pub fn count(&self) -> usize {
        match self {
            IdxData::Images { count, .. } => *count,
            IdxData::Labels(l) => l.len(),
        }
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset,
            message: format!("header truncated: need 4 bytes, file has {}", bytes.len()),
        })
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = read_u32(bytes, 0)?;
    match magic {
        LABELS_MAGIC => {
            let count = read_u32(bytes, 4)? as usize;
            let payload = &bytes[8..];
            check_payload(payload.len(), count, 8)?;
            Ok(IdxData::Labels(payload.to_vec()))
        }
        IMAGES_MAGIC => {
            let count = read_u32(bytes, 4)? as usize;
            let rows = read_u32(bytes, 8)? as usize;
            let cols = read_u32(bytes, 12)? as usize;
            if rows == 0 || cols == 0 {
                return Err(Error::Format {
                    offset: if rows == 0 { 8 } else { 12 },
                    message: "image dimensions must be positive".into(),
                });
            }
            let payload = &bytes[16..];
            let expected = count.checked_mul(rows * cols).ok_or_else(|| Error::Format {
                offset: 4,
                message: "declared size overflows".into(),
            })?;
            check_payload(payload.len(), expected, 16)?;
            let pixels = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
            Ok(IdxData::Images {
                count,
                rows,
                cols,
                pixels,
            })
        }
        other => Err(Error::Format {
            offset: 0,
            message: format!("bad magic 0x{other:08x}"),
        }),
    }
}

fn check_payload(found: usize, expected: usize, header_len: usize) -> Result<()> {
    if found < expected {
        return Err(Error::Format {
            offset: header_len + found,
            message: format!("payload truncated: header declares {expected} bytes, found {found}"),
        });
    }
    if found > expected {
        return Err(Error::Format {
            offset: header_len + expected,
            message: format!("{} trailing bytes after declared payload", found - expected),
        });
    }
    Ok(())
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxData> {
    parse_idx(&std::fs::read(path)?)
}

/// Joins an image file and a label file into a dataset, keeping at most
/// `limit` examples.
pub fn load_idx_dataset(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    num_classes: usize,
    limit: Option<usize>,
) -> Result<LabeledSet> {
    let IdxData::Images {
        count,
        rows,
        cols,
        mut pixels,
    } = load_idx(images)?
    else {
        return Err(Error::Format {
            offset: 0,
            message: "expected an image file".into(),
        });
    };
    let IdxData::Labels(label_bytes) = load_idx(labels)? else {
        return Err(Error::Format {
            offset: 0,
            message: "expected a label file".into(),
        });
    };
    if label_bytes.len() != count {
        return Err(Error::Format {
            offset: 4,
            message: format!("label count {} does not match image count {count}", label_bytes.len()),
        });
    }
    let keep = limit.map_or(count, |l| l.min(count));
    pixels.truncate(keep * rows * cols);
    let labels = label_bytes[..keep].iter().map(|&b| usize::from(b)).collect();
    LabeledSet::new(rows * cols, num_classes, pixels, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn parses_labels() {
        let mut bytes = vec![0x00, 0x00, 0x08, 0x01, 0, 0, 0, 3];
        bytes.extend_from_slice(&[7, 0, 9]);
        assert_eq!(parse_idx(&bytes).unwrap(), IdxData::Labels(vec![7, 0, 9]));
    }

    #[test]
    fn parses_images_scaled() {
        let mut bytes = header(IMAGES_MAGIC, &[2, 1, 2]);
        bytes.extend_from_slice(&[0, 255, 51, 102]);
        let IdxData::Images {
            count,
            rows,
            cols,
            pixels,
        } = parse_idx(&bytes).unwrap()
        else {
            panic!("expected images");
        };
        assert_eq!((count, rows, cols), (2, 1, 2));
        assert_eq!(pixels, vec![0.0, 1.0, 0.2, 0.4]);
    }

    #[test]
    fn truncated_payload_names_offset() {
        let mut bytes = header(LABELS_MAGIC, &[3]);
        bytes.extend_from_slice(&[1, 2]);
        match parse_idx(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_idx(&[0, 0, 8]), Err(Error::Format { offset: 0, .. })));
        let short_header = header(IMAGES_MAGIC, &[1, 28]);
        assert!(matches!(
            parse_idx(&short_header),
            Err(Error::Format { offset: 12, .. })
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let bytes = header(0x0000_0802, &[0]);
        assert!(matches!(parse_idx(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn mnist_train_shaped_header() {
        let mut bytes = header(IMAGES_MAGIC, &[60000, 28, 28]);
        bytes.resize(16 + 60000 * 28 * 28, 0);
        let data = parse_idx(&bytes).unwrap();
        let IdxData::Images { count, rows, cols, .. } = data else {
            panic!("expected images");
        };
        assert_eq!((count, rows, cols), (60000, 28, 28));
    }
}
