use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

/// Bytes per record: one label byte then 3×1024 channel-planar pixels.
pub const CIFAR_RECORD: usize = 3073;
const SIDE: usize = 32;

/// Reads CIFAR-10 binary batch files in the given order. Records whose label
/// is outside `class_filter` are skipped; at most `per_class_cap` records of
/// each class are kept, first come first served.
pub fn load_cifar_batches<P: AsRef<Path>>(
    paths: &[P],
    class_filter: Option<&[usize]>,
    per_class_cap: Option<usize>,
) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut counts = [0usize; 10];
    for path in paths {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: size {} is not a multiple of {CIFAR_RECORD}",
                path.display(),
                bytes.len()
            )));
        }
        for (r, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
            let y = rec[0] as usize;
            if y > 9 {
                return Err(Error::Format(format!("{}: record {r} has label byte {y}", path.display())));
            }
            if class_filter.is_some_and(|f| !f.contains(&y)) || per_class_cap.is_some_and(|c| counts[y] >= c) {
                continue;
            }
            counts[y] += 1;
            labels.push(y);
            let planes = &rec[1..];
            for p in 0..SIDE * SIDE {
                for c in 0..3 {
                    pixels.push(planes[c * SIDE * SIDE + p] as f32 / 255.0);
                }
            }
        }
    }
    Dataset::new(pixels, labels, (SIDE, SIDE, 3), 10)
}

/// Encodes one `[32, 32, 3]` byte image as a binary record.
pub fn cifar_record(label: u8, hwc: &[u8]) -> Result<Vec<u8>> {
    if hwc.len() != SIDE * SIDE * 3 || label > 9 {
        return Err(Error::Format("CIFAR record needs 3072 pixel bytes and a label below 10".into()));
    }
    let mut out = Vec::with_capacity(CIFAR_RECORD);
    out.push(label);
    for c in 0..3 {
        out.extend((0..SIDE * SIDE).map(|p| hwc[p * 3 + c]));
    }
    Ok(out)
}
